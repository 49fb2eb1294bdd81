"""Joint objective and the augmented-Lagrangian training loop."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .causal_graph import CausalGraph, item_matrix, l1_penalty
from .diffnum import Tape, ops
from .diffnum.linalg import dag_penalty
from .errors import NumericError, TrainingDivergence, UsageError
from .item_space import ClusterModel, assignments, autoencoder_losses, encode
from .seq_model import Ablation, SeqModel, keep_matrix, pack, score_batch

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class OptimizerState:
    """Hyperparameters of the inner loop plus the Lagrangian coefficients."""

    beta1: float = 0.0
    beta2: float = 1.0
    kappa1: float = 10.0
    kappa2: float = 0.25
    # ceiling on beta2; None keeps the growth rule unbounded
    beta2_max: float = None
    gamma: float = 1e-3
    epochs: int = 30
    inner_iters: int = None  # None: one pass over the epoch's instances
    lam: float = 1e-2
    epsilon: float = 0.3
    negatives: int = 4
    batch_size: int = 128
    seed: int = 0
    # "iteration" follows the pseudocode (update after every step);
    # "epoch" moves the multiplier update to the end of each epoch
    lagrangian: str = "iteration"
    constrained: bool = True
    slow_every: int = None
    threads: int = 1
    # full-batch steps on the clustering loss moving only the assignment
    # logits, run once before the first epoch
    warmup_iters: int = 0

    def __post_init__(self):
        if not self.kappa1 > 1:
            raise UsageError("kappa1 must exceed 1")
        if not 0 < self.kappa2 < 1:
            raise UsageError("kappa2 must lie in (0, 1)")
        if not self.beta2 > 0:
            raise UsageError("beta2 must be positive")
        if self.beta2_max is not None and not self.beta2_max >= self.beta2:
            raise UsageError("beta2_max must be at least the initial beta2")
        if not self.gamma > 0:
            raise UsageError("learning rate must be positive")
        if self.epochs < 0 or self.negatives < 0 or self.batch_size < 1:
            raise UsageError("epochs, negatives and batch_size must be non-negative/positive")
        if self.lagrangian not in ("iteration", "epoch"):
            raise UsageError("lagrangian must be 'iteration' or 'epoch'")
        if self.warmup_iters < 0:
            raise UsageError("warmup_iters must be non-negative")
        if self.slow_every is not None and self.slow_every < 1:
            raise UsageError("slow_every must be >= 1")


def bce_term(pred, label):
    """Binary cross-entropy of one probability, clamped to [1e-12, 1 - 1e-12]."""
    p = min(max(float(pred), PROB_FLOOR), 1.0 - PROB_FLOOR)
    if not 0.0 < p < 1.0:
        raise NumericError(f"probability {pred!r} outside (0, 1)")
    return -math.log(p) if label else -math.log1p(-p)


def lagrangian_update(state, b_now, b_prev):
    """beta1 += beta2 * b_now; beta2 *= kappa1 when |b_now| >= kappa2 |b_prev|,
    clipped at ``beta2_max`` when one is set."""
    beta1 = state.beta1 + state.beta2 * b_now
    grow = abs(b_now) >= state.kappa2 * abs(b_prev)
    beta2 = state.beta2 * state.kappa1 if grow else state.beta2
    if state.beta2_max is not None:
        beta2 = min(beta2, state.beta2_max)
    return replace(state, beta1=beta1, beta2=beta2)


@dataclass
class ModelStack:
    cluster: ClusterModel
    graph: CausalGraph
    seq: SeqModel
    features: np.ndarray
    ablation: Ablation = field(default_factory=Ablation)

    def item_embeddings(self):
        return encode(self.features, self.cluster)

    def assign(self):
        return assignments(self.cluster)

    def item_W(self):
        return item_matrix(self.assign(), self.graph.Wc)

    def keep(self):
        return keep_matrix(self.item_W(), self.graph.epsilon, self.ablation)

    def param_groups(self):
        """Named parameter arrays: ``a.*`` (clustering), ``Wc``, ``g.*`` (sequence)."""
        out = {f"a.{k}": v for k, v in self.cluster.params().items()}
        out["Wc"] = self.graph.Wc
        out.update({f"g.{k}": v for k, v in self.seq.params.items()})
        return out

    def with_param_groups(self, groups):
        cl = self.cluster.with_params(**{k[2:]: v for k, v in groups.items() if k.startswith("a.")})
        gr = replace(self.graph, Wc=groups["Wc"]) if "Wc" in groups else self.graph
        sq = self.seq.with_params({**self.seq.params,
                                   **{k[2:]: v for k, v in groups.items() if k.startswith("g.")}})
        return replace(self, cluster=cl, graph=gr, seq=sq)

    @classmethod
    def init(cls, n_users, features, k, rng, *, d1=64, d2=64, d3=None, eta=1.0,
             cell_kind="gru", d_e=64, d_h=64, lam=1e-2, epsilon=0.3,
             wc_low=-0.05, wc_high=0.05, item_bias=False, ablation=Ablation()):
        features = np.asarray(features, dtype=np.float64)
        cluster = ClusterModel.init(features, k, rng, d1=d1, d2=d2, d3=d3, eta=eta)
        graph = CausalGraph.init(k, rng, wc_low, wc_high, lam=lam, epsilon=epsilon)
        seq = SeqModel.init(n_users, len(features), d2, rng, cell_kind=cell_kind, d_e=d_e, d_h=d_h,
                           item_bias=item_bias)
        return cls(cluster, graph, seq, features, ablation)


@dataclass
class Batch:
    """Packed instances plus their 0/1 labels."""

    packed: object
    labels: np.ndarray


def build_instances(train, rng, negatives):
    """Positive (history, item) pairs for every training step after the first,
    each with ``negatives`` uniform negatives drawn from items the user never
    touched in ``train``."""
    n_items = train.n_items
    seq_i, lens, targets, labels = [], [], [], []
    for u, seq in enumerate(train.sequences):
        if len(seq) < 2:
            continue
        seen = np.zeros(n_items, dtype=bool)
        for st in seq:
            seen[st] = True
        pool = np.nonzero(~seen)[0]
        for j in range(1, len(seq)):
            pos = seq[j]
            if len(pool) == 0:
                cand = np.setdiff1d(np.arange(n_items), pos)
            else:
                cand = pool
            for b in pos:
                seq_i.append(u)
                lens.append(j)
                targets.append(b)
                labels.append(1.0)
                if negatives and len(cand):
                    negs = cand[rng.integers(len(cand), size=negatives)]
                    seq_i.extend([u] * negatives)
                    lens.extend([j] * negatives)
                    targets.extend(negs.tolist())
                    labels.extend([0.0] * negatives)
    return (np.array(seq_i, dtype=np.int64), np.array(lens, dtype=np.int64),
            np.array(targets, dtype=np.int64), np.array(labels))


def make_batch(flat, inst, rows, keep):
    seq_i, lens, targets, labels = inst
    packed = pack(flat, seq_i[rows], lens[rows], seq_i[rows], targets[rows], keep)
    return Batch(packed, labels[rows])


def total_loss(stack, batch, state, tape=None, with_aux=True):
    """The joint objective: summed BCE + lambda |Wc|_1 + reconstruction +
    clustering + beta1 b(Wc) + beta2/2 b(Wc)^2.

    With a ``tape`` the stack's parameters are registered as leaves and the
    return value is ``(loss_var, leaves)``; otherwise a float.
    ``with_aux=False`` keeps only the BCE term (used for extra shards).
    """
    ab = stack.ablation
    if tape is not None:
        leaves = {k: tape.var(v, k) for k, v in stack.param_groups().items()}
        view = stack.with_param_groups(leaves)
    else:
        leaves, view = None, stack
    cm = view.cluster
    item_emb = encode(view.features, cm)
    A = assignments(cm)
    logits = score_batch(batch.packed, view.seq, item_emb, A, view.graph.Wc, ab)
    loss = ops.total(ops.bce_with_logits(logits, batch.labels, PROB_FLOOR))
    if with_aux:
        Wc = view.graph.Wc
        loss = ops.add(loss, ops.mul(stack.graph.lam, l1_penalty(Wc)))
        clus, rec = autoencoder_losses(view.features, cm)
        if not ab.no_rec:
            loss = ops.add(loss, rec)
        if not ab.no_clus:
            loss = ops.add(loss, clus)
        if state.constrained:
            h = ops.dag_penalty(Wc)
            loss = ops.add(loss, ops.add(ops.mul(state.beta1, h),
                                         ops.mul(0.5 * state.beta2, ops.square(h))))
    if tape is None:
        return float(loss)
    return loss, leaves


def loss_and_grads(stack, batch, state):
    """Loss value and ``{group name: gradient}``, sharded over ``state.threads``
    tapes and reduced in shard order."""
    n = len(batch.labels)
    shards = max(1, min(state.threads, n))
    bounds = np.linspace(0, n, shards + 1).astype(int)

    def run(s):
        rows = slice(bounds[s], bounds[s + 1])
        pb = batch.packed
        sub = Batch(type(pb)(pb.idx[rows], pb.w[rows], pb.orig[rows], pb.n_kept[rows],
                             pb.fallback[rows], pb.users[rows], pb.targets[rows]),
                    batch.labels[rows])
        tape = Tape()
        loss, leaves = total_loss(stack, sub, state, tape, with_aux=(s == 0))
        grads = tape.backward(loss)
        return float(loss.value), {k: grads[v] for k, v in leaves.items()}

    if shards == 1:
        results = [run(0)]
    else:
        with ThreadPoolExecutor(max_workers=shards) as pool:
            results = list(pool.map(run, range(shards)))
    value = 0.0
    grads = None
    for v, g in results:
        value += v
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    return value, grads


@dataclass
class TrainResult:
    stack: ModelStack
    state: OptimizerState
    log: list
    iter_log: list


def warm_up_assignments(stack, iters, gamma):
    """Gradient steps on the clustering loss with respect to ``a`` alone, so
    the soft assignments commit to nearby centers before the encoder moves."""
    cm = stack.cluster
    for _ in range(iters):
        tape = Tape()
        a = tape.var(cm.a, "a")
        clus, _ = autoencoder_losses(stack.features, cm.with_params(a=a))
        cm = cm.with_params(a=cm.a - gamma * tape.backward(clus)[a])
    return replace(stack, cluster=cm)


def train(train_set, stack, state, log_iterations=False, on_epoch=None):
    """Algorithm-1 loop: per epoch recompute the item-level matrix and the
    filter, then run inner gradient steps with the multiplier update."""
    rng = np.random.default_rng(state.seed + 1)
    if state.epochs and state.warmup_iters:
        stack = warm_up_assignments(stack, state.warmup_iters, state.gamma)
    flat = train_set.flat()
    epoch_log, iter_log = [], []
    b_cur = dag_penalty(stack.graph.Wc)
    slow_groups = {k for k in stack.param_groups() if k.startswith("a.") or k == "Wc"}
    for epoch in range(state.epochs):
        keep = stack.keep()
        inst = build_instances(train_set, rng, state.negatives)
        n_inst = len(inst[0])
        if n_inst == 0:
            raise UsageError("training split has no (history, target) pairs")
        order = rng.permutation(n_inst)
        n_iter = state.inner_iters or math.ceil(n_inst / state.batch_size)
        frozen = state.slow_every is not None and epoch % state.slow_every != 0
        b_epoch_start = b_cur
        losses = []
        for it in range(n_iter):
            start = (it * state.batch_size) % n_inst
            rows = order[np.arange(start, start + state.batch_size) % n_inst] \
                if state.batch_size < n_inst else order
            batch = make_batch(flat, inst, rows, keep)
            b_prev = b_cur
            value, grads = loss_and_grads(stack, batch, state)
            if not np.isfinite(value):
                raise TrainingDivergence(epoch)
            groups = stack.param_groups()
            new = {}
            for k, g in grads.items():
                if frozen and k in slow_groups:
                    continue
                if k == "Wc":
                    g = g.copy()
                    np.fill_diagonal(g, 0.0)
                new[k] = groups[k] - state.gamma * g
                if not np.all(np.isfinite(new[k])):
                    raise TrainingDivergence(epoch, f"parameter {k} became non-finite")
            stack = stack.with_param_groups(new)
            b_cur = dag_penalty(stack.graph.Wc)
            losses.append(value)
            if state.constrained and state.lagrangian == "iteration":
                before = (state.beta1, state.beta2)
                state = lagrangian_update(state, b_cur, b_prev)
                if log_iterations:
                    iter_log.append({
                        "epoch": epoch, "iter": it, "b_prev": b_prev, "b_now": b_cur,
                        "beta1_before": before[0], "beta2_before": before[1],
                        "beta1": state.beta1, "beta2": state.beta2,
                        "kappa1": state.kappa1, "kappa2": state.kappa2,
                        "beta2_max": state.beta2_max,
                    })
        if state.constrained and state.lagrangian == "epoch":
            before = (state.beta1, state.beta2)
            state = lagrangian_update(state, b_cur, b_epoch_start)
            if log_iterations:
                iter_log.append({
                    "epoch": epoch, "iter": n_iter - 1, "b_prev": b_epoch_start, "b_now": b_cur,
                    "beta1_before": before[0], "beta2_before": before[1],
                    "beta1": state.beta1, "beta2": state.beta2,
                    "kappa1": state.kappa1, "kappa2": state.kappa2,
                    "beta2_max": state.beta2_max,
                })
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            raise TrainingDivergence(epoch)
        rec = {"epoch": epoch, "loss": mean_loss, "dag_penalty": b_cur,
               "beta1": state.beta1, "beta2": state.beta2}
        epoch_log.append(rec)
        log.info("epoch %d loss %.4f b %.3e beta1 %.3e beta2 %.3e", epoch, mean_loss,
                 b_cur, state.beta1, state.beta2)
        if on_epoch is not None:
            on_epoch(rec, stack)
    return TrainResult(stack, state, epoch_log, iter_log)


def state_dict(state):
    return asdict(state)
