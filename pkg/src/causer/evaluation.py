"""Ranking metrics, Markov-equivalence comparison, structural distance and
history explanations."""
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .causal_graph import is_acyclic, item_matrix
from .diffnum import ops
from .errors import DimensionError, UsageError
from .seq_model import Ablation, as_item_indices, flatten_histories, pack, score_batch, step_terms

SCORE_CHUNK = 4096


# ------------------------------------------------------------------ ranking

@dataclass
class RankResult:
    user: object
    ranked_items: list
    ground_truth: frozenset

    def __post_init__(self):
        self.ranked_items = [int(i) for i in self.ranked_items]
        if len(set(self.ranked_items)) != len(self.ranked_items):
            raise UsageError("ranked items must be distinct")
        self.ground_truth = frozenset(int(i) for i in self.ground_truth)

    @property
    def z(self):
        return len(self.ranked_items)


def _check(result):
    if result.z < 1:
        raise UsageError("Z must be >= 1")
    if not result.ground_truth:
        raise UsageError("ground truth set is empty")


def f1_at_z(result):
    _check(result)
    hits = sum(1 for i in result.ranked_items if i in result.ground_truth)
    if hits == 0:
        return 0.0
    p = hits / result.z
    r = hits / len(result.ground_truth)
    return 2 * p * r / (p + r)


def ndcg_at_z(result):
    _check(result)
    dcg = sum(1.0 / math.log2(rank + 2)
              for rank, i in enumerate(result.ranked_items) if i in result.ground_truth)
    ideal = sum(1.0 / math.log2(rank + 2)
                for rank in range(min(len(result.ground_truth), result.z)))
    return dcg / ideal


def top_z(scores, z):
    """Indices of the ``z`` largest scores; ties go to the smaller index."""
    scores = np.asarray(scores, dtype=np.float64)
    if z < 1:
        raise UsageError("Z must be >= 1")
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:z]


def _context(stack):
    item_emb = ops.value(stack.item_embeddings())
    A = ops.value(stack.assign())
    Wc = ops.value(stack.graph.Wc)
    keep = stack.keep()
    return item_emb, A, Wc, keep


def score_all(histories, users, stack, context=None):
    """Logits of every vocabulary item for each (history, user) pair, shape
    (len(histories), n_items). Scoring runs in chunks of instances."""
    item_emb, A, Wc, keep = context or _context(stack)
    n_items = stack.seq.n_items
    histories = [[as_item_indices(st, n_items) for st in h] for h in histories]
    flat = flatten_histories(histories)
    out = np.empty((len(histories), n_items))
    per = max(1, SCORE_CHUNK // n_items)
    items = np.arange(n_items)
    for start in range(0, len(histories), per):
        rows = np.arange(start, min(start + per, len(histories)))
        seq = np.repeat(rows, n_items)
        lens = np.array([len(histories[r]) for r in rows]).repeat(n_items)
        us = np.asarray(users)[rows].repeat(n_items)
        batch = pack(flat, seq, lens, us, np.tile(items, len(rows)), keep)
        z = score_batch(batch, stack.seq, item_emb, A, Wc, stack.ablation)
        out[rows] = np.asarray(z).reshape(len(rows), n_items)
    return out


def rank_items(history, user, stack, z):
    """Top-``z`` items for one history. Ranking uses the logit, which orders
    items like the probability without ties from saturation."""
    scores = score_all([history], [user], stack)[0]
    return top_z(scores, z)


def evaluate_users(stack, split, z=5, phase="test"):
    """Mean F1@Z and NDCG@Z over users with a non-empty target step.

    ``phase="test"`` scores the last step from train + validation history;
    ``phase="valid"`` scores the validation step from the train history.
    """
    if phase not in ("test", "valid"):
        raise UsageError("phase must be 'test' or 'valid'")
    histories, targets, users = [], [], []
    for u, seq in enumerate(split.train.sequences):
        hist = list(seq) + ([split.valid[u]] if phase == "test" else [])
        truth = split.test[u] if phase == "test" else split.valid[u]
        if len(hist) == 0 or len(truth) == 0:
            continue
        histories.append(hist)
        targets.append(truth)
        users.append(u)
    f1s, ndcgs = [], []
    if histories:
        scores = score_all(histories, users, stack)
        for u, s, truth in zip(users, scores, targets):
            res = RankResult(u, top_z(s, z), truth)
            f1s.append(f1_at_z(res))
            ndcgs.append(ndcg_at_z(res))
    return {"z": int(z), "f1": float(np.mean(f1s)) if f1s else 0.0,
            "ndcg": float(np.mean(ndcgs)) if ndcgs else 0.0,
            "users_evaluated": len(f1s)}


# -------------------------------------------------------- graph comparison

def _adj(g):
    adj = np.asarray(getattr(g, "adjacency", g)) != 0
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise DimensionError("adjacency must be square")
    return adj


def skeleton(g):
    """Set of unordered adjacent pairs ``(i, j)`` with ``i < j``."""
    adj = _adj(g)
    und = adj | adj.T
    return {(int(i), int(j)) for i, j in zip(*np.nonzero(np.triu(und, 1)))}


def v_structures(g):
    """Set of ``(i, k, j)`` with ``i -> k <- j``, ``i < j`` and i, j non-adjacent."""
    adj = _adj(g)
    out = set()
    for k in range(adj.shape[0]):
        parents = np.nonzero(adj[:, k])[0]
        for i, j in combinations(parents, 2):
            if not (adj[i, j] or adj[j, i]):
                out.add((int(i), k, int(j)))
    return out


def mec_equivalent(g1, g2):
    a1, a2 = _adj(g1), _adj(g2)
    if a1.shape != a2.shape:
        raise DimensionError("graphs have different node counts")
    if not (is_acyclic(a1) and is_acyclic(a2)):
        raise UsageError("Markov equivalence needs acyclic graphs")
    return skeleton(a1) == skeleton(a2) and v_structures(a1) == v_structures(a2)


def shd(g1, g2):
    """Edge insertions, deletions and reversals turning ``g1`` into ``g2``;
    a reversal counts once."""
    a1, a2 = _adj(g1), _adj(g2)
    if a1.shape != a2.shape:
        raise DimensionError("graphs have different node counts")
    n = a1.shape[0]
    count = 0
    for i in range(n):
        for j in range(i + 1, n):
            if (a1[i, j], a1[j, i]) != (a2[i, j], a2[j, i]):
                count += 1
    return count


def mec_report(learned, truth):
    """JSON-ready comparison listing skeleton and v-structure differences."""
    s1, s2 = skeleton(learned), skeleton(truth)
    v1, v2 = v_structures(learned), v_structures(truth)
    acyclic = is_acyclic(_adj(learned))
    return {
        "equivalent": bool(acyclic and s1 == s2 and v1 == v2),
        "learned_acyclic": bool(acyclic),
        "shd": shd(learned, truth),
        "skeleton_missing": sorted(list(p) for p in s2 - s1),
        "skeleton_extra": sorted(list(p) for p in s1 - s2),
        "v_structures_missing": sorted(list(v) for v in v2 - v1),
        "v_structures_extra": sorted(list(v) for v in v1 - v2),
    }


def match_clusters(true_labels, learned_labels, k):
    """Map learned cluster ids onto planted ids by maximum overlap.

    Returns ``perm`` with ``perm[learned] = planted``.
    """
    M = np.zeros((k, k), dtype=np.int64)
    np.add.at(M, (np.asarray(learned_labels), np.asarray(true_labels)), 1)
    rows, cols = linear_sum_assignment(-M)
    perm = np.empty(k, dtype=np.int64)
    perm[rows] = cols
    return perm


def relabel(adj, perm):
    """Adjacency over learned clusters rewritten in planted cluster ids."""
    adj = np.asarray(adj)
    out = np.zeros_like(adj)
    out[np.ix_(perm, perm)] = adj
    return out


def cluster_purity(true_labels, learned_labels, k):
    perm = match_clusters(true_labels, learned_labels, k)
    return float(np.mean(perm[np.asarray(learned_labels)] == np.asarray(true_labels)))


# ------------------------------------------------------------- explanation

@dataclass
class Explanation:
    """Top history items as ``(step index, item, score)``; ``skipped_all`` is
    set when filtering removed the whole history."""

    items: list
    skipped_all: bool = False


def explain(history, user, target, stack, n=3, mode="full"):
    """Score every kept history item by its causal weight toward ``target``
    times the attention of its step, and return the ``n`` best.

    ``mode="no_att"`` drops the attention factor, ``mode="no_causal"`` the
    causal one. A step's item scores sum to the step's W_hat * alpha.
    """
    if mode not in ("full", "no_att", "no_causal"):
        raise UsageError("mode must be full, no_att or no_causal")
    if len(history) == 0:
        raise UsageError("history must be non-empty")
    item_emb, A, Wc, keep = _context(stack)
    steps = [as_item_indices(st, stack.seq.n_items) for st in history]
    batch = pack(flatten_histories([steps]), [0], [len(steps)], [user], [target], keep)
    if batch.fallback[0]:
        return Explanation([], skipped_all=True)
    ablation = Ablation(no_att=stack.ablation.no_att, no_causal=False,
                        no_filter=stack.ablation.no_filter)
    _, alpha, _ = step_terms(batch, stack.seq, item_emb, A, Wc, ablation)
    alpha = np.asarray(alpha)[0]
    W = np.asarray(item_matrix(A, Wc))
    scored = []
    for t in range(int(batch.n_kept[0])):
        step = int(batch.orig[0, t])
        for s in range(batch.idx.shape[2]):
            if batch.w[0, t, s] == 0:
                continue
            item = int(batch.idx[0, t, s])
            w = W[item, target]
            score = {"full": w * alpha[t], "no_att": w, "no_causal": alpha[t]}[mode]
            scored.append((step, item, float(score)))
    scored.sort(key=lambda r: (-r[2], r[0], r[1]))
    return Explanation(scored[:n])


def explanation_scores(explanation, relevant, n):
    """F1 and NDCG of the explained items against a relevant item set."""
    relevant = frozenset(int(i) for i in relevant)
    if not relevant:
        raise UsageError("relevant set is empty")
    ranked = []
    for _, item, _ in explanation.items:
        if item not in ranked:
            ranked.append(item)
    ranked = ranked[:n]
    # short explanations are padded with ids that can never be relevant
    ranked += [-1 - k for k in range(n - len(ranked))]
    res = RankResult(None, ranked, relevant)
    return f1_at_z(res), ndcg_at_z(res)


def explanation_benchmark(stack, split, truth_adj, cluster_of, n=3, mode="full", limit=None):
    """Mean explanation F1/NDCG on test targets, where an item is relevant if
    its planted cluster is a parent of the target's planted cluster."""
    truth_adj = np.asarray(truth_adj)
    cluster_of = np.asarray(cluster_of)
    f1s, ndcgs, skipped = [], [], 0
    users = range(len(split.train.sequences)) if limit is None else range(limit)
    for u in users:
        hist = list(split.train.sequences[u]) + [split.valid[u]]
        for b in split.test[u]:
            parents = np.nonzero(truth_adj[:, cluster_of[b]])[0]
            relevant = {int(i) for st in hist for i in st if cluster_of[i] in parents}
            if not relevant:
                continue
            ex = explain(hist, u, int(b), stack, n, mode)
            if ex.skipped_all:
                skipped += 1
                continue
            f, g = explanation_scores(ex, relevant, n)
            f1s.append(f)
            ndcgs.append(g)
    return {"n": n, "mode": mode, "f1": float(np.mean(f1s)) if f1s else 0.0,
            "ndcg": float(np.mean(ndcgs)) if ndcgs else 0.0,
            "cases": len(f1s), "skipped_all": skipped}
