"""Interaction ingestion, leave-last-out splitting and synthetic data."""
import csv
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .causal_graph import BinaryDag, is_acyclic
from .errors import ParseError, SpecError, UsageError
from .item_space import ItemFeatures

log = logging.getLogger(__name__)

MIN_STEPS = 3


def _sort_key(x):
    # numeric ids sort numerically, everything else lexicographically
    s = str(x)
    return (0, int(s), s) if s.lstrip("-").isdigit() else (1, 0, s)


@dataclass
class InteractionDataset:
    """Per-user, time-ordered item-set sequences.

    ``sequences[u][t]`` is a sorted int array of item indices into ``items``.
    """

    users: list
    sequences: list
    items: list
    dropped: int = 0

    def __post_init__(self):
        if len(self.users) != len(self.sequences):
            raise UsageError("one sequence per user is required")
        n = len(self.items)
        for seq in self.sequences:
            for step in seq:
                if len(step) == 0:
                    raise UsageError("empty interaction step")
                if step.min() < 0 or step.max() >= n:
                    raise UsageError("item index outside the vocabulary")

    @property
    def n_items(self):
        return len(self.items)

    @property
    def n_users(self):
        return len(self.users)

    def __len__(self):
        return len(self.sequences)

    def __eq__(self, other):
        if not isinstance(other, InteractionDataset):
            return NotImplemented
        if list(self.users) != list(other.users) or list(self.items) != list(other.items):
            return False
        for s, o in zip(self.sequences, other.sequences):
            if len(s) != len(o) or any(not np.array_equal(a, b) for a, b in zip(s, o)):
                return False
        return True

    def flat(self):
        """CSR layout ``(seq_ptr, step_ptr, items)`` used by the packing kernel."""
        seq_ptr = np.zeros(len(self.sequences) + 1, dtype=np.int64)
        lens = [len(s) for s in self.sequences]
        seq_ptr[1:] = np.cumsum(lens)
        steps = [st for seq in self.sequences for st in seq]
        step_ptr = np.zeros(len(steps) + 1, dtype=np.int64)
        step_ptr[1:] = np.cumsum([len(st) for st in steps])
        items = np.concatenate(steps).astype(np.int64) if steps else np.zeros(0, np.int64)
        return seq_ptr, step_ptr, items

    def multi_hot(self, u):
        out = np.zeros((len(self.sequences[u]), self.n_items))
        for t, st in enumerate(self.sequences[u]):
            out[t, st] = 1.0
        return out

    def with_sequences(self, sequences):
        return InteractionDataset(list(self.users), sequences, list(self.items), self.dropped)


def load_sequences(path, min_steps=MIN_STEPS):
    """Read ``user_id<TAB>item_id<TAB>timestamp`` rows.

    Items sharing a (user, timestamp) are merged into one multi-hot step;
    sequences shorter than ``min_steps`` are dropped and counted.
    """
    rows = defaultdict(lambda: defaultdict(set))
    item_ids = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if lineno == 1 and parts[:3] == ["user_id", "item_id", "timestamp"]:
                continue
            if len(parts) != 3:
                raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", lineno, path)
            user, item, ts = parts
            if not user or not item:
                raise ParseError("empty user or item id", lineno, path)
            try:
                ts = int(ts)
            except ValueError:
                raise ParseError(f"timestamp {ts!r} is not an integer", lineno, path) from None
            rows[user][ts].add(item)
            item_ids.add(item)
    items = sorted(item_ids, key=_sort_key)
    pos = {it: k for k, it in enumerate(items)}
    users, seqs, dropped = [], [], 0
    for user in sorted(rows, key=_sort_key):
        steps = rows[user]
        if len(steps) < min_steps:
            dropped += 1
            continue
        users.append(user)
        seqs.append([np.array(sorted(pos[i] for i in steps[ts]), dtype=np.int64)
                     for ts in sorted(steps)])
    if dropped:
        log.warning("dropped %d sequences shorter than %d steps", dropped, min_steps)
    return InteractionDataset(users, seqs, items, dropped)


def write_sequences(path, dataset):
    """Write TSV with the step index as timestamp."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id\ttimestamp\n")
        for user, seq in zip(dataset.users, dataset.sequences):
            for t, step in enumerate(seq):
                for i in step:
                    fh.write(f"{user}\t{dataset.items[i]}\t{t}\n")


@dataclass
class Split:
    train: InteractionDataset
    valid: list
    test: list

    def __iter__(self):
        return iter((self.train, self.valid, self.test))


def split_leave_last(dataset):
    """Last step per user is test, second-to-last is validation, the rest train."""
    for seq in dataset.sequences:
        if len(seq) < MIN_STEPS:
            raise UsageError("every sequence needs at least 3 steps to split")
    train = dataset.with_sequences([list(seq[:-2]) for seq in dataset.sequences])
    valid = [seq[-2] for seq in dataset.sequences]
    test = [seq[-1] for seq in dataset.sequences]
    return Split(train, valid, test)


# ----------------------------------------------------------------- synthetic

@dataclass
class SyntheticSpec:
    """Generative recipe for sequences driven by a planted cluster DAG.

    Each sequence opens with an item from a root cluster. Every later step
    draws, with probability ``p``, an item from a child cluster of some
    cluster already in the history (uniform over eligible clusters, then over
    their items); otherwise, or if nothing is eligible, a uniform noise item.
    With probability ``noise`` one extra uniform item joins the step.
    """

    dag: list = field(default_factory=lambda: default_dag().tolist())
    items_per_cluster: int = 10
    p: float = 0.8
    noise: float = 0.1
    mean_length: float = 8.0
    n_users: int = 2000
    seed: int = 0
    allow_cycles: bool = False

    def __post_init__(self):
        adj = np.asarray(self.dag)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] < 2:
            raise SpecError("dag must be a square adjacency over >= 2 clusters")
        if np.any(np.diag(adj) != 0):
            raise SpecError("self loops are not allowed")
        if not self.allow_cycles and not is_acyclic(adj):
            raise SpecError("planted graph has a directed cycle")
        for name in ("p", "noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SpecError(f"{name} must be a probability")
        if self.items_per_cluster < 1 or self.n_users < 1:
            raise SpecError("need at least one item per cluster and one user")
        if self.mean_length < MIN_STEPS:
            raise SpecError(f"mean_length must be >= {MIN_STEPS}")

    @property
    def k(self):
        return len(self.dag)

    @property
    def n_items(self):
        return self.k * self.items_per_cluster


def default_dag():
    """0->1, 0->2, 1->3, 2->3, 3->4: a diamond feeding a tail, with one v-structure."""
    adj = np.zeros((5, 5), dtype=np.int8)
    for i, j in [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4)]:
        adj[i, j] = 1
    return adj


def gen_synthetic(spec):
    """Returns ``(dataset, ground_truth, item_to_cluster)``."""
    rng = np.random.default_rng(spec.seed)
    adj = np.asarray(spec.dag, dtype=np.int8)
    K, n_per = spec.k, spec.items_per_cluster
    n_items = K * n_per
    cluster_of = rng.permutation(np.repeat(np.arange(K), n_per))
    members = [np.nonzero(cluster_of == c)[0] for c in range(K)]
    roots = np.nonzero(adj.sum(axis=0) == 0)[0]
    if len(roots) == 0:
        roots = np.arange(K)
    width = len(str(n_items - 1))
    items = [f"i{k:0{width}d}" for k in range(n_items)]
    uw = len(str(spec.n_users - 1))
    users = [f"u{k:0{uw}d}" for k in range(spec.n_users)]
    seqs = []
    for _ in range(spec.n_users):
        length = 2 + int(rng.geometric(1.0 / (spec.mean_length - 2)))
        present = np.zeros(K, dtype=bool)
        seq = []
        for t in range(length):
            if t == 0:
                c = int(rng.choice(roots))
                item = int(rng.choice(members[c]))
            else:
                eligible = np.nonzero(adj[present].any(axis=0))[0] if present.any() else []
                if rng.random() < spec.p and len(eligible):
                    c = int(rng.choice(eligible))
                    item = int(rng.choice(members[c]))
                else:
                    item = int(rng.integers(n_items))
            step = {item}
            if spec.noise > 0 and rng.random() < spec.noise:
                step.add(int(rng.integers(n_items)))
            for it in step:
                present[cluster_of[it]] = True
            seq.append(np.array(sorted(step), dtype=np.int64))
        seqs.append(seq)
    truth = BinaryDag(adj) if not spec.allow_cycles else adj
    return InteractionDataset(users, seqs, items), truth, cluster_of


def gen_features(n_items, d, seed, clusters=None, centroid_scale=3.0, noise_scale=1.0,
                 item_ids=None):
    """Synthetic raw features: per-cluster centroid plus i.i.d. Gaussian noise.

    Without ``clusters`` every item gets plain standard-normal features.
    """
    if d < 1:
        raise UsageError("feature dimension must be >= 1")
    rng = np.random.default_rng(seed)
    if clusters is None:
        raw = rng.standard_normal((n_items, d))
    else:
        clusters = np.asarray(clusters)
        cents = centroid_scale * rng.standard_normal((int(clusters.max()) + 1, d))
        raw = cents[clusters] + noise_scale * rng.standard_normal((n_items, d))
    ids = list(item_ids) if item_ids is not None else [str(k) for k in range(n_items)]
    return ItemFeatures(ids, raw)


def write_assignments(path, item_ids, clusters):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "cluster_id"])
        for item, c in zip(item_ids, clusters):
            w.writerow([item, int(c)])


def read_assignments(path, vocab=None):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["item_id", "cluster_id"]:
        raise ParseError("header must be item_id,cluster_id", 1, path)
    mapping = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise ParseError("expected 2 fields", lineno, path)
        try:
            mapping[row[0]] = int(row[1])
        except ValueError:
            raise ParseError(f"bad cluster id {row[1]!r}", lineno, path) from None
    if vocab is None:
        return mapping
    return np.array([mapping[str(v)] for v in vocab], dtype=np.int64)


def spec_to_json(spec):
    return json.dumps(asdict(spec), indent=2)
