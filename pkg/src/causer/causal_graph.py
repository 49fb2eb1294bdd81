"""Cluster-level causal matrix, its item-level projection and graph helpers."""
import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .diffnum import ops
from .errors import DimensionError, UsageError

EXPORT_THRESHOLD = 0.3


@dataclass
class CausalGraph:
    Wc: np.ndarray
    lam: float = 1e-2
    epsilon: float = 0.3

    def __post_init__(self):
        shape = np.shape(ops.value(self.Wc))
        if len(shape) != 2 or shape[0] != shape[1]:
            raise DimensionError(f"Wc must be square, got {shape}")
        if shape[0] < 2:
            raise UsageError("need K >= 2 clusters")
        if self.lam < 0:
            raise UsageError("lambda must be non-negative")
        if not 0 < self.epsilon < 1:
            raise UsageError("epsilon must lie in (0, 1)")

    @property
    def k(self):
        return np.shape(ops.value(self.Wc))[0]

    @classmethod
    def init(cls, k, rng, low=-0.05, high=0.05, lam=1e-2, epsilon=0.3):
        Wc = rng.uniform(low, high, size=(k, k))
        np.fill_diagonal(Wc, 0.0)
        return cls(Wc, lam, epsilon)


@dataclass
class BinaryDag:
    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adjacency)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise DimensionError("adjacency must be square")
        self.adjacency = (adj != 0).astype(np.int8)
        if not is_acyclic(self.adjacency):
            raise UsageError("adjacency contains a directed cycle")

    @property
    def n(self):
        return self.adjacency.shape[0]

    def edges(self):
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.adjacency))]


def item_causal(a_bar, b_bar, Wc):
    a_bar, b_bar, Wc = (np.asarray(x, dtype=np.float64) for x in (a_bar, b_bar, Wc))
    if a_bar.shape != b_bar.shape or Wc.shape != (a_bar.size, a_bar.size):
        raise DimensionError("assignment vectors and Wc disagree on K")
    return float(a_bar @ Wc @ b_bar)


def item_matrix(assign, Wc):
    """W[a, b] = assign[a] . Wc . assign[b]; rows of ``assign`` are the
    per-item cluster distributions. Works on tape variables too."""
    A = ops.value(assign)
    if A is None or np.ndim(A) != 2:
        raise UsageError("every item needs an assignment vector")
    if np.shape(ops.value(Wc)) != (A.shape[1], A.shape[1]):
        raise DimensionError("assignment width does not match Wc")
    if not np.all(np.isfinite(A)):
        raise UsageError("assignment matrix has missing entries")
    return ops.matmul(ops.matmul(assign, Wc), ops.transpose(assign))


def binarize_column(w_col, epsilon):
    return (np.asarray(w_col) > epsilon).astype(np.int8)


def causal_effect(step_items, w_col, epsilon):
    """Total above-threshold causal weight from the items present in a step."""
    w = np.asarray(w_col, dtype=np.float64)
    return float(np.asarray(step_items, dtype=np.float64) @ (w * (w > epsilon)))


def is_acyclic(dag):
    adj = np.ascontiguousarray(np.asarray(dag) != 0)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise DimensionError("adjacency must be square")
    return bool(kernels.acyclic_batch(adj[None].astype(np.int8))[0])


def l1_penalty(Wc):
    return ops.total(ops.absolute(Wc))


def threshold_graph(Wc, threshold=EXPORT_THRESHOLD):
    """0/1 adjacency of entries whose magnitude exceeds ``threshold``."""
    W = np.asarray(ops.value(Wc))
    adj = (np.abs(W) > threshold).astype(np.int8)
    np.fill_diagonal(adj, 0)
    return adj


def export_graph(Wc, threshold=EXPORT_THRESHOLD, labels=None):
    """JSON-ready edge list above the export threshold; ``labels`` switches to
    item-level export with identifiers instead of indices."""
    W = np.asarray(ops.value(Wc))
    adj = threshold_graph(W, threshold)
    name = (lambda i: i) if labels is None else (lambda i: labels[i])
    edges = [{"src": name(int(i)), "dst": name(int(j)), "weight": float(W[i, j])}
             for i, j in zip(*np.nonzero(adj))]
    out = {"k": int(W.shape[0]), "edges": edges}
    if labels is not None:
        out = {"items": [str(x) for x in labels], "edges": edges}
    return out


def write_graph(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


def read_graph(path):
    """Adjacency matrix from a cluster-level graph JSON file."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    adj = np.zeros((doc["k"], doc["k"]), dtype=np.int8)
    for e in doc["edges"]:
        adj[e["src"], e["dst"]] = 1
    return adj
