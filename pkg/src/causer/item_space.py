"""Item raw features, the encoder/decoder pair and soft cluster assignment."""
import csv
from dataclasses import dataclass, replace

import numpy as np

from .diffnum import ops
from .errors import DimensionError, ParseError, UsageError


@dataclass
class ItemFeatures:
    """Raw feature rows aligned with ``item_ids``."""

    item_ids: list
    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.ndim != 2 or self.raw.shape[0] != len(self.item_ids):
            raise DimensionError("feature matrix must be (n_items, d) and match item_ids")
        if not np.all(np.isfinite(self.raw)):
            raise UsageError("item features must be finite")

    @property
    def dim(self):
        return self.raw.shape[1]

    def aligned(self, vocab):
        """Rows reordered to follow ``vocab``; every vocab item must be present."""
        pos = {str(i): k for k, i in enumerate(self.item_ids)}
        missing = [v for v in vocab if str(v) not in pos]
        if missing:
            raise UsageError(f"no features for {len(missing)} items, e.g. {missing[:3]}")
        return self.raw[[pos[str(v)] for v in vocab]]


def read_features(path):
    """Parse ``item_id,f0,...,f{d-1}`` CSV."""
    ids, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty feature file", line=1, path=path) from None
        if not header or header[0] != "item_id":
            raise ParseError("header must start with item_id", line=1, path=path)
        d = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise ParseError(f"expected {d + 1} fields, got {len(row)}", line=lineno, path=path)
            try:
                vals = [float(x) for x in row[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite feature value", line=lineno, path=path)
            ids.append(row[0])
            rows.append(vals)
    return ItemFeatures(ids, np.array(rows, dtype=np.float64).reshape(len(ids), d))


def write_features(path, feats):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id"] + [f"f{k}" for k in range(feats.dim)])
        for item, row in zip(feats.item_ids, feats.raw):
            w.writerow([item] + [repr(float(x)) for x in row])


@dataclass
class ClusterModel:
    """Encoder (V1, b1, V2, b2), decoder (V3, b3, V4, b4), cluster centers and
    per-item free assignment logits ``a``. Parameter fields may hold tape
    variables during training."""

    V1: np.ndarray
    b1: np.ndarray
    V2: np.ndarray
    b2: np.ndarray
    V3: np.ndarray
    b3: np.ndarray
    V4: np.ndarray
    b4: np.ndarray
    centers: np.ndarray
    a: np.ndarray
    eta: float = 1.0
    PARAMS = ("V1", "b1", "V2", "b2", "V3", "b3", "V4", "b4", "centers", "a")

    def __post_init__(self):
        if self.eta <= 0:
            raise UsageError("temperature eta must be positive")
        K = ops.value(self.centers).shape[0]
        if K < 2:
            raise UsageError("need at least 2 clusters")
        d1, d = ops.value(self.V1).shape
        d2 = ops.value(self.V2).shape[0]
        d3 = ops.value(self.V3).shape[0]
        shapes = {
            "b1": (d1,), "V2": (d2, d1), "b2": (d2,), "V3": (d3, d2), "b3": (d3,),
            "V4": (d, d3), "b4": (d,),
        }
        for name, shape in shapes.items():
            if ops.value(getattr(self, name)).shape != shape:
                raise DimensionError(f"{name} has shape {ops.value(getattr(self, name)).shape}, expected {shape}")
        if ops.value(self.centers).shape[1] != d2 or ops.value(self.a).shape[1] != K:
            raise DimensionError("centers / assignment logits do not match d2 / K")

    @property
    def k(self):
        return ops.value(self.centers).shape[0]

    @property
    def dims(self):
        d1, d = ops.value(self.V1).shape
        return d, d1, ops.value(self.V2).shape[0], ops.value(self.V3).shape[0]

    def params(self):
        return {p: getattr(self, p) for p in self.PARAMS}

    def with_params(self, **kw):
        return replace(self, **kw)

    @classmethod
    def init(cls, raw, k, rng, d1=64, d2=64, d3=None, eta=1.0, scale=0.1, restarts=10):
        """Weights uniform in [-scale, scale], zero biases, zero logits ``a``,
        centers from k-means over the encoded items (k-means++ seeds, best of
        ``restarts``)."""
        raw = np.asarray(raw, dtype=np.float64)
        n, d = raw.shape
        if n < 1:
            raise UsageError("need at least one item")
        d3 = d1 if d3 is None else d3
        u = lambda *shape: rng.uniform(-scale, scale, size=shape)
        model = cls(
            V1=u(d1, d), b1=np.zeros(d1), V2=u(d2, d1), b2=np.zeros(d2),
            V3=u(d3, d2), b3=np.zeros(d3), V4=u(d, d3), b4=np.zeros(d),
            centers=np.zeros((k, d2)), a=np.zeros((n, k)), eta=eta,
        )
        model.centers = kmeans(encode(raw, model), k, rng, restarts)
        return model


def kmeans_pp_seed(points, k, rng):
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            chosen.append(int(rng.integers(n)))
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, ((points - points[chosen[-1]]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans(points, k, rng, restarts=10, iters=100):
    """Lloyd iterations from k-means++ seeds; lowest inertia over restarts."""
    points = np.asarray(points, dtype=np.float64)
    best, best_inertia = None, np.inf
    for _ in range(max(1, restarts)):
        centers = kmeans_pp_seed(points, k, rng)
        for _ in range(iters):
            d2 = ((points[:, None, :] - centers[None]) ** 2).sum(axis=2)
            label = d2.argmin(axis=1)
            new = np.array([points[label == c].mean(axis=0) if np.any(label == c) else centers[c]
                            for c in range(k)])
            if np.array_equal(new, centers):
                break
            centers = new
        inertia = ((points - centers[label]) ** 2).sum()
        if inertia < best_inertia:
            best, best_inertia = centers, inertia
    return best.copy()


def _affine(x, W, b):
    return ops.add(ops.matmul(x, ops.transpose(W)), b)


def _rows(x):
    xv = ops.value(x)
    if np.ndim(xv) == 1:
        return ops.reshape(x, (1, -1)), True
    return x, False


def encode(raw, model):
    """v* = V2 sigmoid(V1 raw + b1) + b2, for one item or a (n, d) batch."""
    x, single = _rows(raw)
    if ops.value(x).shape[1] != ops.value(model.V1).shape[1]:
        raise DimensionError("raw feature dimension does not match V1")
    out = _affine(ops.sigmoid(_affine(x, model.V1, model.b1)), model.V2, model.b2)
    return ops.reshape(out, (-1,)) if single else out


def decode(v_star, model):
    """v_hat = V4 sigmoid(V3 v* + b3) + b4."""
    x, single = _rows(v_star)
    if ops.value(x).shape[1] != ops.value(model.V3).shape[1]:
        raise DimensionError("embedding dimension does not match V3")
    out = _affine(ops.sigmoid(_affine(x, model.V3, model.b3)), model.V4, model.b4)
    return ops.reshape(out, (-1,)) if single else out


def assign(a, eta):
    """Temperature softmax of the free logits along the last axis."""
    if not eta > 0:
        raise UsageError("temperature eta must be positive")
    return ops.softmax(ops.mul(a, 1.0 / eta), axis=-1)


def assignments(model):
    return assign(model.a, model.eta)


def autoencoder_losses(raw, model):
    """(clustering loss, reconstruction loss), both summed over items."""
    raw_v = np.asarray(ops.value(raw))
    if raw_v.ndim != 2 or raw_v.shape[0] == 0:
        raise UsageError("need a non-empty (n_items, d) feature matrix")
    if ops.value(model.a).shape[0] != raw_v.shape[0]:
        raise DimensionError("assignment logits do not cover every item")
    v_star = encode(raw, model)
    mix = ops.matmul(assignments(model), model.centers)
    cluster = ops.total(ops.square(ops.sub(v_star, mix)))
    recon = ops.total(ops.square(ops.sub(decode(v_star, model), raw)))
    return cluster, recon


def hard_clusters(model):
    """argmax cluster per item."""
    return np.argmax(ops.value(model.a), axis=1)
