"""JSON checkpoints: every parameter tensor under a named key with its shape."""
import json

import numpy as np

from .causal_graph import CausalGraph
from .errors import ParseError
from .item_space import ClusterModel
from .seq_model import Ablation, SeqModel
from .trainer import ModelStack

VERSION = 1


def _tensor(x):
    x = np.asarray(x, dtype=np.float64)
    return {"shape": list(x.shape), "data": x.ravel().tolist()}


def _array(entry, name, path):
    try:
        shape = tuple(int(s) for s in entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"tensor {name!r} is malformed ({exc})", path=path) from None
    if data.size != int(np.prod(shape)):
        raise ParseError(f"tensor {name!r}: {data.size} values for shape {shape}", path=path)
    return data.reshape(shape)


def to_document(stack, meta=None):
    tensors = {k: _tensor(v) for k, v in stack.param_groups().items()}
    tensors["features"] = _tensor(stack.features)
    return {
        "version": VERSION,
        "cell_kind": stack.seq.cell_kind,
        "eta": stack.cluster.eta,
        "lambda": stack.graph.lam,
        "epsilon": stack.graph.epsilon,
        "ablation": {k: bool(v) for k, v in stack.ablation.__dict__.items()},
        "meta": meta or {},
        "tensors": tensors,
    }


def from_document(doc, path=None):
    if not isinstance(doc, dict) or "version" not in doc:
        raise ParseError("checkpoint has no version field", path=path)
    if doc["version"] != VERSION:
        raise ParseError(f"unsupported checkpoint version {doc['version']}", path=path)
    t = {k: _array(v, k, path) for k, v in doc["tensors"].items()}
    cluster = ClusterModel(**{p: t[f"a.{p}"] for p in ClusterModel.PARAMS}, eta=doc["eta"])
    graph = CausalGraph(t["Wc"], lam=doc["lambda"], epsilon=doc["epsilon"])
    seq = SeqModel(doc["cell_kind"], {k[2:]: v for k, v in t.items() if k.startswith("g.")})
    return ModelStack(cluster, graph, seq, t["features"], Ablation(**doc["ablation"]))


def save(path, stack, meta=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_document(stack, meta), fh)


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc})", path=path) from None
    return from_document(doc, path), doc.get("meta", {})
