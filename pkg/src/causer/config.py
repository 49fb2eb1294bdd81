"""Flat JSON run configuration shared by every subcommand."""
import json
from dataclasses import asdict, dataclass, field, fields

from .data_io import SyntheticSpec, default_dag
from .errors import UsageError
from .seq_model import CELLS, Ablation
from .trainer import OptimizerState

# published tuning grids; values outside them need allow_out_of_range
TUNING_RANGES = {
    "batch_size": {32, 64, 128, 256, 512, 1024},
    "gamma": {1e-1, 1e-2, 1e-3, 1e-4, 1e-5},
    "d_e": {32, 64, 128, 256},
    "d_h": {32, 64, 128, 256},
    "d1": {32, 64, 128, 256},
    "d2": {32, 64, 128, 256},
    "epsilon": {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9},
    "eta": {1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2, 1e4, 1e6, 1e8},
    "k": set(range(2, 11)) | set(range(20, 101, 10)),
    "lambda": {1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2, 1e4, 1e6, 1e8},
}


@dataclass
class RunConfig:
    # clustering
    k: int = 5
    eta: float = 1e-2
    d1: int = 32
    d2: int = 32
    d3: int = None
    # causal graph
    epsilon: float = 0.3
    # "lambda" in JSON
    lam: float = 1e-2
    wc_init_low: float = 0.4
    wc_init_high: float = 0.6
    # sequence model
    cell_kind: str = "gru"
    d_e: int = 32
    d_h: int = 32
    item_bias: bool = True
    # optimizer
    beta1_init: float = 0.0
    beta2_init: float = 1.0
    kappa1: float = 10.0
    kappa2: float = 0.25
    beta2_max: float = 100.0
    gamma: float = 1e-3
    epochs: int = 6
    inner_iters: int = None
    batch_size: int = 128
    negatives: int = 4
    lagrangian: str = "epoch"
    constrained: bool = True
    slow_every: int = None
    warmup_iters: int = 300
    threads: int = 1
    seed: int = 0
    # ablations
    no_clus: bool = False
    no_rec: bool = False
    no_att: bool = False
    no_causal: bool = False
    no_filter: bool = False
    # synthetic data
    dag: list = field(default_factory=lambda: default_dag().tolist())
    items_per_cluster: int = 10
    p: float = 0.8
    noise: float = 0.1
    mean_length: float = 8.0
    n_users: int = 2000
    allow_cycles: bool = False
    feature_dim: int = 16
    centroid_scale: float = 1.0
    feature_noise: float = 0.0
    # evaluation
    z: int = 5
    allow_out_of_range: bool = False

    def __post_init__(self):
        if self.cell_kind not in CELLS:
            raise UsageError(f"cell_kind must be one of {sorted(CELLS)}")
        if self.k < 2:
            raise UsageError("k must be >= 2")
        if not 0 < self.epsilon < 1:
            raise UsageError("epsilon must lie in (0, 1)")
        if self.eta <= 0:
            raise UsageError("eta must be positive")
        if self.z < 1:
            raise UsageError("z must be >= 1")
        if self.wc_init_low > self.wc_init_high:
            raise UsageError("wc_init_low exceeds wc_init_high")
        if not self.allow_out_of_range:
            for key, grid in TUNING_RANGES.items():
                v = self.get(key)
                if v is not None and not any(abs(v - g) <= 1e-12 * max(1.0, abs(g)) for g in grid):
                    raise UsageError(f"{key}={v} is outside the tuning grid; "
                                     "set allow_out_of_range to override")
        self.optimizer()
        self.synthetic()

    def get(self, key):
        return self.lam if key == "lambda" else getattr(self, key)

    @property
    def ablation(self):
        return Ablation(self.no_clus, self.no_rec, self.no_att, self.no_causal, self.no_filter)

    def optimizer(self):
        return OptimizerState(
            beta1=self.beta1_init, beta2=self.beta2_init, kappa1=self.kappa1, kappa2=self.kappa2,
            beta2_max=self.beta2_max,
            gamma=self.gamma, epochs=self.epochs, inner_iters=self.inner_iters, lam=self.lam,
            epsilon=self.epsilon, negatives=self.negatives, batch_size=self.batch_size,
            seed=self.seed, lagrangian=self.lagrangian, constrained=self.constrained,
            slow_every=self.slow_every, threads=self.threads, warmup_iters=self.warmup_iters)

    def synthetic(self):
        return SyntheticSpec(dag=self.dag, items_per_cluster=self.items_per_cluster, p=self.p,
                             noise=self.noise, mean_length=self.mean_length,
                             n_users=self.n_users, seed=self.seed,
                             allow_cycles=self.allow_cycles)

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return RunConfig.from_dict(d)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return RunConfig.from_dict(doc)


def dump_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
