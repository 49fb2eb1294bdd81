"""Time each hot kernel in its numba and numpy flavours.

    python benchmarks/bench_kernels.py [--repeat 5]

Both flavours are imported side by side, so ``CAUSER_DISABLE_JIT`` does not
matter here. The first numba call is excluded from timing (compilation).
"""
import argparse
import time

import numpy as np

from causer import kernels
from causer.data_io import SyntheticSpec, gen_synthetic
from causer.trainer import build_instances


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def _cases(rng):
    codes = np.arange(2 ** 16, dtype=np.int64)
    pats = ((codes[:, None] >> np.arange(16)) & 1).reshape(-1, 4, 4)
    dense = rng.normal(scale=0.4, size=(2000, 10, 10))
    data, _, _ = gen_synthetic(SyntheticSpec(n_users=2000, seed=0))
    flat = data.flat()
    u, lens, targets, _ = build_instances(data, rng, 4)
    keep = rng.random((data.n_items, data.n_items)) > 0.3
    spans = flat[1][1:] - flat[1][:-1]
    pack_args = (*flat, u, lens, targets, keep, int(spans.max()))
    return [
        ("expm 10x10", lambda k: k(dense[0]), "_expm_nb", "_expm_np"),
        ("dag_penalty_batch 2000x10x10", lambda k: k(dense), "_dag_penalty_batch_nb",
         "_dag_penalty_batch_np"),
        ("dag_penalty_batch 65536x4x4", lambda k: k(pats.astype(float)), "_dag_penalty_batch_nb",
         "_dag_penalty_batch_np"),
        ("acyclic_batch 65536x4x4", lambda k: k(pats.astype(np.int8)), "_acyclic_batch_nb",
         "_acyclic_batch_np"),
        (f"pack_history {len(u)} instances", lambda k: k(*pack_args), "_pack_history_nb",
         "_pack_history_np"),
    ]


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, atol=1e-10)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<36}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  agree")
    for name, call, nb, np_ in _cases(rng):
        f_nb, f_np = getattr(kernels, nb), getattr(kernels, np_)
        call(f_nb)
        t_nb, out_nb = _best(lambda: call(f_nb), args.repeat)
        t_np, out_np = _best(lambda: call(f_np), args.repeat)
        print(f"{name:<36}{t_nb * 1e3:>10.2f}{t_np * 1e3:>10.2f}{t_np / t_nb:>8.1f}x  "
              f"{_same(out_nb, out_np)}")


if __name__ == "__main__":
    main()
