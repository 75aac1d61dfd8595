"""Compare the numba and numpy implementations of the selection kernels.

    python3 benchmarks/bench_kernels.py [--n-target 150] [--n-aux 250] [--L 20] [--repeat 3]

Prints median wall time per call for each kernel and backend, the speed-up,
and the largest absolute difference between the two backends' outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from rsate import kernels
from rsate.csb import CsbConfig, KernelInputs, bootstrap_plan
from rsate.conformal import effective_folds, fold_labels
from rsate.estimators import DesignPropensity
from rsate.sim import DgpConfig, generate_trial


def _time(fn, repeat: int) -> tuple[float, object]:
    out, times = None, []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), out


def _maxdiff(a, b) -> float:
    if isinstance(a, tuple):
        return max(_maxdiff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-target", type=int, default=150)
    ap.add_argument("--n-aux", type=int, default=250)
    ap.add_argument("--L", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    trial = generate_trial(DgpConfig(n_target=args.n_target, n_aux=args.n_aux), args.seed)
    inp = KernelInputs.build(trial.dataset, DesignPropensity())
    cfg = CsbConfig(L=args.L)
    R, A = inp.R, inp.A
    K = {a: effective_folds(int(np.sum(R & (A == a))), cfg.K)[0] for a in (0, 1)}
    f0 = fold_labels(int(np.sum(R & (A == 0))), K[0], args.seed, 0)
    f1 = fold_labels(int(np.sum(R & (A == 1))), K[1], args.seed, 1)
    grid = np.asarray(cfg.grid)
    ident = np.arange(R.shape[0], dtype=np.int64)
    rows, b0, b1 = bootstrap_plan(inp.strata, A, R, cfg.L, K[0], K[1], args.seed)
    common = (cfg.use_u, cfg.clip_eps, cfg.max_iter, cfg.tol)

    calls = {
        "resample_thetas": lambda impl: impl["resample_thetas"](
            inp.Z, inp.V, R, A, inp.Y, inp.g_t, inp.g_a, ident, f0, f1, K[0], K[1], grid, *common),
        "bootstrap_thetas": lambda impl: impl["bootstrap_thetas"](
            inp.Z, inp.V, R, A, inp.Y, inp.g_t, inp.g_a, rows, b0, b1, K[0], K[1], grid, *common),
    }
    # compile outside the timed region
    for fn in calls.values():
        fn(kernels.IMPLEMENTATIONS["numba"])

    print(f"n_target={args.n_target} n_aux={args.n_aux} L={args.L} repeat={args.repeat}")
    print(f"{'kernel':<18}{'numba ms':>12}{'numpy ms':>12}{'speed-up':>10}{'max |diff|':>14}")
    for name, fn in calls.items():
        t_nb, out_nb = _time(lambda: fn(kernels.IMPLEMENTATIONS["numba"]), args.repeat)
        t_np, out_np = _time(lambda: fn(kernels.IMPLEMENTATIONS["numpy"]), args.repeat)
        print(f"{name:<18}{1e3 * t_nb:>12.2f}{1e3 * t_np:>12.2f}{t_np / t_nb:>10.1f}"
              f"{_maxdiff(out_nb, out_np):>14.2e}")


if __name__ == "__main__":
    main()
