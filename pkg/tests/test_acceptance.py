"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The Monte Carlo criteria (3, 4, 5, 6, 8) are expensive on a single core.
Their results are cached in ``tests/.acceptance_cache`` under a key hashing
the package sources (CLI excluded) and the criterion's settings, so a cached
result is reused only while neither has changed.  Fill the cache with::

    python3 tests/test_acceptance.py 3 4 5 6 8

Without a cache entry the test computes the criterion in full.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pytest

from rsate import kernels
from rsate.cli import main as cli_main
from rsate.conformal import conformal_pvalues, conformal_scores, cvplus_pvalues, fold_labels
from rsate.csb import CsbConfig, KernelInputs, estimate_csb_ivw
from rsate.data import CovariateSchema, StudyDataset, save_dataset
from rsate.estimators import (DesignPropensity, augmentation_decomposition,
                              estimate_fb_ivw, estimate_nb_allcov)
from rsate.frt import DimStatistic, frt_pvalue
from rsate.models import fit_linear, fit_logistic, log_likelihood
from rsate.multiregion import (RegionCovariateMap, estimate_fb_ivw_multi,
                               estimate_fb_ivw_region, influence_covariance,
                               optimal_weights)
from rsate.sim import (DgpConfig, FrtSettings, MethodSpec, MultiRegionConfig,
                       generate_multiregion_trial, generate_trial,
                       multiregion_true_rsate, run_replications)

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(__file__).resolve().parent / ".acceptance_cache"
DESIGN = DesignPropensity()
DESK = dict(n_target=150, n_aux=250)

# Settings of the Monte Carlo criteria; part of the cache key.
SETTINGS = {
    3: {"b0": [2.0, 4.0, 6.0, 8.0], "eps": 0.5, "n_rep": 300, "B": 500, "L": 20, "seed": 3003,
        "alpha": 0.05, **DESK},
    4: {"alpha0": 0.1, "eps": 0.5, "rho": 0.5, "n_rep": 200, "L": 100, "seed": 4004, **DESK},
    5: {"tau": [0.25, 0.5], "b0": [2.0, 8.0], "n_rep": 200, "B": 200, "L": 20, "seed": 5005,
        "alpha": 0.05, **DESK},
    6: {"n_rep": 500, "n_target": 600, "n_aux": 1000, "rho": 0.0, "seed": 6006},
    8: {"n_rep": 300, "seed": 8008, "n_spd": 100},
}


@dataclass
class Outcome:
    criterion: int
    passed: bool
    summary: str
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0
    cached: bool = False


RESULTS: dict[int, Outcome] = {}


def _source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted((ROOT / "src" / "rsate").glob("*.py")):
        if p.name in ("cli.py", "__main__.py"):
            continue
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _cache_path(k: int) -> Path:
    key = hashlib.sha256((_source_hash() + json.dumps(SETTINGS[k], sort_keys=True)).encode())
    return CACHE / f"criterion{k}_{key.hexdigest()[:16]}.json"


def _report(out: Outcome) -> Outcome:
    RESULTS[out.criterion] = out
    tag = "PASS" if out.passed else "FAIL"
    src = " (cached)" if out.cached else ""
    print(f"criterion {out.criterion}: {tag} {out.summary} [{out.seconds:.1f}s{src}]")
    return out


def _timed(k: int, fn) -> Outcome:
    t0 = time.perf_counter()
    out = fn()
    out.seconds = time.perf_counter() - t0
    return out


def _cached(k: int, fn) -> Outcome:
    path = _cache_path(k)
    if path.exists():
        d = json.loads(path.read_text())
        return Outcome(**{**d, "cached": True})
    out = _timed(k, fn)
    CACHE.mkdir(exist_ok=True)
    path.write_text(json.dumps(asdict(out), sort_keys=True, indent=2))
    return out


# ---------------------------------------------------------------------------
# criterion computations
# ---------------------------------------------------------------------------


def _kernel_endpoints(ds: StudyDataset, seed: int) -> np.ndarray:
    """Grid estimates at thresholds 0 and 1 through the compiled kernel route."""
    inp = KernelInputs.build(ds, DESIGN)
    cfg = CsbConfig()
    m = [int(np.sum(inp.R & (inp.A == a))) for a in (0, 1)]
    theta, _, _ = kernels.resample_thetas(
        inp.Z, inp.V, inp.R, inp.A, inp.Y, inp.g_t, inp.g_a, np.arange(ds.n, dtype=np.int64),
        fold_labels(m[0], 10, seed, 0), fold_labels(m[1], 10, seed, 1), 10, 10,
        np.array([0.0, 1.0]), True, cfg.clip_eps, cfg.max_iter, cfg.tol)
    return theta


def criterion1() -> Outcome:
    public = kernel = 0.0
    for seed in range(20):
        ds = generate_trial(DgpConfig(**DESK), 100 + seed).dataset
        pv = conformal_pvalues(ds, seed=seed)
        fb, nb = estimate_fb_ivw(ds), estimate_nb_allcov(ds)
        full = estimate_csb_ivw(ds, DESIGN, pv, 0.0, 0.0).tau_hat
        none = estimate_csb_ivw(ds, DESIGN, pv, 1.0, 1.0).tau_hat
        public = max(public, abs(full - fb.tau_hat), abs(none - nb.tau_hat))
        th = _kernel_endpoints(ds, seed)
        kernel = max(kernel, abs(th[1, 0] - th[0, 0] - fb.tau_hat),
                     abs(th[1, 1] - th[0, 1] - nb.tau_hat))
    worst = max(public, kernel)
    return Outcome(1, worst <= 1e-8, f"max collapse gap {public:.2e} (public route), "
                                     f"{kernel:.2e} (kernel route), tol 1e-8",
                   {"public_gap": public, "kernel_gap": kernel})


def _tiny_trial(rng: np.random.Generator) -> StudyDataset:
    m = int(rng.integers(3, 7))
    n_aux = int(rng.integers(2, 6))
    a_t = np.zeros(m, dtype=np.int64)
    a_t[rng.permutation(m)[: int(rng.integers(1, m))]] = 1
    n = m + n_aux
    return StudyDataset.from_arrays(
        np.r_[np.ones(m, dtype=np.int64), np.zeros(n_aux, dtype=np.int64)],
        np.r_[a_t, rng.integers(0, 2, n_aux)],
        rng.normal(size=n).round(int(rng.integers(0, 3))),
        rng.normal(size=(n, 1)), None, schema=CovariateSchema(shared_names=("X1",)))


def _brute_force(ds: StudyDataset) -> tuple[float, float]:
    tgt = np.flatnonzero(ds.is_target)
    y, z_obs = ds.outcome[tgt], ds.treatment[tgt]

    def dim(z):
        return y[z == 1].mean() - y[z == 0].mean()

    t_obs = dim(z_obs)
    two = one = total = 0
    for ones in itertools.combinations(range(tgt.size), int(z_obs.sum())):
        z = np.zeros(tgt.size, dtype=np.int64)
        z[list(ones)] = 1
        t = dim(z)
        two += abs(t) >= abs(t_obs)
        one += t >= t_obs
        total += 1
    return two / total, one / total


def criterion2() -> Outcome:
    rng = np.random.default_rng(2002)
    mismatches = 0
    for _ in range(50):
        ds = _tiny_trial(rng)
        res = frt_pvalue(ds, DimStatistic(), exhaustive=True)
        if (res.p_two_sided, res.p_one_sided) != _brute_force(ds):
            mismatches += 1
    return Outcome(2, mismatches == 0, f"{mismatches} of 50 instances differ from brute force",
                   {"mismatches": mismatches})


def criterion3() -> Outcome:
    s = SETTINGS[3]
    grid = [DgpConfig(n_target=s["n_target"], n_aux=s["n_aux"], eps=s["eps"], b0=b,
                      bias_arms="control-only", constant_effect=0.0) for b in s["b0"]]
    table = run_replications(grid, [MethodSpec("CSB-IVW", CsbConfig(L=s["L"]))], s["n_rep"],
                             frt=FrtSettings(B=s["B"], alpha=s["alpha"]), seed=s["seed"],
                             n_mc=1000, scenario_labels=[{"b0": b} for b in s["b0"]])
    bound = s["alpha"] + 2 * math.sqrt(s["alpha"] * (1 - s["alpha"]) / s["n_rep"])
    rates = {str(b): table.get("CSB-IVW", b0=b).frt_rejection for b in s["b0"]}
    ok = all(r <= bound for r in rates.values())
    txt = ", ".join(f"b0={b}: {r:.3f}" for b, r in rates.items())
    return Outcome(3, ok, f"FRT rejection {txt} (bound {bound:.3f})", {"rates": rates, "bound": bound})


def criterion4() -> Outcome:
    s = SETTINGS[4]
    dgp = DgpConfig(n_target=s["n_target"], n_aux=s["n_aux"], alpha0=s["alpha0"], eps=s["eps"],
                    rho=s["rho"], covariate_scenario="correlated")
    methods = [MethodSpec("NB-AllCov"), MethodSpec("FB-IVW"),
               MethodSpec("CSB-IVW", CsbConfig(L=s["L"]))]
    table = run_replications([dgp], methods, s["n_rep"], seed=s["seed"])
    csb, fb = table.get("CSB-IVW").mse_pct, table.get("FB-IVW").mse_pct
    ok = csb < 95.0 and csb < fb
    return Outcome(4, ok, f"MSE% CSB-IVW {csb:.1f} vs FB-IVW {fb:.1f} (need CSB < 95 and < FB)",
                   {"csb_mse_pct": csb, "fb_mse_pct": fb})


def criterion5() -> Outcome:
    s = SETTINGS[5]
    grid, labels = [], []
    for tau in s["tau"]:
        for b in s["b0"]:
            grid.append(DgpConfig(n_target=s["n_target"], n_aux=s["n_aux"], b0=b,
                                  bias_arms="control-only", constant_effect=tau))
            labels.append({"tau": tau, "b0": b})
    methods = [MethodSpec("NB-AllCov"), MethodSpec("FB-IVW"),
               MethodSpec("CSB-IVW", CsbConfig(L=s["L"]))]
    table = run_replications(grid, methods, s["n_rep"], frt=FrtSettings(B=s["B"], alpha=s["alpha"]),
                             seed=s["seed"], n_mc=1000, scenario_labels=labels)
    power, ok, worst = {}, True, max(s["b0"])
    for lab in labels:
        p = {m: table.get(m, **lab).frt_rejection for m in ("NB-AllCov", "FB-IVW", "CSB-IVW")}
        power[f"tau={lab['tau']},b0={lab['b0']}"] = p
        ok &= p["CSB-IVW"] >= p["NB-AllCov"] - 0.03
        if lab["b0"] == worst:
            ok &= p["CSB-IVW"] >= p["FB-IVW"]
    txt = "; ".join(f"{k}: CSB {v['CSB-IVW']:.3f} NB {v['NB-AllCov']:.3f} FB {v['FB-IVW']:.3f}"
                    for k, v in power.items())
    return Outcome(5, ok, f"FRT power {txt}", {"power": power})


def criterion6() -> Outcome:
    s = SETTINGS[6]
    dgp = DgpConfig(n_target=s["n_target"], n_aux=s["n_aux"], rho=s["rho"])
    names = ("NB-AllCov", "FB-Xonly", "FB-IVW")
    table = run_replications([dgp], [MethodSpec(m) for m in names], s["n_rep"], seed=s["seed"])
    cov = {m: table.get(m).coverage for m in names}
    ok = all(0.925 <= c <= 0.975 for c in cov.values())
    txt = ", ".join(f"{m} {c:.3f}" for m, c in cov.items())
    return Outcome(6, ok, f"coverage {txt} (need [0.925, 0.975])", {"coverage": cov})


def criterion7() -> Outcome:
    """Auxiliary rows drawn from the same law as the target arm, so scores
    are exchangeable; 2000 independent datasets, one auxiliary row each."""
    rng = np.random.default_rng(7007)
    levels = (0.1, 0.2, 0.5)
    pv = []
    for rep in range(2000):
        m, n_aux = 30, 1
        n = m + n_aux
        x = rng.normal(size=(n, 1))
        y = 1.0 + x[:, 0] + rng.normal(size=n)
        ds = StudyDataset.from_arrays(np.r_[np.ones(m, dtype=np.int64), np.zeros(n_aux, dtype=np.int64)],
                                      np.zeros(n, dtype=np.int64), y, x, None,
                                      schema=CovariateSchema(shared_names=("X1",)))
        pv.extend(cvplus_pvalues(conformal_scores(ds, 0, K=5, seed=rep)).values())
    pv = np.asarray(pv)
    rates = {str(a): float(np.mean(pv <= a)) for a in levels}
    ok = all(rates[str(a)] <= a + 0.02 for a in levels)
    txt = ", ".join(f"P(p<={a})={rates[str(a)]:.3f}" for a in levels)
    return Outcome(7, ok, f"{txt} (need <= alpha + 0.02)", {"rates": rates})


def _two_by_two(S: np.ndarray) -> np.ndarray:
    a, b, c = S[0, 0], S[0, 1], S[1, 1]
    d1 = (c - b) / (a + c - 2 * b)
    return np.array([d1, 1 - d1])


def criterion8() -> Outcome:
    s = SETTINGS[8]
    cfg = MultiRegionConfig()
    mapping = RegionCovariateMap(cfg.shared)
    comb, single = [], {r: [] for r in mapping.labels}
    for rep in range(s["n_rep"]):
        ds = generate_multiregion_trial(cfg, (s["seed"], rep)).dataset
        comb.append(estimate_fb_ivw_multi(ds, DESIGN, mapping).tau_hat)
        for r in mapping.labels:
            single[r].append(estimate_fb_ivw_region(ds, DESIGN, r, cfg.shared[r])[0].tau_hat)
    v_comb = float(np.var(comb, ddof=1))
    v_single = {str(r): float(np.var(v, ddof=1)) for r, v in single.items()}
    ratio = v_comb / min(v_single.values())
    rng = np.random.default_rng(s["seed"])
    gap = 0.0
    for _ in range(s["n_spd"]):
        M = rng.normal(size=(2, 2))
        S = M @ M.T + 0.05 * np.eye(2)
        gap = max(gap, float(np.max(np.abs(optimal_weights(S)[0] - _two_by_two(S)))))
    truth, _ = multiregion_true_rsate(cfg, 200_000)
    ok = ratio <= 1.05 and gap <= 1e-8
    return Outcome(8, ok, f"variance ratio {ratio:.3f} (need <= 1.05), 2x2 weight gap {gap:.1e}",
                   {"ratio": ratio, "v_comb": v_comb, "v_single": v_single, "weight_gap": gap,
                    "bias_comb": float(np.mean(comb) - truth)})


def criterion9() -> Outcome:
    rng = np.random.default_rng(9009)
    X = rng.normal(size=(80, 3))
    y = X @ [1.0, -2.0, 0.5] + 0.3 + rng.normal(size=80)
    Z = np.column_stack([np.ones(80), X])
    lin_gap = float(np.max(np.abs(fit_linear(X, y).coefficients - np.linalg.solve(Z.T @ Z, Z.T @ y))))

    Xl = rng.normal(size=(300, 2))
    yl = (rng.random(300) < 1 / (1 + np.exp(-(0.3 + Xl @ [1.0, -0.7])))).astype(float)
    fit = fit_logistic(Xl, yl)
    best = log_likelihood(fit, Xl, yl)
    beats = 0
    for d in itertools.product(np.linspace(-0.3, 0.3, 13), repeat=3):
        beats += log_likelihood(fit.coefficients + np.array(d), Xl, yl) > best + 1e-9

    ds = generate_trial(DgpConfig(**DESK, rho=0.3), 9).dataset
    est = estimate_fb_ivw(ds)
    dec_gap = max(abs(sum(augmentation_decomposition(ds, DESIGN, a)) - th.theta_hat)
                  for a, th in ((0, est.theta0), (1, est.theta1)))

    _, psi = estimate_fb_ivw_region(ds, DESIGN, 0, ("X1", "X2"))
    cov_gap = abs(influence_covariance([psi], ds.n)[0, 0] / ds.n - est.se**2) / est.se**2

    ok = lin_gap <= 1e-8 and beats == 0 and dec_gap <= 1e-10 and cov_gap <= 1e-8
    return Outcome(9, ok, f"linear gap {lin_gap:.1e}, grid points beating optimum {beats}, "
                          f"decomposition gap {dec_gap:.1e}, covariance rel. gap {cov_gap:.1e}",
                   {"linear": lin_gap, "grid_beats": int(beats), "decomposition": dec_gap,
                    "covariance": cov_gap})


def criterion10(tmp: Path) -> Outcome:
    data = tmp / "trial.csv"
    save_dataset(generate_trial(DgpConfig(n_target=80, n_aux=120), 10).dataset, data)
    base = {"seed": 10, "data": {"path": str(data), "schema": {"shared": ["X1", "X2"],
                                                              "target_only": ["U"]}},
            "csb": {"L": 4},
            "frt": {"B": 8, "statistics": ["CSB-IVW", "FB-IVW"]},
            "simulation": {"base": {"n_target": 40, "n_aux": 50}, "n_rep": 2, "n_mc": 500,
                           "methods": ["NB-AllCov", "CSB-IVW"], "frt": {"B": 3}}}
    cfg = tmp / "run.json"
    cfg.write_text(json.dumps(base))
    files = {"estimate": ["estimate.json", "pvalues.csv"], "frt": ["frt.json"],
             "pvalues": ["pvalues.csv"], "match": ["matched.csv"], "simulate": ["metrics.csv"]}
    differing = []
    for cmd, outs in files.items():
        runs = []
        for k, workers in enumerate((1, 1, 2)):
            out = tmp / f"{cmd}{k}"
            code = cli_main([cmd, "--config", str(cfg), "--out", str(out), "--workers", str(workers)])
            if code != 0:
                differing.append(f"{cmd} exit {code}")
            runs.append({f: (out / f).read_bytes() for f in outs if (out / f).exists()})
        if not (runs[0] == runs[1] == runs[2]) or len(runs[0]) != len(outs):
            differing.append(cmd)
    return Outcome(10, not differing,
                   f"{len(files) - len(set(d.split()[0] for d in differing))} of {len(files)} "
                   f"commands byte-identical across reruns and worker counts",
                   {"differing": differing})


CRITERIA = {1: criterion1, 2: criterion2, 3: criterion3, 4: criterion4, 5: criterion5,
            6: criterion6, 7: criterion7, 8: criterion8, 9: criterion9}


# ---------------------------------------------------------------------------
# tests
# ---------------------------------------------------------------------------


class TestAcceptance:
    @pytest.mark.parametrize("k", [1, 2, 7, 9])
    def test_live_criterion(self, k):
        out = _report(_timed(k, CRITERIA[k]))
        assert out.passed, out.summary

    @pytest.mark.slow
    @pytest.mark.parametrize("k", [3, 4, 5, 6, 8])
    def test_monte_carlo_criterion(self, k):
        out = _report(_cached(k, CRITERIA[k]))
        assert out.passed, out.summary

    def test_determinism(self, tmp_path):
        out = _report(_timed(10, lambda: criterion10(tmp_path)))
        assert out.passed, out.summary


if __name__ == "__main__":
    for arg in sys.argv[1:] or [3, 4, 5, 6, 8]:
        k = int(arg)
        _report(_cached(k, CRITERIA[k]))
        sys.stdout.flush()
