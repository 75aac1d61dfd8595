"""Conformal selective borrowing: the CSB estimator at fixed thresholds and
the bootstrap MSE criterion that picks a threshold per arm.

Two routes compute CSB arm estimates.  :func:`estimate_csb_ivw` builds them
from the public model-fitting functions and returns full variance output;
the compiled kernels in :mod:`rsate.kernels` evaluate the whole threshold
grid for every bootstrap resample.  The tests hold the two routes to each
other.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from rsate import kernels
from rsate.conformal import (DEFAULT_K, PValueTable, conformal_pvalues,
                             effective_folds, fold_labels)
from rsate.data import StudyDataset
from rsate.estimators import (DesignPropensity, _features, _require_arms,
                              _target_arm, _target_design, aipw_terms,
                              assemble_tau, fb_weight, fit_sampling_model,
                              ivw_weights, nb_arm_terms)
from rsate.models import (CLIP_EPS, MAX_ITER, TOL, PreconditionError,
                          balanced_folds, fit_linear, fit_logistic, predict)
from rsate.results import TauEstimate
from rsate.seeds import STAGE_BOOT, SeedLike, as_path, rng_for

DEFAULT_GRID = tuple(round(0.1 * k, 10) for k in range(11))
DEFAULT_L = 100


@dataclass(frozen=True)
class CsbConfig:
    K: int = DEFAULT_K
    grid: tuple[float, ...] = DEFAULT_GRID
    L: int = DEFAULT_L
    use_u: bool = True
    clip_eps: float = CLIP_EPS
    max_iter: int = MAX_ITER
    tol: float = TOL
    alpha: float = 0.05

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        object.__setattr__(self, "grid", tuple(float(v) for v in g))
        if g.size == 0 or np.any(np.diff(g) <= 0) or g[0] < 0 or g[-1] > 1:
            raise ValueError("grid must be strictly increasing within [0, 1]")
        if self.L < 2:
            raise ValueError("L must be at least 2")
        if self.K < 2:
            raise ValueError("K must be at least 2")

    @property
    def method(self) -> str:
        return "CSB-IVW" if self.use_u else "CSB-Xonly"

    def to_dict(self) -> dict:
        return {"K": self.K, "grid": list(self.grid), "L": self.L, "use_u": self.use_u,
                "clip_eps": self.clip_eps, "max_iter": self.max_iter, "tol": self.tol,
                "alpha": self.alpha}


@dataclass(frozen=True)
class SelectedSet:
    arm: int
    gamma: float
    indices: tuple[int, ...]


def select_set(pvalues: PValueTable, arm: int, gamma: float) -> SelectedSet:
    """Auxiliary records of ``arm`` with ``p >= gamma``.

    ``gamma >= 1`` selects nothing, so the top of the grid is always the
    no-borrowing estimator even when some auxiliary p-values equal one.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if gamma >= 1.0:
        return SelectedSet(arm, float(gamma), ())
    idx = sorted(j for j, p in pvalues.p_of[arm].items() if p >= gamma)
    return SelectedSet(arm, float(gamma), tuple(idx))


def _csb_arm(dataset: StudyDataset, design: DesignPropensity, arm: int,
             selected: Sequence[int], pi: NDArray, use_u: bool,
             columns: Optional[Sequence[str]], clip_eps: float,
             flags: list[str]) -> tuple[NDArray, dict]:
    if len(selected) == 0:
        flags.append(f"arm{arm}_no_borrowing")
        return nb_arm_terms(dataset, design, arm, use_u, columns), {"w_nb": None}
    tgt = dataset.is_target
    X = _features(dataset, columns)
    rows_nb = _target_arm(dataset, arm)
    aux_arm = ~tgt & (dataset.treatment == arm)
    sel = np.zeros(dataset.n, dtype=bool)
    sel[np.asarray(selected, dtype=np.int64)] = True
    if np.any(sel & ~aux_arm):
        raise PreconditionError("selected records must be auxiliary records of the arm")
    pooled = rows_nb | sel
    fb_fit = fit_linear(X[pooled], dataset.outcome[pooled])
    mu_fb = predict(fb_fit, X)
    if use_u:
        F = _target_design(dataset, columns)
        nb_fit = fit_linear(F[rows_nb], dataset.outcome[rows_nb])
        mu_nb = np.where(tgt, predict(nb_fit, F), 0.0)
        v_nb = float(np.mean((dataset.outcome[rows_nb] - mu_nb[rows_nb]) ** 2))
        v_fb = float(np.mean((dataset.outcome[pooled] - mu_fb[pooled]) ** 2))
        w_nb, w_fb = ivw_weights(v_nb, v_fb)
        y_hat = np.where(tgt, w_nb * mu_nb + w_fb * mu_fb, mu_fb)
    else:
        w_nb = 0.0
        y_hat = mu_fb
    if sel.sum() == aux_arm.sum():
        q = None
    else:
        qfit = fit_logistic(X[aux_arm], sel[aux_arm].astype(float), clip_eps=clip_eps)
        q = predict(qfit, X)
        if not qfit.converged:
            flags.append(f"arm{arm}_selection_model_not_converged")
    g_t, g_a = design.split(dataset)
    w = fb_weight(pi, g_t, g_a, arm, q)
    return aipw_terms(dataset, arm, y_hat, w, pooled), {"w_nb": w_nb}


def estimate_csb_ivw(dataset: StudyDataset, design: DesignPropensity,
                     pvalues: PValueTable, gamma0: float, gamma1: float,
                     use_u: bool = True, alpha: float = 0.05,
                     columns: Optional[Sequence[str]] = None,
                     clip_eps: float = CLIP_EPS) -> TauEstimate:
    """CSB estimate at fixed per-arm thresholds.

    Each arm pools the target arm with its selected auxiliary records for the
    shared-covariate outcome model.  Auxiliary records are reweighted by
    ``pi / (pi e_{a|1} + (1 - pi) e_{a|0} q)``, where ``pi`` is the
    full-sample sampling model and ``q(X)`` the probability that an
    auxiliary arm-``a`` record is selected.  At ``gamma = 0`` this is the
    full-borrowing estimator; with nothing selected the arm falls back to
    the target-only estimator.
    """
    _require_arms(dataset)
    flags: list[str] = []
    sm = fit_sampling_model(dataset, columns, clip_eps)
    flags.extend(sm.flags)
    sets = {0: select_set(pvalues, 0, gamma0), 1: select_set(pvalues, 1, gamma1)}
    terms, info = {}, {}
    for a in (0, 1):
        terms[a], info[a] = _csb_arm(dataset, design, a, sets[a].indices, sm.pi,
                                     use_u, columns, clip_eps, flags)
    return assemble_tau(
        "CSB-IVW" if use_u else "CSB-Xonly", dataset, terms[1], terms[0], alpha,
        flags=flags, borrowed_indices={a: sets[a].indices for a in (0, 1)},
        gamma={0: float(gamma0), 1: float(gamma1)},
        extras={"ivw_w_nb": {str(a): info[a]["w_nb"] for a in (0, 1)}})


# ---------------------------------------------------------------------------
# threshold selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MseCurve:
    arm: int
    grid: NDArray
    mse_hat: NDArray
    sq_diff: NDArray
    var_diff: NDArray
    var_csb: NDArray
    theta: NDArray
    theta_nb: float
    L: int
    seed: tuple[int, ...] = ()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "gamma", "mse_hat", "sq_diff", "var_diff", "var_csb", "theta"])
        for k in range(self.grid.shape[0]):
            w.writerow([self.arm, repr(float(self.grid[k]))] +
                       [repr(float(v[k])) for v in (self.mse_hat, self.sq_diff,
                                                     self.var_diff, self.var_csb, self.theta)])
        return buf.getvalue()


def mse_from_draws(arm: int, grid: NDArray, theta: NDArray, theta_nb: float,
                   boot_theta: NDArray, boot_nb: NDArray,
                   seed: tuple[int, ...] = ()) -> MseCurve:
    """Bootstrap MSE criterion.

    ``theta`` holds the grid estimates on the original data and
    ``boot_theta`` (``L x G``) the same on paired resamples, with
    ``boot_nb`` the no-borrowing estimate on each resample.
    """
    grid = np.asarray(grid, dtype=float)
    boot_theta = np.asarray(boot_theta, dtype=float)
    L = boot_theta.shape[0]
    sq = (theta - theta_nb) ** 2
    var_diff = np.var(boot_theta - boot_nb[:, None], axis=0, ddof=1)
    var_csb = np.var(boot_theta, axis=0, ddof=1)
    mse = sq - var_diff + var_csb
    top = grid >= 1.0
    nb_var = float(np.var(boot_nb, ddof=1))
    mse = np.where(top, nb_var, mse)
    sq = np.where(top, 0.0, sq)
    var_diff = np.where(top, 0.0, var_diff)
    var_csb = np.where(top, nb_var, var_csb)
    return MseCurve(arm, grid, mse, sq, var_diff, var_csb, np.asarray(theta, dtype=float),
                    float(theta_nb), L, seed)


def choose_threshold(curve: MseCurve) -> float:
    """Grid point of minimal estimated MSE, ties to the larger threshold."""
    if curve.mse_hat.size == 0:
        raise ValueError("empty curve")
    best = np.flatnonzero(curve.mse_hat == curve.mse_hat.min())[-1]
    return float(curve.grid[best])


@dataclass(frozen=True)
class KernelInputs:
    """Dense arrays consumed by the compiled kernels."""

    Z: NDArray
    V: NDArray
    R: NDArray
    A: NDArray
    Y: NDArray
    g_t: NDArray
    g_a: NDArray
    strata: NDArray

    @classmethod
    def build(cls, dataset: StudyDataset, design: DesignPropensity,
              columns: Optional[Sequence[str]] = None) -> "KernelInputs":
        n = dataset.n
        X = _features(dataset, columns)
        Z = np.ascontiguousarray(np.column_stack([np.ones(n), X]))
        V = np.zeros((n, 1 + X.shape[1] + dataset.u.shape[1]))
        tgt = dataset.is_target
        V[tgt, 0] = 1.0
        V[tgt, 1:] = _target_design(dataset, columns)[tgt]
        g_t, g_a = design.split(dataset)
        return cls(Z, np.ascontiguousarray(V), np.ascontiguousarray(tgt),
                   np.ascontiguousarray(dataset.treatment, dtype=np.int64),
                   np.ascontiguousarray(dataset.outcome, dtype=float),
                   np.ascontiguousarray(g_t, dtype=float),
                   np.ascontiguousarray(g_a, dtype=float),
                   np.asarray(dataset.region, dtype=np.int64))

    def with_treatment(self, A: NDArray) -> "KernelInputs":
        return KernelInputs(self.Z, self.V, self.R, np.ascontiguousarray(A, dtype=np.int64),
                            self.Y, self.g_t, self.g_a, self.strata)


def bootstrap_plan(strata: NDArray, A: NDArray, R: NDArray, L: int, K0: int, K1: int,
                   seed: SeedLike) -> tuple[NDArray, NDArray, NDArray]:
    """Resample row indices stratified by (region, arm), and fold labels for
    each resample's target arms.  Row ``t`` of a resample is drawn from the
    stratum of original row ``t``, so stratum sizes and positions persist."""
    rng = rng_for(seed, STAGE_BOOT)
    n = strata.shape[0]
    rows = np.empty((L, n), dtype=np.int64)
    keys = strata * 2 + A
    for key in np.unique(keys):
        members = np.flatnonzero(keys == key)
        rows[:, members] = members[rng.integers(0, members.shape[0], size=(L, members.shape[0]))]
    m0 = int(np.sum(R & (A == 0)))
    m1 = int(np.sum(R & (A == 1)))
    folds0 = balanced_folds(m0, K0, rng, size=L)
    folds1 = balanced_folds(m1, K1, rng, size=L)
    return rows, folds0, folds1


@dataclass(frozen=True)
class SelectionResult:
    pvalues: NDArray
    theta: NDArray  # 2 x G
    theta_nb: NDArray  # 2
    curves: dict[int, MseCurve]
    gamma: dict[int, float]
    K: dict[int, int]
    flags: tuple[str, ...] = ()

    @property
    def tau_hat(self) -> float:
        grid = self.curves[0].grid
        k1 = int(np.flatnonzero(grid == self.gamma[1])[0])
        k0 = int(np.flatnonzero(grid == self.gamma[0])[0])
        return float(self.theta[1, k1] - self.theta[0, k0])


def run_selection(inputs: KernelInputs, config: CsbConfig, seed: SeedLike) -> SelectionResult:
    """Conformal p-values, grid estimates and bootstrap MSE curves for both
    arms, entirely through the kernels."""
    R, A = inputs.R, inputs.A
    m = {a: int(np.sum(R & (A == a))) for a in (0, 1)}
    Ks, flags = {}, []
    for a in (0, 1):
        Ks[a], f = effective_folds(m[a], config.K)
        flags.extend(f"arm{a}:{x}" for x in f)
    grid = np.asarray(config.grid, dtype=float)
    ident = np.arange(R.shape[0], dtype=np.int64)
    f0 = fold_labels(m[0], Ks[0], seed, 0)
    f1 = fold_labels(m[1], Ks[1], seed, 1)
    theta, nbs, pv = kernels.resample_thetas(
        inputs.Z, inputs.V, R, A, inputs.Y, inputs.g_t, inputs.g_a, ident, f0, f1,
        Ks[0], Ks[1], grid, config.use_u, config.clip_eps, config.max_iter, config.tol)
    rows, b0, b1 = bootstrap_plan(inputs.strata, A, R, config.L, Ks[0], Ks[1], seed)
    bth, bnb = kernels.bootstrap_thetas(
        inputs.Z, inputs.V, R, A, inputs.Y, inputs.g_t, inputs.g_a, rows, b0, b1,
        Ks[0], Ks[1], grid, config.use_u, config.clip_eps, config.max_iter, config.tol)
    path = as_path(seed)
    curves = {a: mse_from_draws(a, grid, theta[a], float(nbs[a]), bth[:, a, :], bnb[:, a], path)
              for a in (0, 1)}
    gamma = {a: choose_threshold(curves[a]) for a in (0, 1)}
    return SelectionResult(pv, theta, nbs, curves, gamma, Ks, tuple(flags))


def mse_curve(dataset: StudyDataset, design: DesignPropensity, arm: int,
              config: CsbConfig = CsbConfig(), seed: SeedLike = 0,
              columns: Optional[Sequence[str]] = None) -> MseCurve:
    """Bootstrap MSE curve for one arm (both arms are computed; the other is
    discarded)."""
    return run_selection(KernelInputs.build(dataset, design, columns), config, seed).curves[arm]


def csb_pipeline(dataset: StudyDataset, design: DesignPropensity = DesignPropensity(),
                 config: CsbConfig = CsbConfig(), seed: SeedLike = 0,
                 columns: Optional[Sequence[str]] = None) -> TauEstimate:
    """p-values, per-arm MSE-selected thresholds, then the CSB estimate at
    those thresholds with its variance output."""
    _require_arms(dataset)
    sel = run_selection(KernelInputs.build(dataset, design, columns), config, seed)
    pvals = conformal_pvalues(dataset, config.K, seed, columns)
    est = estimate_csb_ivw(dataset, design, pvals, sel.gamma[0], sel.gamma[1],
                           use_u=config.use_u, alpha=config.alpha, columns=columns,
                           clip_eps=config.clip_eps)
    extras = dict(est.extras)
    extras["mse_curves"] = {str(a): sel.curves[a].mse_hat for a in (0, 1)}
    extras["kernel_backend"] = kernels.BACKEND
    return TauEstimate(
        method=config.method, tau_hat=est.tau_hat, theta1=est.theta1, theta0=est.theta0,
        se=est.se, ci_lower=est.ci_lower, ci_upper=est.ci_upper, alpha=est.alpha, n=est.n,
        influence=est.influence, row_ids=est.row_ids, borrowed_indices=est.borrowed_indices,
        gamma=est.gamma, flags=tuple(dict.fromkeys(sel.flags + pvals.flags + est.flags)),
        extras=extras)


@dataclass
class CsbStatistic:
    """Picklable FRT statistic re-running the whole selection pipeline per
    assignment; draw ``key`` seeds the pipeline at ``(seed..., key)``."""

    design: DesignPropensity
    config: CsbConfig
    seed: tuple[int, ...]
    columns: Optional[tuple[str, ...]] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    keyed = True

    @property
    def tag(self) -> str:
        return self.config.method

    def __call__(self, dataset: StudyDataset, assignment: NDArray, key: int = 0) -> float:
        if self._cache.get("dataset") is not dataset:
            self._cache["inputs"] = KernelInputs.build(dataset, self.design, self.columns)
            self._cache["dataset"] = dataset
        inputs = self._cache["inputs"]
        seed = self.seed if key == 0 else self.seed + (int(key),)
        sel = run_selection(inputs.with_treatment(assignment), self.config, seed)
        return sel.tau_hat

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_cache"] = {}
        return state
