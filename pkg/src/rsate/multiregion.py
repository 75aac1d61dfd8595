"""Several auxiliary regions with region-specific shared covariates.

Each auxiliary region ``r`` is paired with the target region and analysed on
its own shared covariate set ``X^(r)``.  The region-wise estimates are then
combined with weights minimising the variance of the combination, using
their joint influence-function covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from rsate.csb import CsbConfig, csb_pipeline
from rsate.data import StudyDataset
from rsate.estimators import DesignPropensity, estimate_fb_ivw
from rsate.models import DimensionError, PreconditionError
from rsate.results import ArmEstimate, TauEstimate, confidence_interval
from rsate.seeds import SeedLike, child


@dataclass(frozen=True)
class RegionCovariateMap:
    shared_of: Mapping[int, tuple[str, ...]]

    def __post_init__(self):
        object.__setattr__(self, "shared_of",
                           {int(r): tuple(c) for r, c in sorted(self.shared_of.items())})
        if 1 in self.shared_of:
            raise ValueError("region 1 is the target region, not an auxiliary region")

    def check(self, dataset: StudyDataset) -> None:
        names = set(dataset.schema.shared_names)
        for r, cols in self.shared_of.items():
            bad = [c for c in cols if c not in names]
            if bad:
                raise PreconditionError(f"region {r}: unknown shared covariates {bad}")

    @property
    def labels(self) -> list[int]:
        return list(self.shared_of)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegionCovariateMap":
        return cls({int(k): tuple(v) for k, v in d.items()})


@dataclass(frozen=True)
class RegionEstimates:
    labels: tuple[int, ...]
    tau_hats: NDArray
    sigma_hat: NDArray
    n: int
    influence: NDArray  # S x n
    arm_contributions: NDArray  # S x 2 x n, arm order (0, 1)
    weights: Optional[NDArray] = None
    estimates: tuple[TauEstimate, ...] = ()
    flags: tuple[str, ...] = ()


def _pair(dataset: StudyDataset, r: int) -> NDArray:
    if not np.any(dataset.region == r):
        raise PreconditionError(f"region {r} has no records")
    return np.flatnonzero(dataset.is_target | (dataset.region == r))


def _lift(est: TauEstimate, rows: NDArray, n: int) -> tuple[NDArray, NDArray]:
    """Rescale sub-sample influence and arm contributions to the full sample;
    records outside the pair get zero."""
    scale = n / rows.shape[0]
    psi = np.zeros(n)
    psi[rows] = est.influence * scale
    arms = np.zeros((2, n))
    arms[0, rows] = est.theta0.contributions * scale
    arms[1, rows] = est.theta1.contributions * scale
    return psi, arms


def estimate_fb_ivw_region(dataset: StudyDataset, design: DesignPropensity, r: int,
                           shared: Sequence[str], alpha: float = 0.05) -> tuple[TauEstimate, NDArray]:
    """FB-IVW on the target plus region ``r`` using covariates ``shared``.

    Returns the estimate and its influence vector on the full sample, scaled
    so that ``mean(psi**2) / n`` is the estimate's variance.
    """
    rows = _pair(dataset, r)
    sub = dataset.subset(rows)
    est = estimate_fb_ivw(sub, design, alpha, columns=tuple(shared), method=f"FB-IVW[{r}]")
    if not shared:
        est = _with_flags(est, ("empty_shared_set",))
    psi, _ = _lift(est, rows, dataset.n)
    return est, psi


def _with_flags(est: TauEstimate, flags: Sequence[str]) -> TauEstimate:
    return replace(est, flags=tuple(dict.fromkeys(est.flags + tuple(flags))))


def influence_covariance(influence: Sequence[NDArray], n: int) -> NDArray:
    """``Sigma[s, t] = (1/n) sum_i psi_s[i] psi_t[i]``."""
    M = np.vstack([np.asarray(v, dtype=float) for v in influence])
    if M.shape[1] != n:
        raise DimensionError(f"influence vectors have length {M.shape[1]}, expected {n}")
    S = M @ M.T / n
    return (S + S.T) / 2.0


def optimal_weights(sigma_hat: NDArray) -> tuple[NDArray, tuple[str, ...]]:
    """Variance-minimising weights summing to one: ``Sigma^-1 1 / (1' Sigma^-1 1)``.

    A singular or ill-conditioned ``Sigma`` is ridge-regularised with
    ``1e-8 * trace / S`` on the diagonal and flagged.
    """
    S = np.asarray(sigma_hat, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError("sigma_hat must be square")
    k = S.shape[0]
    ones = np.ones(k)
    flags: tuple[str, ...] = ()
    try:
        np.linalg.cholesky(S)
        ok = np.linalg.cond(S) < 1e12
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        lam = 1e-8 * max(float(np.trace(S)) / k, 1e-300)
        S = S + lam * np.eye(k)
        flags = ("sigma_ridge_regularized",)
    x = np.linalg.solve(S, ones)
    return x / x.sum(), flags


def combine(regions: RegionEstimates, alpha: float = 0.05, method: str = "FB-IVW-multi") -> TauEstimate:
    """Weighted combination ``d' tau`` with variance ``d' Sigma d / n``."""
    if regions.weights is None:
        raise PreconditionError("region estimates carry no weights")
    d = regions.weights
    n = regions.n
    tau = float(d @ regions.tau_hats)
    v_hat = max(float(d @ regions.sigma_hat @ d), 0.0)
    lo, hi = confidence_interval(tau, v_hat, n, alpha)
    c0 = d @ regions.arm_contributions[:, 0, :]
    c1 = d @ regions.arm_contributions[:, 1, :]
    borrowed = None
    if regions.estimates and all(e.borrowed_indices is not None for e in regions.estimates):
        borrowed = {a: tuple(sorted({i for e in regions.estimates for i in e.borrowed_indices[a]}))
                    for a in (0, 1)}
    return TauEstimate(
        method=method, tau_hat=tau,
        theta1=ArmEstimate(1, float(c1.mean()), c1), theta0=ArmEstimate(0, float(c0.mean()), c0),
        se=math.sqrt(v_hat / n), ci_lower=lo, ci_upper=hi, alpha=alpha, n=n,
        influence=d @ regions.influence, borrowed_indices=borrowed, flags=regions.flags,
        extras={"region_labels": list(regions.labels), "region_weights": d,
                "region_tau": regions.tau_hats})


def _assemble(dataset: StudyDataset, labels: list[int], ests: list[TauEstimate],
              rows: list[NDArray], flags: list[str]) -> RegionEstimates:
    n = dataset.n
    psis, arms = [], []
    for est, rw in zip(ests, rows):
        psi, arm = _lift(est, rw, n)
        psis.append(psi)
        arms.append(arm)
        flags.extend(f"region{est.method}:{f}" for f in est.flags)
    sigma = influence_covariance(psis, n)
    w, wf = optimal_weights(sigma)
    return RegionEstimates(tuple(labels), np.array([e.tau_hat for e in ests]), sigma, n,
                           np.vstack(psis), np.stack(arms), w, tuple(ests),
                           tuple(dict.fromkeys(flags + list(wf))))


def estimate_regions(dataset: StudyDataset, design: DesignPropensity,
                     mapping: RegionCovariateMap, alpha: float = 0.05) -> RegionEstimates:
    mapping.check(dataset)
    ests, rows = [], []
    for r in mapping.labels:
        rw = _pair(dataset, r)
        est, _ = estimate_fb_ivw_region(dataset, design, r, mapping.shared_of[r], alpha)
        ests.append(est)
        rows.append(rw)
    return _assemble(dataset, mapping.labels, ests, rows, [])


def estimate_fb_ivw_multi(dataset: StudyDataset, design: DesignPropensity,
                          mapping: RegionCovariateMap, alpha: float = 0.05) -> TauEstimate:
    return combine(estimate_regions(dataset, design, mapping, alpha), alpha)


def select_by_region(dataset: StudyDataset, design: DesignPropensity,
                     mapping: RegionCovariateMap, config: CsbConfig = CsbConfig(),
                     seed: SeedLike = 0) -> TauEstimate:
    """Region-wise CSB on each auxiliary region's own shared covariates,
    combined with the optimal weights.  Borrowed indices refer to positions
    in ``dataset``; region ``r`` uses seed path ``(seed, r)``."""
    mapping.check(dataset)
    ests, rows = [], []
    gammas = {}
    for r in mapping.labels:
        rw = _pair(dataset, r)
        sub = dataset.subset(rw)
        est = csb_pipeline(sub, design, config, child(seed, r), columns=mapping.shared_of[r])
        est = _remap(est, rw, f"{config.method}[{r}]")
        gammas[str(r)] = {str(a): g for a, g in est.gamma.items()}
        ests.append(est)
        rows.append(rw)
    regions = _assemble(dataset, mapping.labels, ests, rows, ["combination:region-wise"])
    out = combine(regions, config.alpha, method=f"{config.method}-multi")
    return replace(out, extras={**out.extras, "region_gamma": gammas,
                                "region_borrowed": {str(r): e.borrowed_count for r, e in
                                                    zip(mapping.labels, ests)}})


def _remap(est: TauEstimate, rows: NDArray, method: str) -> TauEstimate:
    borrowed = {a: tuple(int(rows[i]) for i in ix) for a, ix in est.borrowed_indices.items()}
    return replace(est, method=method, borrowed_indices=borrowed)
