"""No-borrowing and full-borrowing RSATE estimators with influence-based
variance estimates.

Every estimator here is written as a per-record term ``t_i`` with
``theta_a = sum(t) / n_target``.  The record's contribution to the variance
estimate is ``t_i * n / n_target`` (its influence on ``sqrt(n) * theta_a``
up to centring), so all methods share :func:`assemble_tau`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from rsate.data import StudyDataset
from rsate.models import (CLIP_EPS, LinearModelFit, LogisticModelFit,
                          PreconditionError, fit_linear, fit_logistic, predict)
from rsate.results import ArmEstimate, TauEstimate, confidence_interval


@dataclass(frozen=True)
class DesignPropensity:
    """Known randomisation probabilities ``P(A=1 | X, region)``.

    ``kind`` is ``"constant"`` (probability ``p`` everywhere),
    ``"stratified"`` (``by_region`` maps region label to probability) or
    ``"table"`` (``table(x, region)`` returns a probability per row).  With
    several auxiliary regions under a stratified design, the auxiliary
    probability entering the pooled propensity is the count-weighted mean of
    the auxiliary regions' probabilities.
    """

    kind: str = "constant"
    p: float = 0.5
    by_region: Optional[Mapping[int, float]] = None
    table: Optional[Callable[[NDArray, NDArray], NDArray]] = None

    def __post_init__(self):
        if self.kind not in ("constant", "stratified", "table"):
            raise ValueError(f"unknown design kind {self.kind!r}")
        if self.kind == "constant" and not 0.0 < self.p < 1.0:
            raise ValueError("design probability must lie in (0, 1)")
        if self.kind == "stratified":
            if not self.by_region:
                raise ValueError("stratified design needs by_region")
            if any(not 0.0 < v < 1.0 for v in self.by_region.values()):
                raise ValueError("design probabilities must lie in (0, 1)")
        if self.kind == "table" and self.table is None:
            raise ValueError("table design needs a callable")

    def e1(self, dataset: StudyDataset) -> NDArray:
        """Each record's own ``P(A=1)`` under its region's design."""
        if self.kind == "constant":
            return np.full(dataset.n, self.p)
        if self.kind == "stratified":
            try:
                return np.array([self.by_region[int(r)] for r in dataset.region])
            except KeyError as exc:
                raise PreconditionError(f"design has no probability for region {exc.args[0]}") from None
        return self._checked(self.table(dataset.x, dataset.region))

    def split(self, dataset: StudyDataset) -> tuple[NDArray, NDArray]:
        """``(g_t, g_a)``: ``P(A=1 | X)`` under the target design and under the
        auxiliary design, both evaluated on every record."""
        n = dataset.n
        if self.kind == "constant":
            return np.full(n, self.p), np.full(n, self.p)
        if self.kind == "stratified":
            own = self.e1(dataset)
            aux = ~dataset.is_target
            g_t = np.full(n, self.by_region[1])
            g_a = np.full(n, float(own[aux].mean()) if aux.any() else self.by_region[1])
            return g_t, g_a
        g_t = self._checked(self.table(dataset.x, np.ones(n, dtype=np.int64)))
        g_a = self._checked(self.table(dataset.x, np.zeros(n, dtype=np.int64)))
        return g_t, g_a

    @staticmethod
    def _checked(p) -> NDArray:
        p = np.asarray(p, dtype=float)
        if np.any((p <= 0.0) | (p >= 1.0)):
            raise PreconditionError("design probabilities must lie in (0, 1)")
        return p

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "p": self.p}
        if self.kind == "stratified":
            return {"kind": "stratified", "by_region": {str(k): v for k, v in sorted(self.by_region.items())}}
        return {"kind": "table"}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DesignPropensity":
        kind = d.get("kind", "constant")
        if kind == "constant":
            return cls(kind="constant", p=float(d.get("p", 0.5)))
        if kind == "stratified":
            return cls(kind="stratified", by_region={int(k): float(v) for k, v in d["by_region"].items()})
        raise ValueError("table designs cannot be read from a config file")


def arm_propensity(g: NDArray, arm: int) -> NDArray:
    return g if arm == 1 else 1.0 - g


@dataclass(frozen=True)
class IvwPrediction:
    y_hat: NDArray
    w_nb: float
    w_fb: float
    v_nb: float
    v_fb: float


@dataclass(frozen=True)
class SamplingModel:
    """Estimated ``P(R=1 | X)`` on every record, with the fit when one exists."""

    pi: NDArray
    fit: Optional[LogisticModelFit]
    flags: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _target_arm(dataset: StudyDataset, arm: int) -> NDArray:
    return dataset.is_target & (dataset.treatment == arm)


def _require_arms(dataset: StudyDataset) -> None:
    for a in (0, 1):
        if not np.any(_target_arm(dataset, a)):
            raise PreconditionError(f"target region has no records in arm {a}")


def _features(dataset: StudyDataset, columns: Optional[Sequence[str]]) -> NDArray:
    return dataset.x if columns is None else dataset.shared_columns(columns)


def _target_design(dataset: StudyDataset, columns: Optional[Sequence[str]] = None) -> NDArray:
    """(X, U) on target rows, zeros elsewhere (never read there)."""
    X = _features(dataset, columns)
    F = np.zeros((dataset.n, X.shape[1] + dataset.u.shape[1]))
    tgt = dataset.is_target
    F[tgt] = np.column_stack([X[tgt], dataset.u[tgt]])
    return F


def fit_sampling_model(dataset: StudyDataset, columns: Optional[Sequence[str]] = None,
                       clip_eps: float = CLIP_EPS) -> SamplingModel:
    """Logistic ``R ~ X`` on every record.  Without auxiliary records the
    model is degenerate and ``pi`` is set to the upper clip, flagged."""
    R = dataset.is_target.astype(float)
    if R.min() == 1.0:
        return SamplingModel(np.full(dataset.n, 1.0 - clip_eps), None, ("no_auxiliary_rows",))
    X = _features(dataset, columns)
    fit = fit_logistic(X, R, clip_eps=clip_eps)
    flags = () if fit.converged else ("sampling_model_not_converged",)
    return SamplingModel(predict(fit, X), fit, flags)


def assemble_tau(method: str, dataset: StudyDataset, t1: NDArray, t0: NDArray,
                 alpha: float = 0.05, flags: Sequence[str] = (), **kwargs) -> TauEstimate:
    """Build a :class:`TauEstimate` from per-record arm terms."""
    n, n_r = dataset.n, dataset.n_target
    scale = n / n_r
    c1, c0 = t1 * scale, t0 * scale
    th1, th0 = float(t1.sum() / n_r), float(t0.sum() / n_r)
    tau = th1 - th0
    psi = c1 - c0 - dataset.is_target * (tau * scale)
    v_hat = float(np.mean(psi**2))
    flags = list(flags)
    for a in (0, 1):
        if int(np.sum(_target_arm(dataset, a))) < 2:
            flags.append(f"single_row_arm_{a}")
    if any(f.startswith("single_row_arm") for f in flags):
        v_hat = 0.0
    lo, hi = confidence_interval(tau, v_hat, n, alpha)
    return TauEstimate(
        method=method, tau_hat=tau,
        theta1=ArmEstimate(1, th1, c1), theta0=ArmEstimate(0, th0, c0),
        se=math.sqrt(v_hat / n), ci_lower=lo, ci_upper=hi, alpha=alpha, n=n,
        influence=psi, row_ids=dataset.ids, flags=tuple(dict.fromkeys(flags)), **kwargs)


def aipw_terms(dataset: StudyDataset, arm: int, y_hat: NDArray, weight: NDArray,
               contributing: NDArray) -> NDArray:
    """``R_i * y_hat_i + weight_i * 1{contributing_i} * (Y_i - y_hat_i)``."""
    R = dataset.is_target
    resid = np.where(contributing, dataset.outcome - y_hat, 0.0)
    return np.where(R, y_hat, 0.0) + np.where(contributing, weight, 0.0) * resid


# ---------------------------------------------------------------------------
# no borrowing
# ---------------------------------------------------------------------------


def _nb_arm(dataset: StudyDataset, design: DesignPropensity, arm: int, use_u: bool,
            columns: Optional[Sequence[str]] = None) -> tuple[NDArray, LinearModelFit, NDArray]:
    tgt = dataset.is_target
    rows = _target_arm(dataset, arm)
    F = _target_design(dataset, columns) if use_u else _features(dataset, columns)
    fit = fit_linear(F[rows], dataset.outcome[rows])
    mu = np.where(tgt, predict(fit, np.where(tgt[:, None], F, 0.0)), 0.0)
    g_t, _ = design.split(dataset)
    weight = 1.0 / arm_propensity(g_t, arm)
    return aipw_terms(dataset, arm, mu, weight, rows), fit, mu


def nb_arm_terms(dataset: StudyDataset, design: DesignPropensity, arm: int,
                 use_u: bool = True, columns: Optional[Sequence[str]] = None) -> NDArray:
    return _nb_arm(dataset, design, arm, use_u, columns)[0]


def estimate_nb_xonly(dataset: StudyDataset, design: DesignPropensity = DesignPropensity(),
                      alpha: float = 0.05) -> TauEstimate:
    """Target-only augmented IPW estimator adjusting for X."""
    _require_arms(dataset)
    t = {a: nb_arm_terms(dataset, design, a, use_u=False) for a in (0, 1)}
    return assemble_tau("NB-Xonly", dataset, t[1], t[0], alpha)


def estimate_nb_allcov(dataset: StudyDataset, design: DesignPropensity = DesignPropensity(),
                       alpha: float = 0.05) -> TauEstimate:
    """Target-only augmented IPW estimator adjusting for X and U."""
    _require_arms(dataset)
    _require_u(dataset)
    t = {a: nb_arm_terms(dataset, design, a, use_u=True) for a in (0, 1)}
    return assemble_tau("NB-AllCov", dataset, t[1], t[0], alpha)


def _require_u(dataset: StudyDataset) -> None:
    if np.isnan(dataset.u[dataset.is_target]).any():
        raise PreconditionError("target-only covariates missing on target rows")


# ---------------------------------------------------------------------------
# full borrowing
# ---------------------------------------------------------------------------


def fb_weight(pi: NDArray, g_t: NDArray, g_a: NDArray, arm: int,
              q: Optional[NDArray] = None) -> NDArray:
    """``pi / e`` with ``e = pi e_{a|1} + (1 - pi) e_{a|0} q``.

    ``q`` is the probability that an auxiliary record of arm ``a`` is
    borrowed; it is 1 under full borrowing.
    """
    e_aux = arm_propensity(g_a, arm)
    if q is not None:
        e_aux = e_aux * q
    return pi / (pi * arm_propensity(g_t, arm) + (1.0 - pi) * e_aux)


def estimate_fb_xonly(dataset: StudyDataset, design: DesignPropensity = DesignPropensity(),
                      alpha: float = 0.05, columns: Optional[Sequence[str]] = None,
                      sampling: Optional[SamplingModel] = None) -> TauEstimate:
    """Full-borrowing doubly robust estimator on shared covariates.

    ``sampling`` overrides the fitted ``P(R=1 | X)``; it is how a
    deliberately misspecified sampling model is plugged in.
    """
    _require_arms(dataset)
    X = _features(dataset, columns)
    sm = fit_sampling_model(dataset, columns) if sampling is None else sampling
    g_t, g_a = design.split(dataset)
    t = {}
    for a in (0, 1):
        rows = dataset.treatment == a
        mu = predict(fit_linear(X[rows], dataset.outcome[rows]), X)
        t[a] = aipw_terms(dataset, a, mu, fb_weight(sm.pi, g_t, g_a, a), rows)
    return assemble_tau("FB-Xonly", dataset, t[1], t[0], alpha, flags=sm.flags)


def ivw_predictions(dataset: StudyDataset, arm: int, nb_fit: LinearModelFit,
                    fb_fit: LinearModelFit, pooled: Optional[NDArray] = None,
                    columns: Optional[Sequence[str]] = None,
                    weights_override: Optional[tuple[float, float]] = None) -> IvwPrediction:
    """Inverse-variance blend of the target-only and pooled outcome models.

    ``pooled`` marks the records the pooled model was trained on (default:
    every arm-``arm`` record); ``v_fb`` averages over them.  Auxiliary records
    always receive the pooled prediction.
    """
    tgt = dataset.is_target
    rows_nb = _target_arm(dataset, arm)
    if pooled is None:
        pooled = dataset.treatment == arm
    X = _features(dataset, columns)
    mu_fb = predict(fb_fit, X)
    F = _target_design(dataset, columns)
    mu_nb = np.where(tgt, predict(nb_fit, F), 0.0)
    v_nb = float(np.mean((dataset.outcome[rows_nb] - mu_nb[rows_nb]) ** 2))
    v_fb = float(np.mean((dataset.outcome[pooled] - mu_fb[pooled]) ** 2))
    if weights_override is not None:
        w_nb = float(weights_override[0])
        w_fb = 1.0 - w_nb
    else:
        w_nb, w_fb = ivw_weights(v_nb, v_fb)
    y_hat = np.where(tgt, w_nb * mu_nb + w_fb * mu_fb, mu_fb)
    return IvwPrediction(y_hat, w_nb, w_fb, v_nb, v_fb)


def ivw_weights(v_nb: float, v_fb: float) -> tuple[float, float]:
    """``(w_nb, w_fb)`` with ``w_nb = v_fb / (v_nb + v_fb)``; ``(0.5, 0.5)``
    when both errors vanish."""
    tot = v_nb + v_fb
    if tot <= 0.0:
        return 0.5, 0.5
    w_nb = v_fb / tot
    return w_nb, 1.0 - w_nb


@dataclass(frozen=True)
class FbIvwArm:
    terms: NDArray
    ivw: IvwPrediction
    weight: NDArray
    contributing: NDArray


def fb_ivw_arm(dataset: StudyDataset, design: DesignPropensity, arm: int,
               sm: SamplingModel, columns: Optional[Sequence[str]] = None,
               weights_override: Optional[tuple[float, float]] = None) -> FbIvwArm:
    X = _features(dataset, columns)
    rows_nb = _target_arm(dataset, arm)
    pooled = dataset.treatment == arm
    F = _target_design(dataset, columns)
    nb_fit = fit_linear(F[rows_nb], dataset.outcome[rows_nb])
    fb_fit = fit_linear(X[pooled], dataset.outcome[pooled])
    ivw = ivw_predictions(dataset, arm, nb_fit, fb_fit, pooled, columns, weights_override)
    g_t, g_a = design.split(dataset)
    w = fb_weight(sm.pi, g_t, g_a, arm)
    return FbIvwArm(aipw_terms(dataset, arm, ivw.y_hat, w, pooled), ivw, w, pooled)


def estimate_fb_ivw(dataset: StudyDataset, design: DesignPropensity = DesignPropensity(),
                    alpha: float = 0.05, columns: Optional[Sequence[str]] = None,
                    weights_override: Optional[tuple[float, float]] = None,
                    method: str = "FB-IVW") -> TauEstimate:
    """Full borrowing with inverse-variance blended outcome predictions.

    ``columns`` restricts the shared covariates used by the pooled outcome
    model and the sampling model.
    """
    _require_arms(dataset)
    _require_u(dataset)
    sm = fit_sampling_model(dataset, columns)
    arms = {a: fb_ivw_arm(dataset, design, a, sm, columns, weights_override) for a in (0, 1)}
    extras = {"ivw_weights": {str(a): [arms[a].ivw.w_nb, arms[a].ivw.w_fb] for a in (0, 1)}}
    return assemble_tau(method, dataset, arms[1].terms, arms[0].terms, alpha,
                        flags=sm.flags, extras=extras)


def augmentation_decomposition(dataset: StudyDataset, design: DesignPropensity,
                               arm: int) -> tuple[float, float, float]:
    """Split the FB-IVW arm estimate into a weighted target-only term and two
    augmentation terms; the three sum to ``theta_a``.

    Computed from the fitted nuisances directly rather than from the
    estimator's per-record terms, so the identity is a genuine check.
    """
    sm = fit_sampling_model(dataset)
    arm_fit = fb_ivw_arm(dataset, design, arm, sm)
    R = dataset.is_target
    n_r = dataset.n_target
    h = np.where(dataset.treatment == arm, arm_fit.weight, 0.0)
    y, y_hat = dataset.outcome, arm_fit.ivw.y_hat
    first = float(np.sum(R * h * y) / n_r)
    second = float(np.sum(R * (1.0 - h) * y_hat) / n_r)
    third = float(np.sum((~R) * h * (y - y_hat)) / n_r)
    return first, second, third


ESTIMATORS: dict[str, Callable[..., TauEstimate]] = {
    "NB-Xonly": estimate_nb_xonly,
    "NB-AllCov": estimate_nb_allcov,
    "FB-Xonly": estimate_fb_xonly,
    "FB-IVW": estimate_fb_ivw,
}
