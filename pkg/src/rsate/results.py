"""Result containers shared by the estimator, CSB and multi-region modules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from numpy.typing import NDArray
from scipy.stats import norm


@dataclass(frozen=True)
class ArmEstimate:
    """Mean potential outcome for one arm.

    ``contributions`` has one entry per record and averages to
    ``theta_hat``; it is the per-record term of the estimator scaled by
    ``n / n_target``.
    """

    arm: int
    theta_hat: float
    contributions: NDArray

    def check(self, atol: float = 1e-10) -> bool:
        return abs(float(np.mean(self.contributions)) - self.theta_hat) <= atol


@dataclass(frozen=True)
class TauEstimate:
    method: str
    tau_hat: float
    theta1: ArmEstimate
    theta0: ArmEstimate
    se: float
    ci_lower: float
    ci_upper: float
    alpha: float = 0.05
    n: int = 0
    influence: Optional[NDArray] = None
    row_ids: Optional[NDArray] = None
    borrowed_indices: Optional[dict[int, tuple[int, ...]]] = None
    gamma: Optional[dict[int, float]] = None
    flags: tuple[str, ...] = ()
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def variance(self) -> float:
        """Estimated variance of ``tau_hat`` itself (not of sqrt(n) tau_hat)."""
        return self.se**2

    @property
    def pvalue(self) -> float:
        """Two-sided Wald p-value for ``tau = 0``."""
        if self.se <= 0.0:
            return 0.0 if self.tau_hat != 0.0 else 1.0
        return float(2.0 * norm.sf(abs(self.tau_hat) / self.se))

    @property
    def borrowed_count(self) -> Optional[dict[int, int]]:
        if self.borrowed_indices is None:
            return None
        return {a: len(ix) for a, ix in self.borrowed_indices.items()}

    def to_record(self, include_indices: bool = False) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "method": self.method,
            "tau_hat": _num(self.tau_hat),
            "se": _num(self.se),
            "ci": [_num(self.ci_lower), _num(self.ci_upper)],
            "alpha": self.alpha,
            "pvalue": _num(self.pvalue),
            "theta1": _num(self.theta1.theta_hat),
            "theta0": _num(self.theta0.theta_hat),
            "gamma": None if self.gamma is None else {str(a): g for a, g in sorted(self.gamma.items())},
            "borrowed_count": None if self.borrowed_count is None
            else {str(a): c for a, c in sorted(self.borrowed_count.items())},
            "flags": list(self.flags),
        }
        if include_indices and self.borrowed_indices is not None:
            rec["borrowed_indices"] = {str(a): [int(i) for i in ix]
                                       for a, ix in sorted(self.borrowed_indices.items())}
        for k, v in sorted(self.extras.items()):
            rec.setdefault(k, _jsonable(v))
        return rec


def _num(x: float) -> Optional[float]:
    x = float(x)
    return x if math.isfinite(x) else None


def _jsonable(v: Any) -> Any:
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.floating, float)):
        return _num(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def confidence_interval(tau_hat: float, v_hat: float, n: int,
                        alpha: float = 0.05) -> tuple[float, float]:
    """Wald interval ``tau_hat -/+ z_{1-alpha/2} sqrt(v_hat / n)``.

    ``v_hat`` is the variance of ``sqrt(n) tau_hat``.
    """
    if v_hat < 0:
        raise ValueError("v_hat must be non-negative")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    half = float(norm.ppf(1.0 - alpha / 2.0)) * math.sqrt(v_hat / n)
    return tau_hat - half, tau_hat + half
