"""Nuisance-model fitting: OLS outcome regressions, IRLS logistic regression,
and K-fold utilities."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from rsate.kernels import _logistic_masked_np

CLIP_EPS = 0.01
MAX_ITER = 100
TOL = 1e-8


class DimensionError(ValueError):
    """Feature width or vector length does not match what was expected."""


class PreconditionError(ValueError):
    """An operation was called on inputs that violate its preconditions."""


@dataclass(frozen=True)
class LinearModelFit:
    coefficients: NDArray  # intercept first
    feature_names: tuple[str, ...] = ()
    residual_mse: float = 0.0
    rank_deficient: bool = False

    @property
    def n_features(self) -> int:
        return self.coefficients.shape[0] - 1


@dataclass(frozen=True)
class LogisticModelFit:
    coefficients: NDArray  # intercept first
    converged: bool = True
    iterations: int = 0
    clip_eps: float = CLIP_EPS
    feature_names: tuple[str, ...] = ()

    @property
    def n_features(self) -> int:
        return self.coefficients.shape[0] - 1


@dataclass(frozen=True)
class FoldAssignment:
    """Balanced random partition of an index set into ``K`` folds (1-based)."""

    fold_of: dict[int, int]
    K: int
    seed: int | None = None
    indices: tuple[int, ...] = field(default=())

    def folds(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.K)]
        for idx, k in self.fold_of.items():
            out[k - 1].append(idx)
        return [sorted(f) for f in out]

    def as_array(self, indices: Sequence[int] | None = None) -> NDArray:
        """Zero-based fold ids aligned with ``indices`` (default: ``self.indices``)."""
        idx = self.indices if indices is None else indices
        return np.array([self.fold_of[int(i)] - 1 for i in idx], dtype=np.int64)


def _design(features: ArrayLike) -> NDArray:
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.column_stack([np.ones(X.shape[0]), X])


def fit_linear(features: ArrayLike, response: ArrayLike,
               feature_names: Sequence[str] = ()) -> LinearModelFit:
    """Least-squares fit with intercept via SVD-based ``lstsq``.

    A rank-deficient design is solved by the minimum-norm (pseudo-inverse)
    solution and flagged on the returned fit.
    """
    Z = _design(features)
    y = np.asarray(response, dtype=float)
    if Z.shape[0] != y.shape[0]:
        raise DimensionError(f"{Z.shape[0]} feature rows vs {y.shape[0]} responses")
    if np.isnan(Z).any() or np.isnan(y).any():
        raise PreconditionError("missing entries in regression inputs")
    beta, _res, rank, _sv = np.linalg.lstsq(Z, y, rcond=None)
    resid = y - Z @ beta
    return LinearModelFit(
        coefficients=beta,
        feature_names=tuple(feature_names),
        residual_mse=float(np.mean(resid**2)),
        rank_deficient=bool(rank < Z.shape[1]),
    )


def fit_logistic(features: ArrayLike, labels: ArrayLike, max_iter: int = MAX_ITER,
                 tol: float = TOL, clip_eps: float = CLIP_EPS,
                 feature_names: Sequence[str] = ()) -> LogisticModelFit:
    """Bernoulli maximum likelihood with intercept by iteratively reweighted
    least squares.

    Stops when the log-likelihood or the largest coefficient moves by less
    than ``tol``.  Under complete separation the likelihood has no maximiser;
    the fit is then returned with ``converged=False``.
    """
    Z = _design(features)
    y = np.asarray(labels, dtype=float)
    if Z.shape[0] != y.shape[0]:
        raise DimensionError(f"{Z.shape[0]} feature rows vs {y.shape[0]} labels")
    if not (np.any(y == 1) and np.any(y == 0)):
        raise PreconditionError("logistic fit needs both label classes")
    beta, converged, iters = _logistic_masked_np(
        Z, y, np.ones(y.shape[0], dtype=bool), max_iter, tol)
    # every record on the correct side of the boundary means the classes are
    # separable and the likelihood has no finite maximiser
    if np.all(np.where(y == 1, 1.0, -1.0) * (Z @ beta) > 0.0):
        converged = False
    return LogisticModelFit(coefficients=beta, converged=bool(converged),
                            iterations=int(iters), clip_eps=clip_eps,
                            feature_names=tuple(feature_names))


def log_likelihood(fit_or_beta: Union[LogisticModelFit, NDArray],
                   features: ArrayLike, labels: ArrayLike) -> float:
    beta = getattr(fit_or_beta, "coefficients", fit_or_beta)
    eta = _design(features) @ np.asarray(beta, dtype=float)
    y = np.asarray(labels, dtype=float)
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def linear_predictor(fit: Union[LinearModelFit, LogisticModelFit],
                     features: ArrayLike) -> NDArray:
    Z = _design(features)
    if Z.shape[1] != fit.coefficients.shape[0]:
        raise DimensionError(
            f"fit expects {fit.coefficients.shape[0] - 1} features, got {Z.shape[1] - 1}")
    return Z @ fit.coefficients


def predict(fit: Union[LinearModelFit, LogisticModelFit],
            features: ArrayLike) -> NDArray:
    """Linear fits return the fitted mean; logistic fits return probabilities
    clipped to ``[clip_eps, 1 - clip_eps]``."""
    eta = linear_predictor(fit, features)
    if isinstance(fit, LogisticModelFit):
        p = 1.0 / (1.0 + np.exp(-np.clip(eta, -700, 700)))
        return np.clip(p, fit.clip_eps, 1.0 - fit.clip_eps)
    return eta


def kfold_split(indices: Sequence[int], K: int, seed: int | None = None,
                rng: np.random.Generator | None = None) -> FoldAssignment:
    """Uniformly random balanced partition; fold sizes differ by at most one."""
    idx = np.asarray(indices, dtype=np.int64)
    if K < 2:
        raise PreconditionError("K must be at least 2")
    if K > idx.shape[0]:
        raise PreconditionError(f"K={K} exceeds the {idx.shape[0]} indices")
    if rng is None:
        rng = np.random.default_rng(seed)
    folds = balanced_folds(idx.shape[0], K, rng)
    return FoldAssignment(
        fold_of={int(i): int(f) + 1 for i, f in zip(idx, folds)},
        K=K, seed=seed, indices=tuple(int(i) for i in idx))


def balanced_folds(m: int, K: int, rng: np.random.Generator,
                   size: int | None = None) -> NDArray:
    """Zero-based balanced fold labels for ``m`` items, randomly permuted.

    With ``size`` given, returns ``size`` independent rows of labels.
    """
    base = np.arange(m, dtype=np.int64) % K
    if size is None:
        return rng.permutation(base)
    return rng.permuted(np.broadcast_to(base, (size, m)).copy(), axis=1)
