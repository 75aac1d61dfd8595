"""Cross-validated (CV+) conformal p-values measuring how exchangeable each
auxiliary record is with the target region, arm by arm."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from rsate import kernels
from rsate.data import StudyDataset
from rsate.models import FoldAssignment, PreconditionError, balanced_folds
from rsate.seeds import STAGE_FOLDS, SeedLike, as_path, rng_for

DEFAULT_K = 10


@dataclass(frozen=True)
class ConformalScoreTable:
    """Absolute-residual scores for one arm.

    ``aux_scores[j, t]`` scores auxiliary record ``aux_index[j]`` with the
    model fitted without the fold of calibration record ``calib_index[t]``.
    """

    arm: int
    fold_assignment: FoldAssignment
    calib_index: NDArray
    aux_index: NDArray
    calib_scores: NDArray
    aux_scores: NDArray
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class PValueTable:
    """Per-arm conformal p-values keyed by record position in the dataset."""

    p_of: dict[int, dict[int, float]]
    K: dict[int, int]
    seed: tuple[int, ...]
    n_calib: dict[int, int]
    flags: tuple[str, ...] = ()

    def vector(self, n: int) -> NDArray:
        """p-values aligned with dataset rows; 1 for target rows."""
        out = np.ones(n)
        for arm_map in self.p_of.values():
            for j, p in arm_map.items():
                out[j] = p
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "record_index", "p_value"])
        for arm in sorted(self.p_of):
            for j, p in sorted(self.p_of[arm].items()):
                w.writerow([arm, j, repr(float(p))])
        return buf.getvalue()


def effective_folds(m: int, K: int) -> tuple[int, tuple[str, ...]]:
    """Cap ``K`` at the calibration size ``m``."""
    if m < 2:
        raise PreconditionError(f"need at least 2 target records in the arm, got {m}")
    if K > m:
        return m, (f"folds_reduced_to_{m}",)
    return K, ()


def fold_labels(m: int, K: int, seed: SeedLike, arm: int) -> NDArray:
    """The fold labels used for arm ``arm`` of the observed data."""
    return balanced_folds(m, K, rng_for(seed, STAGE_FOLDS, arm))


def _shared(dataset: StudyDataset, columns: Optional[Sequence[str]]) -> NDArray:
    X = dataset.x if columns is None else dataset.shared_columns(columns)
    return np.column_stack([np.ones(dataset.n), X])


def conformal_scores(dataset: StudyDataset, arm: int, K: int = DEFAULT_K,
                     seed: SeedLike = 0, columns: Optional[Sequence[str]] = None,
                     folds: Optional[NDArray] = None) -> ConformalScoreTable:
    """Cross-fitted absolute residuals for target (calibration) and auxiliary
    records of one arm, with outcome models on shared covariates only.

    ``folds`` supplies zero-based fold labels for the calibration records
    directly; otherwise they are drawn from ``seed``.
    """
    calib = np.flatnonzero(dataset.is_target & (dataset.treatment == arm))
    aux = np.flatnonzero(~dataset.is_target & (dataset.treatment == arm))
    K, flags = effective_folds(calib.shape[0], K)
    if folds is None:
        folds = fold_labels(calib.shape[0], K, seed, arm)
    folds = np.asarray(folds, dtype=np.int64)
    Z = _shared(dataset, columns)
    Y = np.asarray(dataset.outcome, dtype=float)
    s = np.empty(calib.shape[0])
    aux_by_fold = np.empty((aux.shape[0], K))
    for k in range(K):
        train = calib[folds != k]
        if train.shape[0] >= Z.shape[1]:
            beta, *_ = np.linalg.lstsq(Z[train], Y[train], rcond=None)
        else:
            beta = np.zeros(Z.shape[1])
            beta[0] = Y[train].mean()
            flags += (f"intercept_only_fold_{k + 1}",)
        held = calib[folds == k]
        s[folds == k] = np.abs(Y[held] - Z[held] @ beta)
        aux_by_fold[:, k] = np.abs(Y[aux] - Z[aux] @ beta)
    fa = FoldAssignment(fold_of={int(i): int(f) + 1 for i, f in zip(calib, folds)},
                        K=K, seed=as_path(seed)[0], indices=tuple(int(i) for i in calib))
    return ConformalScoreTable(arm, fa, calib, aux, s, aux_by_fold[:, folds], flags)


def cvplus_pvalues(table: ConformalScoreTable) -> dict[int, float]:
    """``p_j = (1 + #{t : s_t >= s_j^(t)}) / (m + 1)`` for each auxiliary record."""
    m = table.calib_scores.shape[0]
    counts = np.sum(table.calib_scores[None, :] >= table.aux_scores, axis=1)
    pv = (counts + 1.0) / (m + 1.0)
    return {int(j): float(p) for j, p in zip(table.aux_index, pv)}


def conformal_pvalues(dataset: StudyDataset, K: int = DEFAULT_K, seed: SeedLike = 0,
                      columns: Optional[Sequence[str]] = None) -> PValueTable:
    """p-values for both arms; each arm's folds come from its own seed path."""
    p_of, Ks, m, flags = {}, {}, {}, []
    for arm in (0, 1):
        tab = conformal_scores(dataset, arm, K, seed, columns)
        p_of[arm] = cvplus_pvalues(tab)
        Ks[arm] = tab.fold_assignment.K
        m[arm] = tab.calib_index.shape[0]
        flags.extend(f"arm{arm}:{f}" for f in tab.flags)
    return PValueTable(p_of, Ks, as_path(seed), m, tuple(flags))


def conformal_pvalues_kernel(dataset: StudyDataset, K: int = DEFAULT_K, seed: SeedLike = 0,
                             columns: Optional[Sequence[str]] = None) -> NDArray:
    """Same p-values as :func:`conformal_pvalues` through the compiled kernel,
    returned as a row-aligned vector."""
    Z = _shared(dataset, columns)
    Y = np.asarray(dataset.outcome, dtype=float)
    out = np.ones(dataset.n)
    for arm in (0, 1):
        calib = np.flatnonzero(dataset.is_target & (dataset.treatment == arm))
        aux = np.flatnonzero(~dataset.is_target & (dataset.treatment == arm))
        Ka, _ = effective_folds(calib.shape[0], K)
        folds = fold_labels(calib.shape[0], Ka, seed, arm)
        if aux.shape[0]:
            pv, *_ = kernels.conformal(Z, Y, calib, folds, Ka, aux)
            out[aux] = pv
    return out
