"""Conditional Fisher randomization test for the target-region sharp null.

Auxiliary assignments stay fixed; only target assignments are redrawn from
the design.  Observed outcomes are reused unchanged, which is valid because
the sharp null makes them invariant to the target assignment.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from rsate.data import StudyDataset, difference_in_means
from rsate.estimators import ESTIMATORS, DesignPropensity
from rsate.models import PreconditionError
from rsate.seeds import STAGE_FRT, SeedLike, as_path, rng_for

log = logging.getLogger(__name__)

EXHAUSTIVE_CAP = 20


@dataclass(frozen=True)
class RandomizationScheme:
    """Law of the target assignment vector.

    ``bernoulli`` draws each target record independently with probability
    ``p``; ``complete`` fixes ``n1`` treated target records;
    ``stratified-complete`` fixes ``counts[s]`` treated records within each
    stratum ``s`` given by ``strata`` (one label per target record, in
    dataset order).
    """

    kind: str = "complete"
    p: float = 0.5
    n1: Optional[int] = None
    strata: Optional[tuple[int, ...]] = None
    counts: Optional[Mapping[int, int]] = None

    def __post_init__(self):
        if self.kind not in ("bernoulli", "complete", "stratified-complete"):
            raise ValueError(f"unknown randomization scheme {self.kind!r}")
        if self.kind == "bernoulli" and not 0.0 < self.p < 1.0:
            raise ValueError("bernoulli probability must lie in (0, 1)")
        if self.kind == "stratified-complete" and (self.strata is None or self.counts is None):
            raise ValueError("stratified-complete needs strata and counts")

    @classmethod
    def observed(cls, dataset: StudyDataset, kind: str = "complete",
                 strata: Optional[Sequence[int]] = None, p: float = 0.5) -> "RandomizationScheme":
        """Scheme matching the observed target arm sizes."""
        tgt = dataset.is_target
        A = dataset.treatment[tgt]
        if kind == "complete":
            return cls("complete", n1=int(A.sum()))
        if kind == "bernoulli":
            return cls("bernoulli", p=p)
        if strata is None:
            raise ValueError("stratified-complete needs strata")
        s = np.asarray(strata)
        counts = {int(k): int(A[s == k].sum()) for k in np.unique(s)}
        return cls("stratified-complete", strata=tuple(int(v) for v in s), counts=counts)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind == "bernoulli":
            d["p"] = self.p
        if self.kind == "complete":
            d["n1"] = self.n1
        if self.kind == "stratified-complete":
            d["counts"] = {str(k): v for k, v in sorted(self.counts.items())}
        return d


def _check(dataset: StudyDataset, scheme: RandomizationScheme) -> NDArray:
    tgt = np.flatnonzero(dataset.is_target)
    m = tgt.shape[0]
    if scheme.kind == "complete":
        n1 = scheme.n1 if scheme.n1 is not None else int(dataset.treatment[tgt].sum())
        if not 0 <= n1 <= m:
            raise PreconditionError(f"cannot treat {n1} of {m} target records")
    if scheme.kind == "stratified-complete":
        s = np.asarray(scheme.strata)
        if s.shape[0] != m:
            raise PreconditionError("strata must label every target record")
        for k, c in scheme.counts.items():
            size = int(np.sum(s == k))
            if not 0 <= c <= size:
                raise PreconditionError(f"stratum {k}: cannot treat {c} of {size} records")
        missing = set(np.unique(s).tolist()) - set(scheme.counts)
        if missing:
            raise PreconditionError(f"no treated count for strata {sorted(missing)}")
    return tgt


def _draw(dataset: StudyDataset, scheme: RandomizationScheme, tgt: NDArray,
          rng: np.random.Generator) -> NDArray:
    A = np.array(dataset.treatment, dtype=np.int64)
    m = tgt.shape[0]
    if scheme.kind == "bernoulli":
        A[tgt] = rng.random(m) < scheme.p
    elif scheme.kind == "complete":
        n1 = scheme.n1 if scheme.n1 is not None else int(dataset.treatment[tgt].sum())
        z = np.zeros(m, dtype=np.int64)
        z[rng.permutation(m)[:n1]] = 1
        A[tgt] = z
    else:
        s = np.asarray(scheme.strata)
        z = np.zeros(m, dtype=np.int64)
        for k in sorted(scheme.counts):
            members = np.flatnonzero(s == k)
            z[members[rng.permutation(members.shape[0])[: scheme.counts[k]]]] = 1
        A[tgt] = z
    return A


def rerandomize_target(dataset: StudyDataset, scheme: RandomizationScheme,
                       seed: SeedLike) -> NDArray:
    """One assignment vector: auxiliary entries as observed, target entries
    drawn from ``scheme``."""
    tgt = _check(dataset, scheme)
    return _draw(dataset, scheme, tgt, rng_for(seed))


def enumerate_assignments(dataset: StudyDataset, scheme: RandomizationScheme,
                          cap: int = EXHAUSTIVE_CAP) -> list[tuple[NDArray, float]]:
    """Every reachable assignment with its probability under ``scheme``."""
    tgt = _check(dataset, scheme)
    m = tgt.shape[0]
    base = np.array(dataset.treatment, dtype=np.int64)
    out: list[tuple[NDArray, float]] = []

    def emit(z: Sequence[int], prob: float):
        A = base.copy()
        A[tgt] = z
        out.append((A, prob))

    if scheme.kind == "bernoulli":
        count = 2**m
        if count > cap:
            raise PreconditionError(f"{count} assignments exceed the cap of {cap}")
        for z in itertools.product((0, 1), repeat=m):
            k = sum(z)
            emit(z, scheme.p**k * (1 - scheme.p) ** (m - k))
    elif scheme.kind == "complete":
        n1 = scheme.n1 if scheme.n1 is not None else int(base[tgt].sum())
        count = math.comb(m, n1)
        if count > cap:
            raise PreconditionError(f"{count} assignments exceed the cap of {cap}")
        for ones in itertools.combinations(range(m), n1):
            z = np.zeros(m, dtype=np.int64)
            z[list(ones)] = 1
            emit(z, 1.0 / count)
    else:
        s = np.asarray(scheme.strata)
        keys = sorted(scheme.counts)
        members = [np.flatnonzero(s == k) for k in keys]
        count = math.prod(math.comb(len(mb), scheme.counts[k]) for k, mb in zip(keys, members))
        if count > cap:
            raise PreconditionError(f"{count} assignments exceed the cap of {cap}")
        choices = [itertools.combinations(mb.tolist(), scheme.counts[k]) for k, mb in zip(keys, members)]
        for combo in itertools.product(*[list(c) for c in choices]):
            z = np.zeros(m, dtype=np.int64)
            for ones in combo:
                z[list(ones)] = 1
            emit(z, 1.0 / count)
    return out


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


class DimStatistic:
    """Target-region difference in means."""

    tag = "DiM"
    keyed = False

    def __call__(self, dataset: StudyDataset, assignment: NDArray) -> float:
        tgt = dataset.is_target
        y = dataset.outcome[tgt]
        a = np.asarray(assignment)[tgt]
        if a.min() == a.max():
            raise PreconditionError("assignment leaves a target arm empty")
        return float(y[a == 1].mean() - y[a == 0].mean())


@dataclass
class EstimatorStatistic:
    """Point estimate of a named estimator under the given assignment."""

    method: str
    design: DesignPropensity = field(default_factory=DesignPropensity)
    keyed = False

    def __post_init__(self):
        if self.method not in ESTIMATORS and self.method != "DiM":
            raise ValueError(f"unknown estimator {self.method!r}")

    @property
    def tag(self) -> str:
        return self.method

    def __call__(self, dataset: StudyDataset, assignment: NDArray) -> float:
        ds = dataset.with_treatment(assignment)
        if self.method == "DiM":
            return difference_in_means(ds).tau_hat
        return ESTIMATORS[self.method](ds, self.design).tau_hat


# ---------------------------------------------------------------------------
# test
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrtResult:
    t_obs: float
    draws: NDArray
    p_two_sided: float
    p_one_sided: float
    B: int
    seed: tuple[int, ...]
    statistic_tag: str
    exhaustive: bool = False
    n_failed: int = 0
    flags: tuple[str, ...] = ()

    def pvalue(self, sided: str = "two") -> float:
        if sided not in ("one", "two"):
            raise ValueError("sided must be 'one' or 'two'")
        return self.p_two_sided if sided == "two" else self.p_one_sided

    def to_record(self, include_draws: bool = False) -> dict:
        rec = {"statistic": self.statistic_tag, "t_obs": self.t_obs, "B": self.B,
               "p_two_sided": self.p_two_sided, "p_one_sided": self.p_one_sided,
               "seed": list(self.seed), "exhaustive": self.exhaustive,
               "n_failed": self.n_failed, "flags": list(self.flags)}
        if include_draws:
            rec["draws"] = [float(v) if math.isfinite(v) else None for v in self.draws]
        return rec


def _evaluate(statistic: Callable, dataset: StudyDataset, A: NDArray, key: int) -> float:
    if getattr(statistic, "keyed", False):
        return float(statistic(dataset, A, key))
    return float(statistic(dataset, A))


def _safe_evaluate(statistic, dataset, A, key) -> tuple[float, bool]:
    try:
        v = _evaluate(statistic, dataset, A, key)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.debug("statistic failed on draw %d: %s", key, exc)
        return math.inf, True
    if not math.isfinite(v):
        return math.inf, True
    return v, False


def _draw_chunk(args) -> list[tuple[float, bool]]:
    dataset, statistic, scheme, seed, keys = args
    tgt = _check(dataset, scheme)
    out = []
    for b in keys:
        A = _draw(dataset, scheme, tgt, rng_for(seed, STAGE_FRT, b))
        out.append(_safe_evaluate(statistic, dataset, A, b))
    return out


def _chunks(keys: list[int], n: int) -> list[list[int]]:
    size = max(1, math.ceil(len(keys) / n))
    return [keys[i:i + size] for i in range(0, len(keys), size)]


def frt_pvalue(dataset: StudyDataset, statistic: Callable, scheme: Optional[RandomizationScheme] = None,
               B: int = 1000, sided: str = "two", seed: SeedLike = 0, workers: int = 1,
               exhaustive: bool = False, cap: int = EXHAUSTIVE_CAP) -> FrtResult:
    """Randomization p-values for the sharp null in the target region.

    Monte Carlo mode draws assignment ``b = 1..B`` from seed path
    ``(seed, FRT, b)`` and reports add-one p-values.  Exhaustive mode
    evaluates every reachable assignment and reports the exact
    probability-weighted p-values; ``B`` is then the number of assignments.

    A statistic that fails on a draw contributes ``+inf`` (counted as at
    least as extreme) and the result is flagged.  Statistics with a ``keyed``
    attribute receive the draw index as a third argument (0 for the observed
    assignment).
    """
    if sided not in ("one", "two"):
        raise ValueError("sided must be 'one' or 'two'")
    if scheme is None:
        scheme = RandomizationScheme.observed(dataset)
    path = as_path(seed)
    tag = getattr(statistic, "tag", getattr(statistic, "__name__", "statistic"))
    t_obs = _evaluate(statistic, dataset, np.asarray(dataset.treatment), 0)
    if not math.isfinite(t_obs):
        raise FloatingPointError("observed statistic is not finite")
    flags: list[str] = []
    if exhaustive:
        table = enumerate_assignments(dataset, scheme, cap)
        vals, failed, probs = [], 0, []
        for k, (A, prob) in enumerate(table, start=1):
            v, bad = _safe_evaluate(statistic, dataset, A, k)
            vals.append(v)
            failed += bad
            probs.append(prob)
        draws = np.array(vals)
        pr = np.array(probs)
        two, one = np.abs(draws) >= abs(t_obs), draws >= t_obs
        if np.all(pr == pr[0]):
            # equally likely assignments: exact rational p-values
            p_two, p_one = two.sum() / pr.shape[0], one.sum() / pr.shape[0]
        else:
            p_two, p_one = float(np.sum(pr[two])), float(np.sum(pr[one]))
        n_draw = len(table)
    else:
        if B < 1:
            raise ValueError("B must be at least 1")
        _check(dataset, scheme)
        keys = list(range(1, B + 1))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(_draw_chunk, [(dataset, statistic, scheme, path, ks)
                                                    for ks in _chunks(keys, 4 * workers)]))
            res = [r for part in parts for r in part]
        else:
            res = _draw_chunk((dataset, statistic, scheme, path, keys))
        draws = np.array([v for v, _ in res])
        failed = sum(bad for _, bad in res)
        p_two = (1.0 + np.sum(np.abs(draws) >= abs(t_obs))) / (B + 1.0)
        p_one = (1.0 + np.sum(draws >= t_obs)) / (B + 1.0)
        n_draw = B
    if failed:
        flags.append(f"{failed}_draws_failed")
    return FrtResult(float(t_obs), draws, float(min(p_two, 1.0)), float(min(p_one, 1.0)),
                     n_draw, path, tag, exhaustive, int(failed), tuple(flags))
