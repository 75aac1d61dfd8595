"""Trial data model, CSV ingestion and validation, nearest-neighbour matching,
and the difference-in-means benchmark."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from rsate.models import DimensionError, PreconditionError
from rsate.results import ArmEstimate, TauEstimate, confidence_interval

log = logging.getLogger(__name__)

TARGET = 1
_MISSING = {"", "na", "nan", "null"}


class DataError(ValueError):
    """Base class for dataset problems."""


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class DataValidationError(DataError):
    pass


@dataclass(frozen=True)
class CovariateSchema:
    shared_names: tuple[str, ...]
    target_only_names: tuple[str, ...] = ()
    region_column: str = "R"
    treatment_column: str = "A"
    outcome_column: str = "Y"

    def __post_init__(self):
        object.__setattr__(self, "shared_names", tuple(self.shared_names))
        object.__setattr__(self, "target_only_names", tuple(self.target_only_names))
        if not self.shared_names:
            raise SchemaError("shared_names must be non-empty")
        names = self.columns
        dupes = sorted({c for c in names if names.count(c) > 1})
        if dupes:
            raise SchemaError(f"duplicate column names: {dupes}")

    @property
    def columns(self) -> list[str]:
        return [self.region_column, self.treatment_column, self.outcome_column,
                *self.shared_names, *self.target_only_names]

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateSchema":
        return cls(
            shared_names=tuple(d["shared"]),
            target_only_names=tuple(d.get("target_only", ())),
            region_column=d.get("region", "R"),
            treatment_column=d.get("treatment", "A"),
            outcome_column=d.get("outcome", "Y"),
        )


@dataclass(frozen=True)
class TrialRecord:
    region: int
    treatment: int
    outcome: float
    x: tuple[float, ...]
    u: Optional[tuple[float, ...]] = None


def _frozen(a: ArrayLike, dtype) -> NDArray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class StudyDataset:
    """Immutable column store of trial records.

    ``u`` holds NaN where the target-only covariates are absent.  ``ids`` are
    stable record identifiers (file row order for loaded data) and survive
    subsetting.
    """

    schema: CovariateSchema
    region: NDArray
    treatment: NDArray
    outcome: NDArray
    x: NDArray
    u: NDArray
    ids: NDArray = field(default=None)
    dropped_rows: int = 0

    def __post_init__(self):
        n = len(self.region)
        object.__setattr__(self, "region", _frozen(self.region, np.int64))
        object.__setattr__(self, "treatment", _frozen(self.treatment, np.int64))
        object.__setattr__(self, "outcome", _frozen(self.outcome, float))
        x = np.asarray(self.x, dtype=float).reshape(n, len(self.schema.shared_names))
        u = np.asarray(self.u, dtype=float).reshape(n, len(self.schema.target_only_names))
        object.__setattr__(self, "x", _frozen(x, float))
        object.__setattr__(self, "u", _frozen(u, float))
        ids = np.arange(n) if self.ids is None else self.ids
        object.__setattr__(self, "ids", _frozen(ids, np.int64))
        for name in ("treatment", "outcome", "ids"):
            if len(getattr(self, name)) != n:
                raise DimensionError(f"{name} has length {len(getattr(self, name))}, expected {n}")

    @classmethod
    def from_arrays(cls, region, treatment, outcome, x, u=None, schema=None,
                    ids=None) -> "StudyDataset":
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if u is None:
            u = np.empty((x.shape[0], 0))
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        if schema is None:
            schema = CovariateSchema(
                shared_names=tuple(f"X{j + 1}" for j in range(x.shape[1])),
                target_only_names=tuple(f"U{j + 1}" if u.shape[1] > 1 else "U"
                                        for j in range(u.shape[1])))
        return cls(schema=schema, region=region, treatment=treatment,
                   outcome=outcome, x=x, u=u, ids=ids)

    @property
    def n(self) -> int:
        return int(self.region.shape[0])

    @property
    def is_target(self) -> NDArray:
        return self.region == TARGET

    @property
    def n_target(self) -> int:
        return int(np.sum(self.is_target))

    @property
    def n_aux(self) -> int:
        return self.n - self.n_target

    @property
    def records(self) -> list[TrialRecord]:
        out = []
        for i in range(self.n):
            ui = self.u[i]
            u = None if (ui.size and np.isnan(ui).any()) else tuple(float(v) for v in ui)
            out.append(TrialRecord(int(self.region[i]), int(self.treatment[i]),
                                   float(self.outcome[i]),
                                   tuple(float(v) for v in self.x[i]), u))
        return out

    def subset(self, rows: ArrayLike) -> "StudyDataset":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return StudyDataset(schema=self.schema, region=self.region[rows],
                            treatment=self.treatment[rows], outcome=self.outcome[rows],
                            x=self.x[rows], u=self.u[rows], ids=self.ids[rows])

    def with_treatment(self, assignment: ArrayLike) -> "StudyDataset":
        a = np.asarray(assignment, dtype=np.int64)
        if a.shape != (self.n,):
            raise DimensionError(f"assignment has shape {a.shape}, expected ({self.n},)")
        return replace(self, treatment=a)

    def with_outcome(self, outcome: ArrayLike) -> "StudyDataset":
        return replace(self, outcome=np.asarray(outcome, dtype=float))

    def shared_columns(self, names: Sequence[str]) -> NDArray:
        idx = [self.schema.shared_names.index(c) for c in names]
        return self.x[:, idx]

    def target_features(self) -> NDArray:
        """(X, U) for every row; U rows are NaN outside the target region."""
        return np.column_stack([self.x, self.u])


def load_dataset(path: str | Path, schema: CovariateSchema) -> StudyDataset:
    """Read a CSV with a header row.  Absent target-only cells may be empty or
    ``NA``; rows with a missing shared covariate are dropped.  Leading lines
    starting with ``#`` are comments."""
    path = Path(path)
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
        skip = 0
        while skip < len(lines) and lines[skip].startswith("#"):
            skip += 1
        reader = csv.DictReader(lines[skip:])
        header = reader.fieldnames or []
        for col in schema.columns:
            if col not in header:
                raise SchemaError(f"column {col!r} missing from {path}")
        regions, treats, ys, xs, us = [], [], [], [], []
        dropped = 0
        for lineno, row in enumerate(reader, start=2 + skip):
            def num(col: str, allow_missing: bool = False) -> float:
                raw = (row.get(col) or "").strip()
                if raw.lower() in _MISSING:
                    if allow_missing:
                        return math.nan
                    raise ParseError(f"row {lineno}: missing value in column {col!r}")
                try:
                    return float(raw)
                except ValueError:
                    raise ParseError(f"row {lineno}: non-numeric value {raw!r} in column {col!r}") from None

            r = num(schema.region_column)
            a = num(schema.treatment_column)
            if r != int(r):
                raise ParseError(f"row {lineno}: region label {r!r} is not an integer")
            if a not in (0.0, 1.0):
                raise ParseError(f"row {lineno}: treatment {a!r} is not 0/1")
            x = [num(c, allow_missing=True) for c in schema.shared_names]
            if any(math.isnan(v) for v in x):
                dropped += 1
                continue
            y = num(schema.outcome_column)
            u = [num(c, allow_missing=True) for c in schema.target_only_names]
            if int(r) == TARGET and any(math.isnan(v) for v in u):
                raise DataValidationError(f"row {lineno}: target-region row lacks target-only covariates")
            regions.append(int(r))
            treats.append(int(a))
            ys.append(y)
            xs.append(x)
            us.append(u)
    if dropped:
        log.warning("dropped %d rows with missing shared covariates from %s", dropped, path)
    n = len(regions)
    ds = StudyDataset(schema=schema, region=regions, treatment=treats, outcome=ys,
                      x=np.array(xs, dtype=float).reshape(n, len(schema.shared_names)),
                      u=np.array(us, dtype=float).reshape(n, len(schema.target_only_names)),
                      dropped_rows=dropped)
    return ds


def save_dataset(dataset: StudyDataset, path: str | Path, comments: Sequence[str] = ()) -> None:
    """Write ``dataset`` as CSV at full ``repr`` precision; absent U is ``NA``.
    Each entry of ``comments`` becomes a leading ``# `` line."""
    s = dataset.schema
    with Path(path).open("w", newline="") as fh:
        for c in comments:
            fh.write("# " + c + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(s.columns)
        for i in range(dataset.n):
            u = ["NA" if math.isnan(v) else repr(float(v)) for v in dataset.u[i]]
            w.writerow([int(dataset.region[i]), int(dataset.treatment[i]),
                        repr(float(dataset.outcome[i])),
                        *(repr(float(v)) for v in dataset.x[i]), *u])


def validate(dataset: StudyDataset) -> list[str]:
    """Return a list of invariant violations; empty when the dataset is valid."""
    problems: list[str] = []
    tgt = dataset.is_target
    bad_a = np.flatnonzero(~np.isin(dataset.treatment, (0, 1)))
    for i in bad_a:
        problems.append(f"row {i}: treatment {dataset.treatment[i]} not in {{0,1}}")
    for i in np.flatnonzero(np.isnan(dataset.x).any(axis=1)):
        problems.append(f"row {i}: missing shared covariate")
    for i in np.flatnonzero(~np.isfinite(dataset.outcome)):
        problems.append(f"row {i}: non-finite outcome")
    if dataset.u.shape[1]:
        for i in np.flatnonzero(tgt & np.isnan(dataset.u).any(axis=1)):
            problems.append(f"row {i}: target-region row lacks target-only covariates")
    if dataset.n_target < 2:
        problems.append(f"target region has {dataset.n_target} rows, need at least 2")
    if not np.any(tgt & (dataset.treatment == 0)):
        problems.append("no target controls")
    if not np.any(tgt & (dataset.treatment == 1)):
        problems.append("no target treated")
    if len(np.unique(dataset.ids)) != dataset.n:
        problems.append("record ids are not unique")
    return problems


def sampling_score(dataset: StudyDataset, columns: Sequence[str] | None = None) -> NDArray:
    """Linear predictor of the logistic model for target membership on X."""
    from rsate.models import fit_logistic, linear_predictor

    X = dataset.x if columns is None else dataset.shared_columns(columns)
    fit = fit_logistic(X, dataset.is_target.astype(float))
    return linear_predictor(fit, X)


def nn_match(dataset: StudyDataset, ratio: int = 4,
             score: ArrayLike | None = None) -> StudyDataset:
    """Greedy 1:``ratio`` nearest-neighbour matching on a scalar score.

    Auxiliary records outside the target score range are discarded first.
    Target records are visited in dataset order and each takes up to
    ``ratio`` unused same-arm auxiliary records, nearest first, ties to the
    lower index.  All target records are kept.
    """
    if ratio < 1:
        raise PreconditionError("ratio must be a positive integer")
    s = sampling_score(dataset) if score is None else np.asarray(score, dtype=float)
    if s.shape != (dataset.n,):
        raise DimensionError(f"score has length {s.shape[0] if s.ndim else 0}, expected {dataset.n}")
    tgt = dataset.is_target
    lo, hi = s[tgt].min(), s[tgt].max()
    in_support = (~tgt) & (s >= lo) & (s <= hi)
    keep = tgt.copy()
    for arm in (0, 1):
        pool = np.flatnonzero(in_support & (dataset.treatment == arm))
        if pool.size == 0 and np.any(tgt & (dataset.treatment == arm)):
            raise PreconditionError(f"no auxiliary records available for arm {arm}")
        used = np.zeros(pool.size, dtype=bool)
        for t in np.flatnonzero(tgt & (dataset.treatment == arm)):
            free = np.flatnonzero(~used)
            if free.size == 0:
                break
            d = np.abs(s[pool[free]] - s[t])
            # lexsort: last key primary; pool is ascending so index breaks ties
            order = np.lexsort((pool[free], d))[:ratio]
            used[free[order]] = True
        keep[pool[used]] = True
    return dataset.subset(keep)


def difference_in_means(dataset: StudyDataset, alpha: float = 0.05) -> TauEstimate:
    """Unadjusted target-region contrast with the unpooled two-sample SE."""
    tgt = dataset.is_target
    n = dataset.n
    flags: list[str] = []
    arms = {}
    var = 0.0
    for a in (0, 1):
        m = tgt & (dataset.treatment == a)
        k = int(m.sum())
        if k == 0:
            raise PreconditionError(f"target arm {a} is empty")
        y = dataset.outcome[m]
        contrib = np.where(m, dataset.outcome * n / k, 0.0)
        arms[a] = ArmEstimate(a, float(y.mean()), contrib)
        if k > 1:
            var += float(np.var(y, ddof=1)) / k
        else:
            flags.append(f"single_row_arm_{a}")
    tau = arms[1].theta_hat - arms[0].theta_hat
    se = math.sqrt(var)
    lo, hi = confidence_interval(tau, var * n, n, alpha)
    return TauEstimate("DiM", tau, arms[1], arms[0], se, lo, hi, alpha=alpha,
                       n=n, row_ids=dataset.ids, flags=tuple(flags))


def read_schema_columns(path: str | Path) -> list[str]:
    with Path(path).open(newline="") as fh:
        return next(csv.reader(fh))


def concat(datasets: Iterable[StudyDataset]) -> StudyDataset:
    ds = list(datasets)
    return StudyDataset(schema=ds[0].schema,
                        region=np.concatenate([d.region for d in ds]),
                        treatment=np.concatenate([d.treatment for d in ds]),
                        outcome=np.concatenate([d.outcome for d in ds]),
                        x=np.vstack([d.x for d in ds]), u=np.vstack([d.u for d in ds]))
