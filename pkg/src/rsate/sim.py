"""Monte Carlo engine: the two-region and multi-region data-generating
processes, the true-estimand and signal-ratio oracles, and the replication
runner that aggregates estimator performance into a metrics table."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from rsate.data import CovariateSchema, StudyDataset
from rsate.seeds import STAGE_DGP, STAGE_MC, STAGE_REP, SeedLike, child, rng_for

log = logging.getLogger(__name__)

SCHEMA = CovariateSchema(shared_names=("X1", "X2"), target_only_names=("U",))

_COV = {
    "independent": np.eye(3),
    "correlated": np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.5], [0.5, 0.5, 1.0]]),
}
_MEAN = np.array([0.0, 0.0, 2.0])


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of the two-region generator.

    ``beta0``/``beta1`` are (intercept, X1 coefficient, X2 coefficient);
    ``beta_scale`` multiplies the X coefficients of both arms.  ``eps`` is
    the noise variance of auxiliary outcomes and ``target_noise`` that of
    target outcomes.  With ``constant_effect`` set, both arms follow the
    control-arm model and treatment adds ``constant_effect`` to every
    potential outcome; ``constant_effect=0`` is the sharp null.
    """

    n_target: int = 600
    n_aux: int = 1000
    covariate_scenario: str = "correlated"
    eta1: tuple[float, float] = (0.5, 0.3)
    eta1_offset: float = 0.6
    eta0: tuple[float, float] = (-0.5, -0.2)
    eta0_offset: float = -0.4
    treat_p: float = 0.5
    beta0: tuple[float, float, float] = (0.0, 2.0, 2.0)
    beta1: tuple[float, float, float] = (3.0, 3.0, 3.0)
    beta_scale: float = 1.0
    alpha0: float = 0.5
    alpha1: Optional[float] = None
    eps: float = 0.5
    target_noise: float = 1.0
    b0: float = 6.0
    b1: float = 10.0
    rho: float = 0.5
    bias_arms: str = "both"
    constant_effect: Optional[float] = None

    def __post_init__(self):
        if self.covariate_scenario not in _COV:
            raise ValueError(f"unknown covariate_scenario {self.covariate_scenario!r}")
        if self.bias_arms not in ("both", "control-only"):
            raise ValueError("bias_arms must be 'both' or 'control-only'")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.eps <= 0 or self.target_noise <= 0:
            raise ValueError("noise variances must be positive")
        if not 0.0 < self.treat_p < 1.0:
            raise ValueError("treat_p must lie in (0, 1)")
        if self.n_target < 2 or self.n_aux < 0:
            raise ValueError("invalid sample sizes")
        for name in ("eta1", "eta0", "beta0", "beta1"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    @property
    def alpha1_value(self) -> float:
        return 2.0 * self.alpha0 if self.alpha1 is None else self.alpha1

    @property
    def bias(self) -> tuple[float, float]:
        """Hidden bias per arm (control, treated)."""
        return (self.b0, 0.0 if self.bias_arms == "control-only" else self.b1)

    def coefficients(self, arm: int) -> tuple[float, NDArray, float]:
        """(intercept, X coefficients, U coefficient) of arm ``arm``."""
        if self.constant_effect is not None:
            b = self.beta0
            return (b[0] + arm * self.constant_effect,
                    self.beta_scale * np.array(b[1:]), self.alpha0)
        b = self.beta1 if arm == 1 else self.beta0
        return b[0], self.beta_scale * np.array(b[1:]), (self.alpha1_value if arm else self.alpha0)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DgpConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown DGP parameters: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def sampling_probability(config: DgpConfig, X: NDArray) -> NDArray:
    """``pi(X) = pi1 / (pi1 + pi0)`` for the two-region generator."""
    p1 = 1.0 / (1.0 + np.exp(X @ np.array(config.eta1) + config.eta1_offset))
    p0 = 1.0 / (1.0 + np.exp(X @ np.array(config.eta0) + config.eta0_offset))
    return p1 / (p1 + p0)


def _draw_covariates(rng: np.random.Generator, scenario: str, size: int) -> NDArray:
    return rng.multivariate_normal(_MEAN, _COV[scenario], size=size, method="cholesky")


def _superpopulation(config: DgpConfig, rng: np.random.Generator) -> tuple[NDArray, NDArray]:
    """Draw units, assign regions by ``Bernoulli(pi(X))`` and keep units until
    both region quotas are filled exactly."""
    need = {1: config.n_target, 0: config.n_aux}
    kept: dict[int, list[NDArray]] = {1: [], 0: []}
    got = {1: 0, 0: 0}
    batch = max(256, 2 * (config.n_target + config.n_aux))
    while got[1] < need[1] or got[0] < need[0]:
        W = _draw_covariates(rng, config.covariate_scenario, batch)
        R = rng.random(batch) < sampling_probability(config, W[:, :2])
        for r in (1, 0):
            take = W[R == bool(r)][: need[r] - got[r]]
            kept[r].append(take)
            got[r] += take.shape[0]
    return np.vstack(kept[1]), np.vstack(kept[0])


def _outcomes(config: DgpConfig, W: NDArray, A: NDArray, biased: NDArray,
              noise_var: float, rng: np.random.Generator) -> NDArray:
    X, U = W[:, :2], W[:, 2]
    y = np.empty(W.shape[0])
    noise = rng.standard_normal(W.shape[0]) * math.sqrt(noise_var)
    for a in (0, 1):
        m = A == a
        c, bx, au = config.coefficients(a)
        mean = c + X[m] @ bx
        b = config.bias[a]
        hit = biased[m] & (b != 0.0)
        mean = np.where(hit, mean - b, mean + U[m] * au)
        y[m] = mean + noise[m]
    return y


@dataclass(frozen=True)
class SimulatedTrial:
    dataset: StudyDataset
    biased: NDArray  # bias label of each record's observed arm
    biased_unit: NDArray  # unit-level bias label, independent of arm

    def __iter__(self):
        yield self.dataset
        yield self.biased


def generate_trial(config: DgpConfig, seed: SeedLike) -> SimulatedTrial:
    """Simulate one trial; target rows first, then auxiliary rows."""
    rng = rng_for(seed, STAGE_DGP)
    Wt, We = _superpopulation(config, rng)
    nt, ne = Wt.shape[0], We.shape[0]
    At = (rng.random(nt) < config.treat_p).astype(np.int64)
    Ae = (rng.random(ne) < config.treat_p).astype(np.int64)
    unit_bias = np.zeros(ne, dtype=bool)
    k = int(round(config.rho * ne))
    if k:
        unit_bias[rng.choice(ne, size=k, replace=False)] = True
    Yt = _outcomes(config, Wt, At, np.zeros(nt, dtype=bool), config.target_noise, rng)
    Ye = _outcomes(config, We, Ae, unit_bias, config.eps, rng)
    arm_bias = np.array(config.bias)[Ae] != 0.0
    region = np.concatenate([np.ones(nt, dtype=np.int64), np.zeros(ne, dtype=np.int64)])
    u = np.concatenate([Wt[:, 2], np.full(ne, np.nan)])
    ds = StudyDataset(schema=SCHEMA, region=region, treatment=np.concatenate([At, Ae]),
                      outcome=np.concatenate([Yt, Ye]), x=np.vstack([Wt[:, :2], We[:, :2]]),
                      u=u[:, None])
    biased = np.concatenate([np.zeros(nt, dtype=bool), unit_bias & arm_bias])
    return SimulatedTrial(ds, biased, np.concatenate([np.zeros(nt, dtype=bool), unit_bias]))


def _target_draws(config: DgpConfig, n_mc: int, rng: np.random.Generator) -> NDArray:
    out, got = [], 0
    while got < n_mc:
        W = _draw_covariates(rng, config.covariate_scenario, n_mc)
        keep = W[rng.random(n_mc) < sampling_probability(config, W[:, :2])]
        out.append(keep[: n_mc - got])
        got += out[-1].shape[0]
    return np.vstack(out)


def true_rsate(config: DgpConfig, n_mc: int = 200_000, seed: SeedLike = 0) -> tuple[float, float]:
    """Monte Carlo value of ``E[Y(1) - Y(0) | R = 1]`` and its standard error."""
    if n_mc < 2:
        raise ValueError("n_mc too small")
    W = _target_draws(config, n_mc, rng_for(seed, STAGE_MC))
    c1, b1, a1 = config.coefficients(1)
    c0, b0, a0 = config.coefficients(0)
    d = (c1 - c0) + W[:, :2] @ (b1 - b0) + W[:, 2] * (a1 - a0)
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.shape[0]))


def _sse(y: NDArray, *cols: NDArray) -> float:
    Z = np.column_stack([np.ones(y.shape[0]), *cols])
    beta, *_ = np.linalg.lstsq(Z, y, rcond=None)
    r = y - Z @ beta
    return float(r @ r)


def signal_ratio(config: DgpConfig, n_mc: int = 200_000, seed: SeedLike = 0) -> tuple[float, tuple[str, ...]]:
    """Conditional-R^2 ratio of the shared covariates X against U, measured on
    simulated target-region control outcomes.  Returns ``(inf, flags)`` when
    U carries no signal."""
    if config.alpha0 == 0.0:
        return math.inf, ("u_has_no_signal",)
    rng = rng_for(seed, STAGE_MC, 1)
    W = _target_draws(config, n_mc, rng)
    A = np.zeros(W.shape[0], dtype=np.int64)
    y = _outcomes(config, W, A, np.zeros(W.shape[0], dtype=bool), config.target_noise, rng)
    X1, X2, U = W[:, 0], W[:, 1], W[:, 2]
    sse_xu = _sse(y, X1, X2, U)
    sse_u = _sse(y, U)
    sse_x = _sse(y, X1, X2)
    r2_x_given_u = (sse_u - sse_xu) / sse_u
    r2_u_given_x = (sse_x - sse_xu) / sse_x
    if r2_u_given_x <= 0.0:
        return math.inf, ("u_has_no_signal",)
    return float(r2_x_given_u / r2_u_given_x), ()


# ---------------------------------------------------------------------------
# multi-region generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultiRegionConfig:
    """Target plus several auxiliary regions.

    Region membership is categorical with unnormalised weights
    ``expit(X @ coef + offset)`` per region.  Regions whose weight depends
    on X1 only share the target's law of X2 given X1, so borrowing from them
    on X1 alone remains valid.
    """

    base: DgpConfig = field(default_factory=lambda: DgpConfig(n_target=300))
    n_aux: Mapping[int, int] = field(default_factory=lambda: {2: 400, 3: 400})
    weight_coef: Mapping[int, tuple[float, float]] = field(
        default_factory=lambda: {1: (-0.5, 0.0), 2: (0.5, 0.3), 3: (0.3, 0.0)})
    weight_offset: Mapping[int, float] = field(
        default_factory=lambda: {1: -0.6, 2: -0.4, 3: 0.0})
    rho: Mapping[int, float] = field(default_factory=lambda: {2: 0.0, 3: 0.0})
    shared: Mapping[int, tuple[str, ...]] = field(
        default_factory=lambda: {2: ("X1", "X2"), 3: ("X1",)})

    def labels(self) -> list[int]:
        return sorted(self.n_aux)


def generate_multiregion_trial(config: MultiRegionConfig, seed: SeedLike) -> SimulatedTrial:
    rng = rng_for(seed, STAGE_DGP)
    base = config.base
    regions = [1] + config.labels()
    need = {1: base.n_target, **{r: int(config.n_aux[r]) for r in config.labels()}}
    kept: dict[int, list[NDArray]] = {r: [] for r in regions}
    got = {r: 0 for r in regions}
    batch = 4 * sum(need.values())
    while any(got[r] < need[r] for r in regions):
        W = _draw_covariates(rng, base.covariate_scenario, batch)
        X = W[:, :2]
        wts = np.column_stack([
            1.0 / (1.0 + np.exp(-(X @ np.array(config.weight_coef[r]) + config.weight_offset[r])))
            for r in regions])
        cum = np.cumsum(wts / wts.sum(axis=1, keepdims=True), axis=1)
        pick = (rng.random(batch)[:, None] > cum).sum(axis=1)
        for k, r in enumerate(regions):
            take = W[pick == k][: need[r] - got[r]]
            kept[r].append(take)
            got[r] += take.shape[0]
    parts, flags, regs, arms = [], [], [], []
    ys = []
    for r in regions:
        W = np.vstack(kept[r])
        A = (rng.random(W.shape[0]) < base.treat_p).astype(np.int64)
        bias_unit = np.zeros(W.shape[0], dtype=bool)
        if r != 1:
            k = int(round(config.rho.get(r, 0.0) * W.shape[0]))
            if k:
                bias_unit[rng.choice(W.shape[0], size=k, replace=False)] = True
        noise = base.target_noise if r == 1 else base.eps
        ys.append(_outcomes(base, W, A, bias_unit, noise, rng))
        parts.append(W)
        arms.append(A)
        regs.append(np.full(W.shape[0], r, dtype=np.int64))
        flags.append(bias_unit & (np.array(base.bias)[A] != 0.0))
    W = np.vstack(parts)
    region = np.concatenate(regs)
    u = np.where(region == 1, W[:, 2], np.nan)
    ds = StudyDataset(schema=SCHEMA, region=region, treatment=np.concatenate(arms),
                      outcome=np.concatenate(ys), x=W[:, :2], u=u[:, None])
    biased = np.concatenate(flags)
    return SimulatedTrial(ds, biased, biased)


def multiregion_true_rsate(config: MultiRegionConfig, n_mc: int = 200_000,
                           seed: SeedLike = 0) -> tuple[float, float]:
    """Target-region effect under the multi-region membership law."""
    rng = rng_for(seed, STAGE_MC)
    base = config.base
    regions = [1] + config.labels()
    W = _draw_covariates(rng, base.covariate_scenario, n_mc)
    X = W[:, :2]
    wts = np.column_stack([
        1.0 / (1.0 + np.exp(-(X @ np.array(config.weight_coef[r]) + config.weight_offset[r])))
        for r in regions])
    p1 = wts[:, 0] / wts.sum(axis=1)
    c1, b1, a1 = base.coefficients(1)
    c0, b0, a0 = base.coefficients(0)
    d = (c1 - c0) + X @ (b1 - b0) + W[:, 2] * (a1 - a0)
    # importance-weight the superpopulation draws by target membership
    w = p1 / p1.sum()
    val = float(np.sum(w * d))
    se = float(math.sqrt(np.sum(w**2 * (d - val) ** 2)))
    return val, se


# ---------------------------------------------------------------------------
# replication runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrtSettings:
    B: int = 200
    scheme: str = "complete"
    alpha: float = 0.05
    sided: str = "two"


@dataclass(frozen=True)
class MethodSpec:
    name: str
    csb: Optional[Any] = None  # CsbConfig for CSB methods


@dataclass
class MetricsRow:
    scenario: dict
    method: str
    mse: float
    mse_pct: float
    bias: float
    coverage: float
    rejection: float
    frt_rejection: Optional[float]
    mean_se: float
    emp_sd: float
    n_rep: int
    n_fail: int
    tau_true: float


@dataclass
class MetricsTable:
    rows: list[MetricsRow]
    config: dict
    seed: tuple[int, ...]

    def get(self, method: str, **scenario) -> MetricsRow:
        for r in self.rows:
            if r.method == method and all(r.scenario.get(k) == v for k, v in scenario.items()):
                return r
        raise KeyError((method, scenario))

    def to_csv(self) -> str:
        keys = sorted({k for r in self.rows for k in r.scenario})
        buf = io.StringIO()
        buf.write("# config: " + json.dumps(self.config, sort_keys=True) + "\n")
        buf.write("# seed: " + json.dumps(list(self.seed)) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys + ["method", "mse", "mse_pct", "bias", "coverage", "rejection",
                           "frt_rejection", "mean_se", "emp_sd", "n_rep", "n_fail", "tau_true"])
        for r in self.rows:
            w.writerow([_fmt(r.scenario.get(k)) for k in keys] +
                       [r.method] + [_fmt(v) for v in (r.mse, r.mse_pct, r.bias, r.coverage,
                                                       r.rejection, r.frt_rejection, r.mean_se,
                                                       r.emp_sd)]
                       + [r.n_rep, r.n_fail, _fmt(r.tau_true)])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


@dataclass(frozen=True)
class ReplicateTask:
    scenario_index: int
    rep: int
    dgp: DgpConfig
    methods: tuple[MethodSpec, ...]
    frt: Optional[FrtSettings]
    seed: tuple[int, ...]
    alpha: float


def run_replicate(task: ReplicateTask) -> dict[str, dict]:
    """One replicate: simulate, then apply every method.  Failures are
    recorded per method as ``None`` results."""
    from rsate.methods import run_method

    rep_seed = child(task.seed, STAGE_REP, task.scenario_index, task.rep)
    trial = generate_trial(task.dgp, rep_seed)
    out = {}
    for k, spec in enumerate(task.methods):
        try:
            out[spec.name] = run_method(spec, trial.dataset, rep_seed + (k,), task.alpha, task.frt)
        except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.warning("method %s failed on replicate %d: %s", spec.name, task.rep, exc)
            out[spec.name] = None
    return out


def _aggregate(scenario: dict, methods: Sequence[MethodSpec], results: list[dict],
               tau_true: float, frt_on: bool) -> list[MetricsRow]:
    rows = []
    stats = {}
    for spec in methods:
        ok = [r[spec.name] for r in results if r[spec.name] is not None]
        n_fail = len(results) - len(ok)
        if not ok:
            stats[spec.name] = (math.nan,) * 7 + (n_fail,)
            continue
        tau = np.array([o["tau_hat"] for o in ok])
        lo = np.array([o["ci_lower"] for o in ok])
        hi = np.array([o["ci_upper"] for o in ok])
        rej = np.array([o["pvalue"] < o["alpha"] for o in ok])
        frt = None
        if frt_on:
            fp = [o.get("frt_pvalue") for o in ok]
            frt = float(np.mean([p < o["alpha"] for p, o in zip(fp, ok)]))
        stats[spec.name] = (
            float(np.mean((tau - tau_true) ** 2)), float(np.mean(tau) - tau_true),
            float(np.mean((lo <= tau_true) & (tau_true <= hi))), float(rej.mean()), frt,
            float(np.mean([o["se"] for o in ok])), float(np.std(tau, ddof=1)) if len(ok) > 1 else math.nan,
            n_fail)
    ref = stats.get("NB-AllCov", (math.nan,))[0]
    for spec in methods:
        mse, bias, cov, rej, frt, mse_se, sd, n_fail = stats[spec.name]
        pct = 100.0 * mse / ref if ref and not math.isnan(ref) else math.nan
        if spec.name == "NB-AllCov" and not math.isnan(mse):
            pct = 100.0
        rows.append(MetricsRow(scenario, spec.name, mse, pct, bias, cov, rej, frt, mse_se, sd,
                               len(results), n_fail, tau_true))
    return rows


def run_replications(grid: Sequence[DgpConfig], methods: Sequence[MethodSpec], n_rep: int,
                     frt: Optional[FrtSettings] = None, seed: SeedLike = 0,
                     workers: int = 1, alpha: float = 0.05, n_mc: int = 200_000,
                     checkpoint_dir: Optional[Path] = None,
                     scenario_labels: Optional[Sequence[dict]] = None,
                     progress: bool = False) -> MetricsTable:
    """Run every method on ``n_rep`` simulated trials per scenario.

    Replicate ``r`` of scenario ``s`` draws from seed path
    ``(seed, REP, s, r)`` so tables do not depend on ``workers``.  With
    ``checkpoint_dir``, each finished scenario is saved and reused on rerun.
    """
    if n_rep < 2:
        raise ValueError("n_rep must be at least 2")
    seed = child(seed)
    methods = tuple(methods)
    rows: list[MetricsRow] = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for s, dgp in enumerate(grid):
            label = dict(scenario_labels[s]) if scenario_labels else {}
            label.setdefault("scenario", s)
            ckpt = None if checkpoint_dir is None else Path(checkpoint_dir) / f"scenario_{s}.json"
            if ckpt is not None and ckpt.exists():
                saved = json.loads(ckpt.read_text())
                rows.extend(MetricsRow(**r) for r in saved["rows"])
                continue
            t0 = time.perf_counter()
            tau_true, _ = true_rsate(dgp, n_mc, child(seed, STAGE_MC, s))
            tasks = [ReplicateTask(s, r, dgp, methods, frt, seed, alpha) for r in range(n_rep)]
            if pool is None:
                results = [run_replicate(t) for t in tasks]
            else:
                results = list(pool.map(run_replicate, tasks, chunksize=1))
            new = _aggregate(label, methods, results, tau_true, frt is not None)
            rows.extend(new)
            log.info("scenario %d: %d replicates in %.1fs, failures %s", s, n_rep,
                     time.perf_counter() - t0, {r.method: r.n_fail for r in new})
            if ckpt is not None:
                ckpt.parent.mkdir(parents=True, exist_ok=True)
                ckpt.write_text(json.dumps({"rows": [asdict(r) for r in new]}, sort_keys=True))
    finally:
        if pool is not None:
            pool.shutdown()
    cfg = {"grid": [g.to_dict() for g in grid], "methods": [m.name for m in methods],
           "n_rep": n_rep, "alpha": alpha, "n_mc": n_mc,
           "frt": None if frt is None else asdict(frt)}
    return MetricsTable(rows, cfg, seed)


def replace_config(config: DgpConfig, **changes) -> DgpConfig:
    return replace(config, **changes)
