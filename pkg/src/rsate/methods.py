"""Name-based dispatch over every estimator, shared by the simulation runner
and the command line."""

from __future__ import annotations

from typing import Optional

from rsate.csb import CsbConfig, CsbStatistic, csb_pipeline
from rsate.data import StudyDataset, difference_in_means
from rsate.estimators import ESTIMATORS, DesignPropensity
from rsate.frt import EstimatorStatistic, RandomizationScheme, frt_pvalue
from rsate.results import TauEstimate
from rsate.seeds import SeedLike, as_path

CSB_METHODS = {"CSB-IVW": True, "CSB-Xonly": False}
METHOD_NAMES = ("DiM", *ESTIMATORS, *CSB_METHODS)
SIX_METHODS = ("NB-Xonly", "NB-AllCov", "FB-Xonly", "FB-IVW", "CSB-Xonly", "CSB-IVW")


def check_method(name: str) -> None:
    if name not in METHOD_NAMES:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHOD_NAMES)}")


def csb_config_for(name: str, base: Optional[CsbConfig] = None) -> CsbConfig:
    base = CsbConfig() if base is None else base
    return CsbConfig(**{**base.to_dict(), "grid": base.grid, "use_u": CSB_METHODS[name]})


def estimate(name: str, dataset: StudyDataset, design: DesignPropensity = DesignPropensity(),
             seed: SeedLike = 0, alpha: float = 0.05,
             csb: Optional[CsbConfig] = None) -> TauEstimate:
    check_method(name)
    if name == "DiM":
        return difference_in_means(dataset, alpha)
    if name in CSB_METHODS:
        cfg = csb_config_for(name, csb)
        return csb_pipeline(dataset, design, CsbConfig(**{**cfg.to_dict(), "alpha": alpha}), seed)
    return ESTIMATORS[name](dataset, design, alpha)


def statistic_for(name: str, design: DesignPropensity = DesignPropensity(),
                  seed: SeedLike = 0, csb: Optional[CsbConfig] = None):
    check_method(name)
    if name in CSB_METHODS:
        return CsbStatistic(design, csb_config_for(name, csb), as_path(seed))
    return EstimatorStatistic(name, design)


def run_method(spec, dataset: StudyDataset, seed: SeedLike, alpha: float = 0.05,
               frt=None, design: DesignPropensity = DesignPropensity()) -> dict:
    """Estimate with method ``spec.name`` and, when ``frt`` settings are
    given, add its randomization p-value.  Returns a plain dict."""
    est = estimate(spec.name, dataset, design, seed, alpha, spec.csb)
    out = {"tau_hat": est.tau_hat, "se": est.se, "ci_lower": est.ci_lower,
           "ci_upper": est.ci_upper, "pvalue": est.pvalue, "alpha": alpha,
           "gamma": est.gamma, "borrowed": est.borrowed_count}
    if frt is not None:
        stat = statistic_for(spec.name, design, seed, spec.csb)
        scheme = RandomizationScheme.observed(dataset, frt.scheme)
        res = frt_pvalue(dataset, stat, scheme, frt.B, frt.sided, seed)
        out["frt_pvalue"] = res.pvalue(frt.sided)
        out["frt_t_obs"] = res.t_obs
    return out
