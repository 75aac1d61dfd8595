"""Command-line entry point.

Usage::

    rsate <command> --config run.json [--seed S] [--workers W] [--out DIR]

Commands are ``estimate``, ``frt``, ``simulate``, ``match`` and ``pvalues``.
The config file is JSON; command-line flags override its values.  Recognised
top-level keys::

    seed          master seed (mandatory, here or via --seed)
    data          {"path": ..., "schema": {"shared": [...], "target_only": [...],
                   "region": ..., "treatment": ..., "outcome": ...}}
    design        {"kind": "constant", "p": 0.5} or
                  {"kind": "stratified", "by_region": {"1": 0.5, ...}}
    methods       list of method names (see ``rsate.methods.METHOD_NAMES``),
                  plus "FB-IVW-multi", "CSB-IVW-multi", "CSB-Xonly-multi"
    alpha         nominal level, default 0.05
    conformal     {"K": 10}
    csb           {"grid": [...], "L": 100, "clip_eps": 0.01}
    frt           {"B": 1000, "sided": "two", "scheme": "complete",
                   "statistics": [...], "exhaustive": false}
    multiregion   {"2": ["X1", "X2"], "3": ["X1"]}
    match         {"ratio": 4}
    simulation    {"base": {DgpConfig fields}, "grid": [{overrides}, ...],
                   "n_rep": 100, "methods": [...], "n_mc": 200000,
                   "frt": null or {"B": ..., "sided": ..., "scheme": ...}}
    output        output directory, default "."

Seed paths: CSB methods, conformal tables and the FRT all use the master seed
path directly; FRT draw ``b`` uses ``(seed, 3, b)``; simulation replicate
``r`` of scenario ``s`` uses ``(seed, 6, s, r)``; multi-region CSB uses
``(seed, r)`` for auxiliary region ``r``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 anything else.  The worker count defaults to ``$RSATE_WORKERS``
(else 1); results do not depend on it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from rsate.conformal import DEFAULT_K, conformal_pvalues
from rsate.csb import CsbConfig
from rsate.data import CovariateSchema, DataError, StudyDataset, load_dataset, nn_match, save_dataset, validate
from rsate.estimators import DesignPropensity
from rsate.frt import RandomizationScheme, frt_pvalue
from rsate.methods import CSB_METHODS, METHOD_NAMES, SIX_METHODS, csb_config_for, estimate, statistic_for
from rsate.models import DimensionError, PreconditionError
from rsate.multiregion import RegionCovariateMap, estimate_fb_ivw_multi, select_by_region
from rsate.sim import DgpConfig, FrtSettings, MethodSpec, run_replications

log = logging.getLogger("rsate")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

MULTI_METHODS = ("FB-IVW-multi", "CSB-IVW-multi", "CSB-Xonly-multi")
COMMANDS = ("estimate", "frt", "simulate", "match", "pvalues")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def read_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path!r} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must contain a JSON object")
    return cfg


def resolve_config(cfg: dict, args: argparse.Namespace) -> dict:
    """Merge flags into ``cfg``, fill defaults, and validate what ``args.command``
    needs.  The result is JSON-serialisable and fully determines the run."""
    cfg = json.loads(json.dumps(cfg))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if "seed" not in cfg:
        raise ConfigError("a master seed is required (config key 'seed' or --seed)")
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if args.data is not None:
        cfg.setdefault("data", {})["path"] = args.data
    if args.methods is not None:
        cfg["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if args.B is not None:
        cfg.setdefault("frt", {})["B"] = args.B
    if args.out is not None:
        cfg["output"] = args.out
    cfg.setdefault("output", ".")
    cfg.setdefault("alpha", 0.05)
    alpha = cfg["alpha"]
    if not isinstance(alpha, (int, float)) or not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    cfg["design"] = design_from(cfg.get("design", {})).to_dict()
    cfg["conformal"] = {"K": int(cfg.get("conformal", {}).get("K", DEFAULT_K))}
    cfg["csb"] = csb_from(cfg).to_dict()
    cmd = args.command
    if cmd in ("estimate", "frt", "match", "pvalues"):
        _check_data(cfg)
    if cmd == "estimate":
        cfg["methods"] = _check_methods(cfg.get("methods", list(SIX_METHODS)), allow_multi=True)
        if any(m in MULTI_METHODS for m in cfg["methods"]) and "multiregion" not in cfg:
            raise ConfigError("multi-region methods need a 'multiregion' map")
    if cmd == "frt":
        frt = dict(cfg.get("frt", {}))
        frt.setdefault("B", 1000)
        frt.setdefault("sided", "two")
        frt.setdefault("scheme", "complete")
        frt.setdefault("exhaustive", False)
        frt["statistics"] = _check_methods(frt.get("statistics", ["CSB-IVW"]), allow_multi=False)
        _check_frt(frt)
        cfg["frt"] = frt
    if cmd == "match":
        ratio = cfg.setdefault("match", {}).setdefault("ratio", 4)
        if not isinstance(ratio, int) or ratio < 1:
            raise ConfigError("match.ratio must be a positive integer")
    if cmd == "simulate":
        cfg["simulation"] = _check_simulation(cfg.get("simulation"))
    if "multiregion" in cfg:
        try:
            RegionCovariateMap.from_dict(cfg["multiregion"])
        except (ValueError, TypeError, AttributeError) as exc:
            raise ConfigError(f"invalid multiregion map: {exc}") from None
    return cfg


def design_from(d: dict) -> DesignPropensity:
    try:
        return DesignPropensity.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid design: {exc}") from None


def csb_from(cfg: dict) -> CsbConfig:
    c = dict(cfg.get("csb", {}))
    c.pop("use_u", None)
    c["K"] = cfg.get("conformal", {}).get("K", DEFAULT_K)
    c["alpha"] = cfg.get("alpha", 0.05)
    try:
        return CsbConfig(**c)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid csb block: {exc}") from None


def _check_data(cfg: dict) -> None:
    data = cfg.get("data")
    if not isinstance(data, dict) or "path" not in data:
        raise ConfigError("data.path is required (config key or --data)")
    try:
        data["schema"] = _schema_dict(CovariateSchema.from_dict(data.get("schema", {})))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid data.schema: {exc}") from None


def _schema_dict(s: CovariateSchema) -> dict:
    return {"shared": list(s.shared_names), "target_only": list(s.target_only_names),
            "region": s.region_column, "treatment": s.treatment_column,
            "outcome": s.outcome_column}


def _check_methods(names: Any, allow_multi: bool) -> list[str]:
    if not isinstance(names, list) or not names:
        raise ConfigError("method list must be a non-empty list of names")
    known = METHOD_NAMES + (MULTI_METHODS if allow_multi else ())
    bad = [m for m in names if m not in known]
    if bad:
        raise ConfigError(f"unknown method(s) {', '.join(map(repr, bad))}; "
                          f"choose from {', '.join(known)}")
    return list(names)


def _check_frt(frt: dict) -> None:
    B = frt["B"]
    if not isinstance(B, int) or isinstance(B, bool) or B < 1:
        raise ConfigError("frt.B must be a positive integer")
    if frt["sided"] not in ("one", "two"):
        raise ConfigError("frt.sided must be 'one' or 'two'")
    if frt["scheme"] not in ("bernoulli", "complete", "stratified-complete"):
        raise ConfigError("frt.scheme must be 'bernoulli', 'complete' or 'stratified-complete'")
    if frt["scheme"] == "stratified-complete" and "strata_column" not in frt:
        raise ConfigError("stratified-complete needs frt.strata_column (a shared covariate)")


def _check_simulation(sim: Any) -> dict:
    if not isinstance(sim, dict):
        raise ConfigError("simulate needs a 'simulation' block")
    sim = dict(sim)
    base = sim.get("base", {})
    grid = sim.get("grid", [{}])
    if not isinstance(grid, list) or not grid:
        raise ConfigError("simulation.grid must be a non-empty list of parameter overrides")
    try:
        for g in grid:
            DgpConfig.from_dict({**base, **g})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid simulation scenario: {exc}") from None
    sim["base"], sim["grid"] = base, grid
    sim["methods"] = _check_methods(sim.get("methods", list(SIX_METHODS)), allow_multi=False)
    n_rep = sim.setdefault("n_rep", 100)
    if not isinstance(n_rep, int) or n_rep < 2:
        raise ConfigError("simulation.n_rep must be an integer >= 2")
    sim.setdefault("n_mc", 200_000)
    frt = sim.get("frt")
    if frt is not None:
        frt = {"B": 200, "sided": "two", "scheme": "complete", **frt}
        _check_frt(frt)
    sim["frt"] = frt
    return sim


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _public(cfg: dict) -> dict:
    """Config as recorded in output files; the output directory is left out
    so identical runs written to different places stay byte-identical."""
    return {k: v for k, v in cfg.items() if k != "output"}


def _header(cfg: dict) -> list[str]:
    return ["config: " + json.dumps(_public(cfg), sort_keys=True), "seed: " + json.dumps([cfg["seed"]])]


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)
    return path


def _load(cfg: dict) -> StudyDataset:
    data = cfg["data"]
    ds = load_dataset(data["path"], CovariateSchema.from_dict(data["schema"]))
    problems = validate(ds)
    if problems:
        raise DataError("; ".join(problems))
    return ds


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_estimate(cfg: dict, workers: int) -> list[Path]:
    """One record per method in ``estimate.json``; CSB runs also write the
    conformal p-value table they used."""
    ds = _load(cfg)
    design = DesignPropensity.from_dict(cfg["design"])
    csb = csb_from(cfg)
    seed = cfg["seed"]
    records = []
    for name in cfg["methods"]:
        if name == "FB-IVW-multi":
            mapping = RegionCovariateMap.from_dict(cfg["multiregion"])
            est = estimate_fb_ivw_multi(ds, design, mapping, cfg["alpha"])
        elif name in ("CSB-IVW-multi", "CSB-Xonly-multi"):
            mapping = RegionCovariateMap.from_dict(cfg["multiregion"])
            est = select_by_region(ds, design, mapping, csb_config_for(name[:-6], csb), seed)
        else:
            est = estimate(name, ds, design, seed, cfg["alpha"], csb)
        rec = est.to_record(include_indices=True)
        rec.pop("kernel_backend", None)
        records.append(rec)
    out = Path(cfg["output"])
    paths = [_write(out / "estimate.json", _dump({"config": _public(cfg), "seed": [seed], "records": records}))]
    if any(m in CSB_METHODS for m in cfg["methods"]):
        paths.append(_write_pvalues(ds, cfg))
    return paths


def _write_pvalues(ds: StudyDataset, cfg: dict) -> Path:
    table = conformal_pvalues(ds, cfg["conformal"]["K"], cfg["seed"])
    lines = "".join("# " + h + "\n" for h in _header(cfg))
    return _write(Path(cfg["output"]) / "pvalues.csv", lines + table.to_csv())


def cmd_pvalues(cfg: dict, workers: int) -> list[Path]:
    return [_write_pvalues(_load(cfg), cfg)]


def cmd_frt(cfg: dict, workers: int) -> list[Path]:
    """FRT and asymptotic p-values side by side for each statistic."""
    ds = _load(cfg)
    design = DesignPropensity.from_dict(cfg["design"])
    csb = csb_from(cfg)
    frt = cfg["frt"]
    seed = cfg["seed"]
    strata = None
    if frt["scheme"] == "stratified-complete":
        strata = ds.shared_columns([frt["strata_column"]])[ds.is_target, 0].astype(np.int64)
    p1 = float(np.mean(ds.treatment[ds.is_target]))
    scheme = RandomizationScheme.observed(ds, frt["scheme"], strata, p1)
    records = []
    for name in frt["statistics"]:
        est = estimate(name, ds, design, seed, cfg["alpha"], csb)
        stat = statistic_for(name, design, seed, csb)
        res = frt_pvalue(ds, stat, scheme, frt["B"], frt["sided"], seed, workers,
                         exhaustive=frt["exhaustive"])
        rec = res.to_record()
        rec.update({"method": name, "tau_hat": est.tau_hat, "se": est.se,
                    "asymptotic_pvalue": est.pvalue, "frt_pvalue": res.pvalue(frt["sided"])})
        records.append(rec)
    return [_write(Path(cfg["output"]) / "frt.json",
                   _dump({"config": _public(cfg), "seed": [seed], "records": records}))]


def cmd_match(cfg: dict, workers: int) -> list[Path]:
    """Nearest-neighbour matched subsample on the sampling score."""
    ds = _load(cfg)
    matched = nn_match(ds, cfg["match"]["ratio"])
    path = Path(cfg["output"]) / "matched.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(matched, path, _header(cfg))
    log.info("wrote %s (%d of %d records)", path, matched.n, ds.n)
    return [path]


def cmd_simulate(cfg: dict, workers: int, resume: bool = False) -> list[Path]:
    """Monte Carlo table over the scenario grid.  Finished scenarios are
    checkpointed under ``checkpoints/<config hash>``; ``--resume`` reuses
    them, otherwise they are discarded first."""
    sim = cfg["simulation"]
    grid = [DgpConfig.from_dict({**sim["base"], **g}) for g in sim["grid"]]
    csb = csb_from(cfg)
    methods = [MethodSpec(m, csb_config_for(m, csb) if m in CSB_METHODS else None)
               for m in sim["methods"]]
    frt = None if sim["frt"] is None else FrtSettings(
        B=sim["frt"]["B"], scheme=sim["frt"]["scheme"], alpha=cfg["alpha"], sided=sim["frt"]["sided"])
    out = Path(cfg["output"])
    key = hashlib.sha256(json.dumps(_public(cfg), sort_keys=True).encode()).hexdigest()[:16]
    ckpt = out / "checkpoints" / key
    if ckpt.exists() and not resume:
        shutil.rmtree(ckpt)
    labels = [{"scenario": s, **{k: (json.dumps(v) if isinstance(v, list) else v) for k, v in g.items()}}
              for s, g in enumerate(sim["grid"])]
    table = run_replications(grid, methods, sim["n_rep"], frt, cfg["seed"], workers, cfg["alpha"],
                             sim["n_mc"], ckpt, labels)
    table.config = _public(cfg)
    return [_write(out / "metrics.csv", table.to_csv())]


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsate", description="Region-specific treatment effect "
                                "estimation with conformal selective borrowing.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default $RSATE_WORKERS or 1)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--data", help="dataset CSV (overrides config)")
    p.add_argument("--methods", help="comma-separated method list (overrides config)")
    p.add_argument("--B", type=int, help="FRT draws (overrides config)")
    p.add_argument("--resume", action="store_true", help="reuse simulation checkpoints")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _workers(flag: Optional[int]) -> int:
    if flag is not None:
        w = flag
    else:
        env = os.environ.get("RSATE_WORKERS", "1")
        try:
            w = int(env)
        except ValueError:
            raise ConfigError(f"RSATE_WORKERS={env!r} is not an integer") from None
    if w < 1:
        raise ConfigError("worker count must be at least 1")
    return w


def run(args: argparse.Namespace) -> list[Path]:
    cfg = resolve_config(read_config(args.config), args)
    workers = _workers(args.workers)
    if args.command == "simulate":
        return cmd_simulate(cfg, workers, args.resume)
    return {"estimate": cmd_estimate, "frt": cmd_frt, "match": cmd_match,
            "pvalues": cmd_pvalues}[args.command](cfg, workers)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, PreconditionError, DimensionError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
