"""Command-line entry point for batch estimation, simulation, diagnostics.

Subcommands: `simulate`, `estimate rorr|coarsened-rorr|aipw`, `diagnose`.
Configuration comes from an optional JSON file with flat dotted keys
(e.g. "learner.rounds"); command-line flags mirror the keys one-to-one
and override the file.  Reports are JSON with sorted keys; the only
non-deterministic field is `timestamp`, so identical (config, seed)
runs are byte-identical apart from that line.

Exit codes: 1 argument/config validation, 2 data error, 3 numeric or
degeneracy error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import coarsen, diagnostics, simlab
from .dataset import ColumnSchema, load_csv, make_folds, standardize
from .errors import ConfigError, DataError, EstimationError
from .nuisance import LearnerSpec, cross_fit, fit_insample
from .rorr import rorr_pipeline

_DEFAULTS = {
    "seed": 0,
    "folds": 5,
    "bins": None,            # default: coarsen.choose_k(n)
    "bin_strategy": "equal_width",
    "standardize": False,
    "estimand": "acd",
    "y_col": "y",
    "t_col": "t",
    "x_cols": "",
    "cat_cols": "",
    "n": 100000,
    "learner.kind": "boosted_stumps",
    "learner.rounds": 200,
    "learner.learning_rate": 0.1,
    "learner.validation_fraction": 0.2,
    "learner.clip": 1e-3,
    "sim.pi": [1 / 3, 1 / 3, 1 / 3],
    "sim.lambda": [1.0, 3.0, 9.0],
    "sim.f": "log1p",
    "sim.intercept": 0.0,
    "sim.slope": 1.0,
    "sim.noise_sd": 1.0,
    "sim.draws": 200000,
    "sim.learner_kind": "stratum_mean",
}

# flag destination -> dotted config key
_FLAG_KEYS = {
    "input": "input", "out": "out", "seed": "seed", "folds": "folds",
    "bins": "bins", "bin_strategy": "bin_strategy",
    "standardize": "standardize", "estimand": "estimand",
    "y_col": "y_col", "t_col": "t_col", "x_cols": "x_cols",
    "cat_cols": "cat_cols", "hist_out": "hist_out", "n": "n",
    "learner": "learner.kind", "rounds": "learner.rounds",
    "learning_rate": "learner.learning_rate",
    "validation_fraction": "learner.validation_fraction",
    "clip": "learner.clip", "sim_pi": "sim.pi", "sim_lambda": "sim.lambda",
    "sim_f": "sim.f", "sim_intercept": "sim.intercept",
    "sim_slope": "sim.slope", "sim_noise_sd": "sim.noise_sd",
    "sim_draws": "sim.draws",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # map usage errors onto exit code 1
        raise ConfigError(f"cli: {message}")


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(s for s in (p.strip() for p in str(text).split(",")) if s)


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file with flat dotted keys")
    p.add_argument("--out", help="output report path (default: stdout)")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--learner", choices=("stratum_mean", "boosted_stumps"))
    p.add_argument("--rounds", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--validation-fraction", type=float,
                   dest="validation_fraction")
    p.add_argument("--clip", type=float)
    p.add_argument("--standardize", action="store_const", const=True,
                   default=None)


def _add_io(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", help="input CSV path")
    p.add_argument("--y-col", dest="y_col")
    p.add_argument("--t-col", dest="t_col")
    p.add_argument("--x-cols", dest="x_cols",
                   help="comma-separated numeric covariate columns")
    p.add_argument("--cat-cols", dest="cat_cols",
                   help="comma-separated categorical covariate columns")


def _add_bins(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bins", type=int)
    p.add_argument("--bin-strategy", dest="bin_strategy",
                   choices=coarsen.PARTITION_KINDS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dosedml",
                     description="Dose-response estimation: residual "
                                 "regression and coarsened AIPW")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the Poisson-Categorical lab")
    _add_shared(sim)
    sim.add_argument("--n", type=int)
    sim.add_argument("--sim-pi", dest="sim_pi")
    sim.add_argument("--sim-lambda", dest="sim_lambda")
    sim.add_argument("--sim-f", dest="sim_f", choices=("log1p", "affine"))
    sim.add_argument("--sim-intercept", dest="sim_intercept", type=float)
    sim.add_argument("--sim-slope", dest="sim_slope", type=float)
    sim.add_argument("--sim-noise-sd", dest="sim_noise_sd", type=float)
    sim.add_argument("--sim-draws", dest="sim_draws", type=int)
    sim.add_argument("--hist-out", dest="hist_out",
                     help="CSV path for the effective-treatment histogram")

    est = sub.add_parser("estimate", help="estimate from a CSV table")
    est.add_argument("estimator",
                     choices=("rorr", "coarsened-rorr", "aipw"))
    _add_shared(est)
    _add_io(est)
    _add_bins(est)
    est.add_argument("--estimand", choices=("acd", "aie"))

    diag = sub.add_parser("diagnose", help="balance and overlap diagnostics")
    _add_shared(diag)
    _add_io(diag)
    _add_bins(diag)
    diag.add_argument("--baseline", type=int, default=0)

    return parser


def _resolve_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- flags, onto flat dotted keys."""
    cfg = dict(_DEFAULTS)
    path = getattr(args, "config", None)
    if path:
        if not Path(path).exists():
            raise ConfigError(f"cli: config file {path} not found")
        with open(path) as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"cli: config file is not valid JSON: {exc}")
        unknown = [k for k in loaded
                   if k not in _DEFAULTS and k not in ("input", "out", "hist_out")]
        if unknown:
            raise ConfigError(f"cli: unknown config key(s) {unknown}")
        cfg.update(loaded)
    for dest, key in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg[key] = value
    cfg["command"] = args.command
    if args.command == "estimate":
        cfg["estimator"] = args.estimator
    if args.command == "diagnose":
        cfg["baseline"] = args.baseline
    return cfg


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _learner_spec(cfg: dict, kind_key: str = "learner.kind") -> LearnerSpec:
    return LearnerSpec(kind=cfg[kind_key],
                       rounds=int(cfg["learner.rounds"]),
                       learning_rate=float(cfg["learner.learning_rate"]),
                       validation_fraction=float(cfg["learner.validation_fraction"]),
                       seed=int(cfg["seed"]),
                       clip=float(cfg["learner.clip"]))


def _emit(report: dict, cfg: dict) -> None:
    report["config"] = {k: v for k, v in sorted(cfg.items())}
    report["config_hash"] = _config_hash(cfg)
    report["seed"] = int(cfg["seed"])
    report["timestamp"] = datetime.now(timezone.utc).isoformat()
    text = json.dumps(report, sort_keys=True, indent=2, default=float)
    out = cfg.get("out")
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _load_table(cfg: dict):
    path = cfg.get("input")
    if not path:
        raise ConfigError("cli: --input is required")
    if not Path(path).exists():
        raise ConfigError(f"cli: input path {path} not found")
    schema = ColumnSchema(y=cfg["y_col"], t=cfg["t_col"],
                          x=_csv_list(cfg["x_cols"]),
                          cat=_csv_list(cfg["cat_cols"]))
    table = load_csv(path, schema)
    std = None
    if cfg.get("standardize"):
        table, std = standardize(table, ("y", "t"))
    return table, std


def _check_out_paths(cfg: dict) -> None:
    for key in ("out", "hist_out"):
        path = cfg.get(key)
        if path and not Path(path).resolve().parent.is_dir():
            raise ConfigError(f"cli: directory for {key}={path} does not exist")


def _partition_for(cfg: dict, table) -> coarsen.BinPartition:
    k = cfg.get("bins") or coarsen.choose_k(table.n)
    return coarsen.make_partition(table.t, cfg["bin_strategy"], int(k))


def _base_report(cfg: dict, estimator: str, estimand: str, n: int,
                 k=None) -> dict:
    return {"estimator": estimator, "estimand": estimand, "n": n, "k": k,
            "folds": int(cfg["folds"]), "clip": float(cfg["learner.clip"]),
            "learner": {"kind": cfg["learner.kind"],
                        "rounds": int(cfg["learner.rounds"]),
                        "learning_rate": float(cfg["learner.learning_rate"]),
                        "validation_fraction":
                            float(cfg["learner.validation_fraction"])}}


def _run_estimate(cfg: dict) -> None:
    _check_out_paths(cfg)
    estimator = cfg["estimator"]
    if estimator == "aipw" and cfg["estimand"] == "aie":
        if cfg["bin_strategy"] not in ("unit_integer",):
            if cfg["bin_strategy"] != _DEFAULTS["bin_strategy"]:
                raise ConfigError(
                    "cli: estimand aie requires bin_strategy unit_integer")
            cfg["bin_strategy"] = "unit_integer"
    table, std = _load_table(cfg)
    if estimator == "aipw" and cfg["estimand"] == "aie" \
            and not np.all(table.t == np.rint(table.t)):
        raise ConfigError("cli: estimand aie requires an integer-valued "
                          "treatment (unit_integer bins)")
    learner = _learner_spec(cfg)
    folds = int(cfg["folds"])

    if estimator == "rorr":
        est = rorr_pipeline(table, folds, learner)
        report = _base_report(cfg, "rorr", "RORR", table.n)
        report.update(estimate=est.theta_hat, se=est.se, ci95=list(est.ci95))
    else:
        partition = _partition_for(cfg, table)
        if estimator == "coarsened-rorr":
            rep = coarsen.coarsened_rorr_pipeline(table, partition, learner,
                                                  n_folds=folds)
            report = _base_report(cfg, "coarsened-rorr", rep.estimand,
                                  table.n, k=partition.n_bins)
            report.update(rep.to_dict())
        else:
            rep, means = coarsen.aipw_pipeline(table, partition, learner,
                                               estimand=cfg["estimand"],
                                               n_folds=folds)
            payload = diagnostics.dose_response_export(means, partition)
            report = _base_report(cfg, "aipw", rep.estimand, table.n,
                                  k=partition.n_bins)
            report.update(rep.to_dict())
            report["bins"] = payload.to_dict()
    if std is not None:
        report["standardization"] = std.to_dict()
    _emit(report, cfg)


def _run_simulate(cfg: dict) -> None:
    _check_out_paths(cfg)
    dgp = simlab.PoissonCategoricalDGP(
        pi=tuple(float(v) for v in _maybe_list(cfg["sim.pi"])),
        lam=tuple(float(v) for v in _maybe_list(cfg["sim.lambda"])),
        f_kind=cfg["sim.f"], f_intercept=float(cfg["sim.intercept"]),
        f_slope=float(cfg["sim.slope"]),
        noise_sd=float(cfg["sim.noise_sd"]), seed=int(cfg["seed"]))
    n = int(cfg["n"])
    draws = int(cfg["sim.draws"])
    table, _ = simlab.sample_dgp(dgp, n)
    learner = _learner_spec(cfg, kind_key="sim.learner_kind")
    est = rorr_pipeline(table, int(cfg["folds"]), learner)
    acd_emp, acd_emp_se = simlab.empirical_acd(dgp, table.t)
    plim = simlab.rorr_plim_mc(dgp, draws)
    decomp = simlab.bias_decomposition_mc(dgp, draws)
    report = {
        "command": "simulate", "n": n,
        "estimator": "rorr", "estimand": "RORR", "k": None,
        "folds": int(cfg["folds"]), "clip": float(cfg["learner.clip"]),
        "learner": {"kind": cfg["sim.learner_kind"],
                    "rounds": int(cfg["learner.rounds"])},
        "empirical_rorr": {"estimate": est.theta_hat, "se": est.se,
                           "ci95": list(est.ci95)},
        "empirical_acd": {"estimate": acd_emp, "se": acd_emp_se},
        "analytic_acd": simlab.acd_analytic(dgp),
        "analytic_aie": simlab.aie_analytic(dgp),
        "rorr_plim_mc": {"value": plim.value, "mc_se": plim.se,
                         "draws_per_stratum": plim.draws},
        "bias_decomposition": decomp.to_dict(),
    }
    hist_out = cfg.get("hist_out")
    if hist_out:
        rows = simlab.effective_treatment_histogram(dgp, draws)
        with open(hist_out, "w") as fh:
            fh.write("bin_left,bin_right,observed_mass,effective_mass\n")
            for r in rows:
                fh.write(f"{r['bin_left']!r},{r['bin_right']!r},"
                         f"{r['observed_mass']!r},{r['effective_mass']!r}\n")
        report["histogram_csv"] = hist_out
    _emit(report, cfg)


def _maybe_list(value):
    if isinstance(value, str):
        return [float(v) for v in _csv_list(value)]
    return value


def _run_diagnose(cfg: dict) -> None:
    out = cfg.get("out")
    if not out or len(_csv_list(out)) != 2:
        raise ConfigError("cli: diagnose needs --out balance.csv,overlap.json")
    balance_path, overlap_path = _csv_list(out)
    for p in (balance_path, overlap_path):
        if not Path(p).resolve().parent.is_dir():
            raise ConfigError(f"cli: directory for {p} does not exist")
    table, _ = _load_table(cfg)
    partition = _partition_for(cfg, table)
    learner = _learner_spec(cfg)
    folds = int(cfg["folds"])
    if folds >= 2:
        fit = cross_fit(table, make_folds(table.n, folds, learner.seed),
                        learner, targets=("p",), partition=partition)
    else:
        fit = fit_insample(table, learner, targets=("p",), partition=partition)
    balance = diagnostics.balance_report(table, partition, fit.phat,
                                         baseline=int(cfg["baseline"]))
    overlap = diagnostics.overlap_report(fit.phat, learner.clip)
    balance.write_csv(balance_path)
    Path(overlap_path).write_text(
        json.dumps(overlap.to_dict(), sort_keys=True, indent=2) + "\n")
    pre, post = balance.max_abs()
    print(f"diagnose: wrote {balance_path} and {overlap_path} "
          f"(max |smd| pre={pre:.3f} post={post:.3f}, "
          f"{len(overlap.warnings)} overlap warning(s))")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve_config(args)
        if cfg["command"] == "simulate":
            _run_simulate(cfg)
        elif cfg["command"] == "estimate":
            _run_estimate(cfg)
        else:
            _run_diagnose(cfg)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
