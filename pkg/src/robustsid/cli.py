"""Command-line front end.

Settings are resolved as built-in defaults, then the ``--config`` file
(YAML or JSON, flat keys named like the long flags with dashes turned into
underscores), then explicit flags. Every command that writes to ``--out``
also writes the resolved settings to ``config.json`` there.

Exit codes: 0 success, 1 usage or configuration error, 2 input/output error,
3 solver non-convergence, 4 degenerate or infeasible problem.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np
import yaml

from .bounds import penalty_bounds
from .exceptions import (
    DegenerateProblemError,
    InfeasibleCertificateError,
    NonConvergenceError,
    OrderSelectionError,
    RecordTooShortError,
)
from .experiments import (
    OutlierPlan,
    add_noise,
    inject_outliers,
    load_record,
    make_benchmark,
    monte_carlo,
    save_record,
)
from .hankel import HankelParams, build_g_operator
from .realization import OrderPolicy, StateSpaceModel, estimate_x0, identify, simulate
from .solver import Penalties, SolveOptions, problem_from_record
from .tuning import TUNING_OPTIONS, GridSpec, cross_validate, grid_search, write_surface

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NONCONVERGED, EXIT_DEGENERATE = 0, 1, 2, 3, 4

logger = logging.getLogger("robustsid")


class UsageError(Exception):
    pass


def _float_or_auto(text):
    if isinstance(text, str) and text.strip().lower() == "auto":
        return "auto"
    return float(text)


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def _float_list(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _order(text):
    return str(OrderPolicy.parse(text))


# key -> (converter, default); every key is also a long flag
SCHEMA = {
    "data": (str, None),
    "format": (str, "auto"),
    "out": (str, None),
    "seed": (int, 0),
    "jobs": (int, 1),
    "r": (int, 5),
    "s": (int, 5),
    "lambda_nuc": (_float_or_auto, 1.0),
    "lambda_sparse": (_float_or_auto, 1.0),
    "order": (_order, "gap"),
    "max_iter": (int, None),
    "tol_abs": (float, 1e-6),
    "tol_rel": (float, 1e-4),
    "rho": (float, 1.0),
    "method": (str, "knee"),
    "grid_n": (int, 10),
    "spacing": (str, "linear"),
    "split_fraction": (float, 0.9),
    "knee_axis": (str, "nuc"),
    "count": (int, 3),
    "counts": (_int_list, [3]),
    "magnitude": (float, 20.0),
    "noise": (float, 0.0),
    "noise_levels": (_float_list, [0.0]),
    "iterations": (int, 50),
    "threshold": (float, None),
    "benchmark_seed": (int, 0),
    "samples": (int, 90),
    "model": (str, None),
    "input": (str, None),
}

FLAG_HELP = {
    "data": "input/output record (CSV with u*/y* header or numeric matrix)",
    "format": "record format: auto, csv or matrix",
    "out": "output directory",
    "seed": "master random seed",
    "jobs": "worker processes for grids and Monte Carlo runs",
    "r": "future block rows",
    "s": "past horizon used for instruments",
    "lambda_nuc": "nuclear-norm weight, or 'auto' to tune it",
    "lambda_sparse": "outlier l1 weight ('inf' disables outliers), or 'auto'",
    "order": "order rule: gap, fixed:N or threshold:T",
    "max_iter": "solver iteration cap (2000, or 20000 for grid cells)",
    "tol_abs": "absolute stopping tolerance",
    "tol_rel": "relative stopping tolerance",
    "rho": "initial ADMM penalty",
    "method": "tuning rule: knee or cv",
    "grid_n": "grid points per penalty",
    "spacing": "grid spacing: linear or log",
    "split_fraction": "training share for cross-validation",
    "knee_axis": "penalty varied for the knee: nuc or sparse",
    "count": "number of outliers to inject",
    "counts": "comma-separated outlier counts for the sweep",
    "magnitude": "outlier size",
    "noise": "output noise level as a fraction of the output std",
    "noise_levels": "comma-separated noise levels for the benchmark table",
    "iterations": "Monte Carlo runs per setting",
    "threshold": "detection threshold on |e_hat| (default magnitude / 2)",
    "benchmark_seed": "seed of the synthetic benchmark system",
    "samples": "length of the synthetic benchmark record",
    "model": "model JSON written by identify",
    "input": "input sequence file for simulate",
}

COMMANDS = {
    "identify": ["data", "format", "out", "r", "s", "lambda_nuc", "lambda_sparse", "order",
                 "max_iter", "tol_abs", "tol_rel", "rho", "method", "grid_n", "spacing",
                 "split_fraction", "knee_axis", "jobs", "seed"],
    "lambda-max": ["data", "format", "out", "r", "s", "seed"],
    "tune": ["data", "format", "out", "r", "s", "order", "max_iter", "tol_abs", "tol_rel", "rho",
             "method", "grid_n", "spacing", "split_fraction", "knee_axis", "jobs", "seed"],
    "inject": ["data", "format", "out", "count", "magnitude", "noise", "s", "seed"],
    "benchmark": ["data", "format", "out", "r", "s", "lambda_nuc", "lambda_sparse", "order",
                  "max_iter", "tol_abs", "tol_rel", "rho", "counts", "magnitude", "noise_levels",
                  "iterations", "threshold", "benchmark_seed", "samples", "jobs", "seed"],
    "simulate": ["model", "input", "format", "out", "seed"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def build_parser():
    parser = _Parser(prog="robustsid", description="Outlier-robust subspace identification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name, help=f"{name} command")
        p.add_argument("--config", help="YAML or JSON settings file")
        p.add_argument("-v", "--verbose", action="count", default=0)
        for key in keys:
            conv, default = SCHEMA[key]
            p.add_argument(
                "--" + key.replace("_", "-"),
                dest=key,
                default=argparse.SUPPRESS,
                help=f"{FLAG_HELP[key]} (default: {default})",
            )
    return parser


def resolve_config(command, flags, config_path=None):
    """Defaults < config file < flags, converted and validated."""
    values = {k: SCHEMA[k][1] for k in COMMANDS[command]}
    if config_path is not None:
        try:
            with open(config_path) as fh:
                loaded = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse config {config_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a mapping")
        unknown = sorted(set(loaded) - set(SCHEMA))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(map(str, unknown))}")
        values.update({k: v for k, v in loaded.items() if k in values})
    values.update(flags)
    out = {}
    for key, value in values.items():
        conv = SCHEMA[key][0]
        try:
            out[key] = None if value is None else conv(value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key}: {value!r} ({exc})") from None
    return out


def _dump(obj, fh):
    json.dump(obj, fh, indent=2, sort_keys=True)
    fh.write("\n")


def _write_json(out_dir, name, obj):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w") as fh:
        _dump(obj, fh)


def _write_matrix_csv(path, header, columns):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*columns):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _echo_config(cfg, command):
    if cfg.get("out"):
        _write_json(cfg["out"], "config.json", {"command": command, **cfg})


def _solve_options(cfg, tuning=False):
    max_iter = cfg["max_iter"]
    if max_iter is None:
        max_iter = TUNING_OPTIONS.max_iter if tuning else SolveOptions().max_iter
    return SolveOptions(max_iter=max_iter, tol_abs=cfg["tol_abs"], tol_rel=cfg["tol_rel"], rho=cfg["rho"])


def _load(cfg):
    if not cfg.get("data"):
        raise UsageError("--data is required")
    return load_record(cfg["data"], cfg["format"])


def _params(cfg, record):
    return HankelParams.for_length(len(record), r=cfg["r"], s=cfg["s"])


def _tune(cfg, record, params):
    grid = GridSpec(n_nuc=cfg["grid_n"], n_sparse=cfg["grid_n"], spacing=cfg["spacing"])
    opts = _solve_options(cfg, tuning=True)
    if cfg["method"] == "knee":
        return grid_search(record, params, grid, opts, cfg["order"], jobs=cfg["jobs"], knee_axis=cfg["knee_axis"])
    if cfg["method"] == "cv":
        return cross_validate(record, params, grid, cfg["split_fraction"], opts, cfg["order"], jobs=cfg["jobs"])
    raise UsageError(f"unknown tuning method {cfg['method']!r}")


def cmd_identify(cfg):
    record = _load(cfg)
    params = _params(cfg, record)
    lam_n, lam_s = cfg["lambda_nuc"], cfg["lambda_sparse"]
    selection = None
    if "auto" in (lam_n, lam_s):
        surface = _tune(cfg, record, params)
        if surface.selected is None:
            raise DegenerateProblemError("tuning selected no penalties")
        selection = {"method": surface.method, "selected": list(surface.selected)}
        tuned_n, tuned_s = surface.selected
        lam_n = tuned_n if lam_n == "auto" else lam_n
        lam_s = tuned_s if lam_s == "auto" else lam_s
    out = cfg["out"]
    try:
        ident = identify(record, params, Penalties(lam_n, lam_s), _solve_options(cfg), cfg["order"])
    except NonConvergenceError as exc:
        if out:
            res = exc.result
            _write_json(out, "diagnostics.json", {
                "converged": False, "iterations": res.iterations, "objective": res.objective,
                "primal_residual": res.primal_residual, "dual_residual": res.dual_residual,
                "lambda_nuc": lam_n, "lambda_sparse": lam_s,
            })
        raise
    res = ident.solve
    diag = {
        "converged": res.converged,
        "iterations": res.iterations,
        "objective": res.objective,
        "primal_residual": res.primal_residual,
        "dual_residual": res.dual_residual,
        "at_shutoff": res.at_shutoff,
        "lambda_nuc": lam_n,
        "lambda_sparse": lam_s,
        "order": ident.model.n_x,
        "singular_values": ident.singular_values.tolist(),
        "bd_residual": ident.bd_residual,
        "window_start": params.s,
        "x0_window": ident.model.x0.tolist(),
        "window_length": params.window_length,
        "tuning": selection,
    }
    if out:
        # model.json starts at the first sample of the data file, not at the window
        m = ident.model
        cleaned = record.filled_outputs()
        cleaned[params.s : params.s + params.window_length] += res.e_hat
        x0 = estimate_x0(m, record.inputs, cleaned, record.observed)
        _write_json(out, "model.json", StateSpaceModel(m.A, m.B, m.C, m.D, x0).to_dict())
        _write_json(out, "diagnostics.json", diag)
        n_p = record.n_outputs
        header = [f"y_hat{i + 1}" for i in range(n_p)] + [f"e_hat{i + 1}" for i in range(n_p)]
        cols = list(res.y_hat.T) + list(res.e_hat.T)
        _write_matrix_csv(os.path.join(out, "filtered.csv"), header, cols)
    _dump({"order": ident.model.n_x, "objective": res.objective, "iterations": res.iterations}, sys.stdout)
    return EXIT_OK


def cmd_lambda_max(cfg):
    record = _load(cfg)
    params = _params(cfg, record)
    op = build_g_operator(record, params)
    prob = problem_from_record(record, params, Penalties(0.0, math.inf), op=op)
    bounds = penalty_bounds(op, prob.y_meas, prob.observed)
    if cfg["out"]:
        _write_json(cfg["out"], "bounds.json", bounds.as_dict())
    _dump(bounds.as_dict(), sys.stdout)
    return EXIT_OK


def cmd_tune(cfg):
    record = _load(cfg)
    params = _params(cfg, record)
    surface = _tune(cfg, record, params)
    sel = {
        "method": surface.method,
        "selected": None if surface.selected is None else list(surface.selected),
        "distinct_knee": surface.distinct if cfg["method"] == "knee" else None,
        "bounds": surface.bounds.as_dict(),
        "unconverged_cells": int((~surface.converged).sum()),
    }
    if cfg["out"]:
        os.makedirs(cfg["out"], exist_ok=True)
        write_surface(surface, os.path.join(cfg["out"], "surface.csv"))
        _write_json(cfg["out"], "selection.json", sel)
    _dump(sel, sys.stdout)
    return EXIT_OK


def cmd_inject(cfg):
    record = _load(cfg)
    if not cfg["out"]:
        raise UsageError("--out is required")
    noisy = add_noise(record, cfg["noise"], cfg["seed"])
    plan = OutlierPlan(cfg["count"], cfg["magnitude"], seed=cfg["seed"])
    corrupted, _ = inject_outliers(noisy, plan, start=cfg["s"])
    os.makedirs(cfg["out"], exist_ok=True)
    save_record(corrupted, os.path.join(cfg["out"], "corrupted.csv"))
    truth = [{"time": t, "channel": c, "sign": s} for t, c, s in plan.injected]
    _write_json(cfg["out"], "truth.json", {"injected": truth, "magnitude": plan.magnitude, "seed": plan.seed})
    _dump({"injected": len(truth)}, sys.stdout)
    return EXIT_OK


def cmd_benchmark(cfg):
    if cfg["iterations"] < 1:
        raise UsageError("iterations must be >= 1")
    if cfg["data"]:
        record = load_record(cfg["data"], cfg["format"])
    else:
        record, _ = make_benchmark(seed=cfg["benchmark_seed"], n_samples=cfg["samples"])
    params = _params(cfg, record)
    if "auto" in (cfg["lambda_nuc"], cfg["lambda_sparse"]):
        raise UsageError("benchmark needs numeric penalties")
    penalties = Penalties(cfg["lambda_nuc"], cfg["lambda_sparse"])
    opts = _solve_options(cfg)
    rows = []
    out = cfg["out"]
    for level in cfg["noise_levels"]:
        for count in cfg["counts"]:
            res = monte_carlo(
                record, params, penalties, OutlierPlan(count, cfg["magnitude"]),
                noise_level=level, iterations=cfg["iterations"], seed=cfg["seed"],
                threshold=cfg["threshold"], opts=opts, order_policy=cfg["order"], jobs=cfg["jobs"],
            )
            rows.append((level, count, res))
            if out:
                res.write(out, prefix=f"runs_noise{level!r}_count{count}")
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "table.csv"), "w") as fh:
            fh.write("noise,count,rate_mean,fp_mean,n_ok,n_nonconverged\n")
            for level, count, res in rows:
                fh.write(f"{level!r},{count},{res.rate_mean!r},{res.fp_mean!r},{res.n_ok},{res.n_nonconverged}\n")
        with open(os.path.join(out, "rate_vs_count.csv"), "w") as fh:
            fh.write("count,rate_mean\n")
            for level, count, res in rows:
                if level == cfg["noise_levels"][0]:
                    fh.write(f"{count},{res.rate_mean!r}\n")
    summary = [dict(noise=level, count=count, **res.summary()) for level, count, res in rows]
    if out:
        _write_json(out, "summary.json", summary)
    _dump(summary, sys.stdout)
    return EXIT_OK


def cmd_simulate(cfg):
    if not cfg["model"] or not cfg["input"]:
        raise UsageError("--model and --input are required")
    with open(cfg["model"]) as fh:
        try:
            model = StateSpaceModel.from_dict(json.load(fh))
        except (KeyError, ValueError) as exc:
            raise UsageError(f"bad model file: {exc}") from None
    u = _load_inputs(cfg["input"], cfg["format"])
    if u.shape[1] != model.n_inputs:
        raise UsageError(f"input has {u.shape[1]} channels, model expects {model.n_inputs}")
    y = simulate(model, u)
    header = [f"y{i + 1}" for i in range(model.n_outputs)]
    if cfg["out"]:
        os.makedirs(cfg["out"], exist_ok=True)
        _write_matrix_csv(os.path.join(cfg["out"], "simulated.csv"), header, list(y.T))
    else:
        sys.stdout.write(",".join(header) + "\n")
        for row in y:
            sys.stdout.write(",".join(repr(float(v)) for v in row) + "\n")
    return EXIT_OK


def _load_inputs(path, fmt):
    """Input columns ``u*`` of a CSV, or every column of a plain numeric matrix."""
    with open(path) as fh:
        first = fh.readline()
    if fmt == "csv" or (fmt == "auto" and any(c.isalpha() and c.lower() not in "ena" for c in first)):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = [h.strip().lower() for h in rows[0]]
        cols = [i for i, h in enumerate(header) if h.startswith("u")]
        if not cols:
            raise ValueError(f"{path}: no u* columns")
        return np.array([[float(r[i]) for i in cols] for r in rows[1:] if r], dtype=float).reshape(-1, len(cols))
    return np.atleast_2d(np.loadtxt(path, ndmin=2))


HANDLERS = {
    "identify": cmd_identify,
    "lambda-max": cmd_lambda_max,
    "tune": cmd_tune,
    "inject": cmd_inject,
    "benchmark": cmd_benchmark,
    "simulate": cmd_simulate,
}


def main(argv=None):
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    verbose = args.pop("verbose", 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = resolve_config(command, args, config_path)
        _echo_config(cfg, command)
        return HANDLERS[command](cfg)
    except UsageError as exc:
        sys.stderr.write(f"robustsid {command}: {exc}\n")
        return EXIT_USAGE
    except NonConvergenceError as exc:
        sys.stderr.write(f"robustsid {command}: {exc}\n")
        return EXIT_NONCONVERGED
    except (DegenerateProblemError, InfeasibleCertificateError, RecordTooShortError, OrderSelectionError) as exc:
        sys.stderr.write(f"robustsid {command}: {exc}\n")
        return EXIT_DEGENERATE
    except (OSError, ValueError) as exc:
        sys.stderr.write(f"robustsid {command}: {exc}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
