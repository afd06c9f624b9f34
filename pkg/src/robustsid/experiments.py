"""Data loading, outlier and noise injection, detection scoring and Monte Carlo runs."""

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import NonConvergenceError, OrderSelectionError
from .hankel import HankelParams, IoRecord, build_g_operator
from .realization import StateSpaceModel, realize, simulate
from .solver import SolveOptions, problem_from_record, solve_robust
from .tuning import _run_cells

__all__ = [
    "OutlierPlan",
    "DetectionReport",
    "RunReport",
    "MonteCarloResult",
    "load_record",
    "save_record",
    "inject_outliers",
    "add_noise",
    "detection_report",
    "make_benchmark",
    "monte_carlo",
    "count_sweep",
]

logger = logging.getLogger(__name__)


@dataclass
class OutlierPlan:
    """``count`` additive spikes of size ``magnitude``; ``injected`` is filled by injection."""

    count: int
    magnitude: float = 20.0
    seed: int = 0
    injected: list = field(default_factory=list)

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("outlier count must be nonnegative")
        if not self.magnitude > 0:
            raise ValueError("outlier magnitude must be positive")


@dataclass
class DetectionReport:
    rate: float
    false_positives: int
    detected: list
    truth: list
    threshold: float


def _read_descriptor(path):
    for candidate in (path + ".json", os.path.splitext(path)[0] + ".json"):
        if candidate != path and os.path.exists(candidate):
            with open(candidate) as fh:
                return json.load(fh)
    return None


def load_record(path, format="auto", n_inputs=None, n_outputs=None):
    """Read an :class:`IoRecord` from delimited text.

    ``format="csv"``: comma-separated with a header naming ``u1..um`` and
    ``y1..yp`` columns. ``format="matrix"``: whitespace-separated numbers; the
    channel split comes from ``n_inputs``/``n_outputs`` or from a sidecar
    ``<file>.json`` with keys ``n_m``, ``n_p`` and optionally ``skip_cols``
    (leading columns to drop, e.g. a time stamp). ``NaN`` outputs mark
    unobserved samples.
    """
    if format == "auto":
        with open(path) as fh:
            first = fh.readline()
        format = "csv" if any(c.isalpha() and c.lower() not in "ena" for c in first) else "matrix"
    if format == "csv":
        return _load_csv(path)
    if format == "matrix":
        return _load_matrix(path, n_inputs, n_outputs)
    raise ValueError(f"unknown record format {format!r}")


def _load_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip().lower() for h in rows[0]]
    u_cols = sorted((i for i, h in enumerate(header) if h.startswith("u")), key=lambda i: _channel_no(header[i]))
    y_cols = sorted((i for i, h in enumerate(header) if h.startswith("y")), key=lambda i: _channel_no(header[i]))
    if not u_cols or not y_cols:
        raise ValueError(f"{path}: header must name u1.. and y1.. columns")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            data.append([float(c) for c in row])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    arr = np.array(data, dtype=float).reshape(-1, len(header))
    return IoRecord(arr[:, u_cols], arr[:, y_cols])


def _channel_no(name):
    digits = name[1:]
    if not digits.isdigit():
        raise ValueError(f"bad channel column name {name!r}")
    return int(digits)


def _load_matrix(path, n_inputs, n_outputs):
    desc = _read_descriptor(path) or {}
    n_m = n_inputs if n_inputs is not None else desc.get("n_m")
    n_p = n_outputs if n_outputs is not None else desc.get("n_p")
    skip = int(desc.get("skip_cols", 0))
    if n_m is None or n_p is None:
        raise ValueError(f"{path}: channel counts missing (pass them or add {path}.json)")
    if n_m < 1 or n_p < 1:
        raise ValueError("records need at least one input and one output channel")
    data = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != skip + n_m + n_p:
                raise ValueError(
                    f"{path}:{lineno}: expected {skip + n_m + n_p} columns, got {len(parts)}"
                )
            try:
                data.append([float(c) for c in parts[skip:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    arr = np.array(data, dtype=float).reshape(-1, n_m + n_p)
    return IoRecord(arr[:, :n_m], arr[:, n_m:])


def save_record(record, path):
    """CSV with ``u*``/``y*`` header; unobserved outputs are written as NaN."""
    y = record.outputs.copy()
    y[~record.observed] = np.nan
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"u{i + 1}" for i in range(record.n_inputs)] + [f"y{i + 1}" for i in range(record.n_outputs)])
        for uk, yk in zip(record.inputs, y):
            w.writerow([repr(float(v)) for v in uk] + [repr(float(v)) for v in yk])


def inject_outliers(record, plan, start=0, stop=None):
    """Add ``+/- plan.magnitude`` at ``plan.count`` distinct observed times in ``[start, stop)``.

    Each spike hits one uniformly chosen channel. Returns the corrupted record
    and the sorted injected time indices; ``plan.injected`` receives the
    ``(time, channel, sign)`` triples.
    """
    stop = len(record) if stop is None else stop
    candidates = np.flatnonzero(record.observed[start:stop]) + start
    if plan.count > candidates.size:
        raise ValueError(
            f"cannot place {plan.count} outliers in {candidates.size} observed samples"
        )
    rng = np.random.default_rng(plan.seed)
    times = np.sort(rng.choice(candidates, size=plan.count, replace=False))
    channels = rng.integers(0, record.n_outputs, size=plan.count)
    signs = rng.choice(np.array([-1.0, 1.0]), size=plan.count)
    y = record.outputs.copy()
    y[times, channels] += signs * plan.magnitude
    plan.injected = [(int(t), int(c), int(s)) for t, c, s in zip(times, channels, signs)]
    return record.with_outputs(y), [int(t) for t in times]


def add_noise(record, level_fraction, seed):
    """White Gaussian output noise with per-channel std ``level_fraction * std(y)``."""
    if level_fraction < 0:
        raise ValueError("noise level must be nonnegative")
    if level_fraction == 0:
        return record.with_outputs(record.outputs.copy())
    obs = record.observed
    std = record.outputs[obs].std(axis=0)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(record.outputs.shape) * (level_fraction * std)
    y = record.outputs.copy()
    y[obs] += noise[obs]
    return record.with_outputs(y)


def detection_report(e_hat, truth, threshold):
    """Score outlier detection at exact time indices (any channel above ``threshold``)."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    truth = sorted(int(t) for t in set(truth))
    if not truth:
        raise ValueError("detection rate is undefined without true outliers")
    e = np.asarray(e_hat, dtype=float)
    e = e[:, None] if e.ndim == 1 else e
    detected = [int(t) for t in np.flatnonzero(np.any(np.abs(e) > threshold, axis=1))]
    hits = len(set(detected) & set(truth))
    return DetectionReport(
        rate=hits / len(truth),
        false_positives=len(set(detected) - set(truth)),
        detected=detected,
        truth=truth,
        threshold=float(threshold),
    )


def _random_stable_system(rng, n_x, n_m, n_p, radius):
    # well-separated real and complex-pair poles inside the given radius
    A = np.zeros((n_x, n_x))
    k = 0
    while k < n_x:
        mag = rng.uniform(0.4, radius)
        if k + 1 < n_x and rng.random() < 0.5:
            ang = rng.uniform(0.2, 1.2)
            c, s = mag * np.cos(ang), mag * np.sin(ang)
            A[k : k + 2, k : k + 2] = [[c, s], [-s, c]]
            k += 2
        else:
            A[k, k] = mag * rng.choice([-1.0, 1.0])
            k += 1
    T = rng.standard_normal((n_x, n_x)) + 3.0 * np.eye(n_x)
    A = T @ A @ np.linalg.inv(T)
    B = rng.standard_normal((n_x, n_m))
    C = rng.standard_normal((n_p, n_x))
    D = 0.3 * rng.standard_normal((n_p, n_m))
    return A, B, C, D


def make_benchmark(seed=0, n_samples=90, n_inputs=5, n_outputs=3, order=4, output_peak=8.0, radius=0.9):
    """Synthetic stand-in for the distillation record.

    A random stable system driven by white Gaussian inputs, with outputs
    rescaled so the largest magnitude equals ``output_peak``. The default
    90 samples give an 85-sample window with ``r = s = 5``. Returns
    ``(record, model)``.
    """
    rng = np.random.default_rng(seed)
    A, B, C, D = _random_stable_system(rng, order, n_inputs, n_outputs, radius)
    x0 = rng.standard_normal(order)
    u = rng.standard_normal((n_samples, n_inputs))
    model = StateSpaceModel(A, B, C, D, x0)
    y = simulate(model, u)
    scale = output_peak / np.abs(y).max()
    model = StateSpaceModel(A, B, scale * C, scale * D, x0)
    return IoRecord(u, simulate(model, u)), model


@dataclass
class RunReport:
    run: int
    seed: int
    status: str
    rate: float
    false_positives: int
    detected: list
    truth: list
    order: int
    iterations: int


@dataclass
class MonteCarloResult:
    rate_mean: float
    fp_mean: float
    iterations: int
    seed: int
    penalties: dict
    n_ok: int
    n_nonconverged: int
    runs: list

    def summary(self):
        return {
            "rate_mean": self.rate_mean,
            "fp_mean": self.fp_mean,
            "iterations": self.iterations,
            "seed": self.seed,
            "penalties": self.penalties,
            "n_ok": self.n_ok,
            "n_nonconverged": self.n_nonconverged,
        }

    def write(self, out_dir, prefix="benchmark"):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{prefix}_runs.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "seed", "status", "rate", "false_positives", "order", "iterations", "truth", "detected"])
            for r in self.runs:
                w.writerow([
                    r.run, r.seed, r.status, repr(r.rate), r.false_positives, r.order,
                    r.iterations, " ".join(map(str, r.truth)), " ".join(map(str, r.detected)),
                ])
        with open(os.path.join(out_dir, f"{prefix}_summary.json"), "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _one_run(run, child_seed, record, params, op, penalties, count, magnitude, noise_level, threshold, opts, order_policy):
    inj_seed, noise_seed = (int(v) for v in np.random.SeedSequence(child_seed).generate_state(2))
    noisy = add_noise(record, noise_level, noise_seed)
    window = slice(params.s, params.s + params.window_length)
    plan = OutlierPlan(count=count, magnitude=magnitude, seed=inj_seed)
    corrupted, times = inject_outliers(noisy, plan, start=window.start, stop=window.stop)
    truth = [t - params.s for t in times]

    # the instruments see the corrupted past too, so the operator is rebuilt per run
    # unless no injection or noise can reach them
    run_op = op if op is not None else build_g_operator(corrupted, params)
    problem = problem_from_record(corrupted, params, penalties, op=run_op)
    result = solve_robust(problem, opts)
    if not result.converged:
        return RunReport(run, child_seed, "nonconverged", math.nan, 0, [], truth, -1, result.iterations)
    rep = detection_report(result.e_hat, truth, threshold)
    try:
        order = realize(corrupted, params, problem, result, order_policy).model.n_x
        status = "ok"
    except (OrderSelectionError, np.linalg.LinAlgError, ValueError):
        order, status = -1, "realization_failed"
    return RunReport(
        run, child_seed, status, rep.rate, rep.false_positives, rep.detected, truth, order, result.iterations
    )


def monte_carlo(
    record,
    params,
    penalties,
    plan,
    noise_level=0.0,
    iterations=50,
    seed=0,
    threshold=None,
    opts=None,
    order_policy="gap",
    jobs=1,
):
    """Repeated injection, robust solve, detection and realization.

    Each run draws fresh outlier positions (and noise) from a child of
    ``seed``, so results do not depend on ``jobs`` or on completion order.
    The default detection threshold is half the outlier magnitude. Runs whose
    solve does not converge are excluded from the means and counted apart.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if plan.count < 1:
        raise ValueError("detection rate is undefined without true outliers")
    threshold = 0.5 * plan.magnitude if threshold is None else threshold
    opts = SolveOptions() if opts is None else opts
    if params is None:
        params = HankelParams.for_length(len(record))
    child_seeds = [
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(iterations)
    ]
    # injections land in the identification window only; the instruments use
    # samples before it, so with no noise the operator is shared by all runs
    shared_op = build_g_operator(record, params) if noise_level == 0 else None
    cells = [
        (k, child_seeds[k], record, params, shared_op, penalties, plan.count, plan.magnitude,
         noise_level, threshold, opts, order_policy)
        for k in range(iterations)
    ]
    runs = _run_cells(_one_run, cells, jobs)
    ok = [r for r in runs if r.status != "nonconverged"]
    return MonteCarloResult(
        rate_mean=float(np.mean([r.rate for r in ok])) if ok else math.nan,
        fp_mean=float(np.mean([r.false_positives for r in ok])) if ok else math.nan,
        iterations=iterations,
        seed=seed,
        penalties=asdict(penalties),
        n_ok=len(ok),
        n_nonconverged=len(runs) - len(ok),
        runs=runs,
    )


def count_sweep(record, params, penalties, counts, magnitude=20.0, iterations=50, seed=0, jobs=1, **kwargs):
    """Mean detection rate for each outlier count; returns ``[(count, MonteCarloResult)]``."""
    out = []
    for count in counts:
        res = monte_carlo(
            record, params, penalties, OutlierPlan(count, magnitude), iterations=iterations,
            seed=seed, jobs=jobs, **kwargs,
        )
        out.append((count, res))
    return out
