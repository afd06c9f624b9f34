"""Penalty selection over the bounded region ``(0, lambda_nuc_max] x (0, lambda_sparse_max]``.

Every grid cell runs the full identification pipeline. Cells whose solve
does not converge (or whose realization fails) are kept in the surface with
``converged = False`` and never selected.
"""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .bounds import PenaltyBounds, penalty_bounds
from .exceptions import DegenerateProblemError, NonConvergenceError, OrderSelectionError
from .hankel import HankelParams, build_g_operator
from .realization import identify, simulate
from .solver import Penalties, SolveOptions, problem_from_record

__all__ = [
    "GridSpec",
    "TuningSurface",
    "residual_training_error",
    "grid_search",
    "knee_point",
    "select_by_knee",
    "cross_validate",
    "write_surface",
]

logger = logging.getLogger(__name__)

KNEE_TOL = 1e-9

# cells near the nuclear shutoff need a few thousand iterations
TUNING_OPTIONS = SolveOptions(max_iter=20000)


@dataclass(frozen=True)
class GridSpec:
    """Grid counts and spacing; ``bounds=None`` computes them from the data.

    Linear grids are ``lambda_max * (1..n) / n``. Logarithmic grids span
    ``[log_floor * lambda_max, lambda_max]``.
    """

    n_nuc: int = 10
    n_sparse: int = 10
    spacing: str = "linear"
    bounds: PenaltyBounds = None
    log_floor: float = 1e-3

    def __post_init__(self):
        if self.n_nuc < 2 or self.n_sparse < 2:
            raise ValueError("grid counts must be >= 2")
        if self.spacing not in ("linear", "log"):
            raise ValueError(f"spacing must be 'linear' or 'log', got {self.spacing!r}")
        if not 0 < self.log_floor < 1:
            raise ValueError("log_floor must lie in (0, 1)")

    def axis(self, lam_max, n):
        if not lam_max > 0:
            raise DegenerateProblemError("empty tuning region (a shutoff value is zero)")
        if self.spacing == "linear":
            return lam_max * np.arange(1, n + 1) / n
        pts = np.geomspace(self.log_floor * lam_max, lam_max, n)
        pts[-1] = lam_max
        return pts

    def points(self, bounds):
        return (
            self.axis(bounds.lambda_nuc_max, self.n_nuc),
            self.axis(bounds.lambda_sparse_max, self.n_sparse),
        )


@dataclass
class TuningSurface:
    """Errors over the grid; ``residual[i, j]`` belongs to ``(lambda_nuc[i], lambda_sparse[j])``."""

    lambda_nuc: np.ndarray
    lambda_sparse: np.ndarray
    residual: np.ndarray
    converged: np.ndarray
    status: np.ndarray
    bounds: PenaltyBounds
    kind: str = "training"
    selected: tuple = None
    method: str = None
    distinct: bool = True
    orders: np.ndarray = field(default=None, repr=False)

    def rows(self):
        """One ``(lambda_nuc, lambda_sparse, residual, converged)`` tuple per cell."""
        for i, ln in enumerate(self.lambda_nuc):
            for j, ls in enumerate(self.lambda_sparse):
                yield float(ln), float(ls), float(self.residual[i, j]), bool(self.converged[i, j])


def residual_training_error(model, e_hat, record):
    """Summed squared mismatch between the simulated model and ``y_meas + e_hat``.

    ``record`` is the identification window (inputs, measured outputs and
    mask); only observed samples count.
    """
    y_sim = simulate(model, record.inputs)
    e_hat = np.asarray(e_hat, dtype=float).reshape(y_sim.shape)
    obs = record.observed
    diff = y_sim[obs] - record.outputs[obs] - e_hat[obs]
    return float(np.sum(diff**2))


def _run_cells(func, cells, jobs):
    # single-threaded BLAS inside every cell keeps results bit-identical for any job count
    if jobs == 1:
        with threadpool_limits(limits=1):
            return [func(*c) for c in cells]
    return Parallel(n_jobs=jobs)(delayed(_limited)(func, *c) for c in cells)


def _limited(func, *args):
    with threadpool_limits(limits=1):
        return func(*args)


def _cell_training(record, params, op, lam_n, lam_s, opts, order_policy):
    try:
        ident = identify(record, params, Penalties(lam_n, lam_s), opts, order_policy, op=op)
    except NonConvergenceError:
        return math.nan, False, "nonconverged", -1
    except (OrderSelectionError, np.linalg.LinAlgError, ValueError) as exc:
        logger.debug("cell (%g, %g) failed: %s", lam_n, lam_s, exc)
        return math.nan, False, "failed", -1
    window = record.window(params.s, params.s + params.window_length)
    res = residual_training_error(ident.model, ident.solve.e_hat, window)
    return res, True, "ok", ident.model.n_x


def _empty_surface(nuc, sparse, bounds, kind):
    shape = (nuc.size, sparse.size)
    return TuningSurface(
        lambda_nuc=nuc,
        lambda_sparse=sparse,
        residual=np.full(shape, math.nan),
        converged=np.zeros(shape, dtype=bool),
        status=np.full(shape, "", dtype=object),
        bounds=bounds,
        kind=kind,
        orders=np.full(shape, -1, dtype=int),
    )


def _fill(surface, results):
    n_s = surface.lambda_sparse.size
    for idx, (res, ok, status, order) in enumerate(results):
        i, j = divmod(idx, n_s)
        surface.residual[i, j] = res
        surface.converged[i, j] = ok
        surface.status[i, j] = status
        surface.orders[i, j] = order


def _bounds_for(record, params, grid, op):
    if grid.bounds is not None:
        return grid.bounds
    problem = problem_from_record(record, params, Penalties(0.0, math.inf), op=op)
    return penalty_bounds(op, problem.y_meas, problem.observed)


def grid_search(
    record,
    params,
    grid=None,
    opts=None,
    order_policy="gap",
    jobs=1,
    knee_axis="nuc",
    knee_fixed=None,
):
    """Training-error surface over the grid, with a knee selection.

    The knee is taken along ``knee_axis`` at the other penalty fixed to
    ``knee_fixed`` (default: the middle grid value). When that slice has
    failed cells the surface is returned without a selection.
    """
    grid = GridSpec() if grid is None else grid
    opts = TUNING_OPTIONS if opts is None else opts
    op = build_g_operator(record, params)
    bounds = _bounds_for(record, params, grid, op)
    nuc, sparse = grid.points(bounds)
    cells = [
        (record, params, op, ln, ls, opts, order_policy) for ln in nuc for ls in sparse
    ]
    surface = _empty_surface(nuc, sparse, bounds, "training")
    _fill(surface, _run_cells(_cell_training, cells, jobs))

    other = sparse if knee_axis == "nuc" else nuc
    fixed = other[other.size // 2] if knee_fixed is None else knee_fixed
    surface.method = f"knee:{knee_axis}"
    try:
        surface.selected, surface.distinct = select_by_knee(surface, knee_axis, fixed)
    except ValueError as exc:
        logger.warning("no knee selection: %s", exc)
    return surface


def knee_point(lambdas, residuals):
    """Index of the sharpest convex corner of ``residual`` against ``lambda``.

    Both axes are mapped affinely onto ``[0, 1]`` and the corner is the
    largest nonuniform second difference at an interior point. Near-ties go to
    the smaller ``lambda``. Returns ``(index, distinct)``; ``distinct`` is
    False when no interior point bends upward (e.g. an affine curve).
    """
    x = np.asarray(lambdas, dtype=float).ravel()
    y = np.asarray(residuals, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("lambdas and residuals differ in length")
    if x.size < 3:
        raise ValueError("knee detection needs at least 3 points")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise ValueError("knee detection needs finite values")
    if np.any(np.diff(x) <= 0):
        raise ValueError("lambdas must be strictly increasing")
    x = (x - x[0]) / (x[-1] - x[0])
    span = y.max() - y.min()
    y = (y - y.min()) / span if span > 0 else np.zeros_like(y)
    slopes = np.diff(y) / np.diff(x)
    d2 = 2.0 * np.diff(slopes) / (x[2:] - x[:-2])
    top = d2.max()
    candidates = np.flatnonzero(d2 >= top - KNEE_TOL * max(1.0, abs(top)))
    return int(candidates[0]) + 1, bool(top > KNEE_TOL)


def _axis_index(values, target, name):
    hits = np.flatnonzero(np.isclose(values, target, rtol=1e-12, atol=0.0))
    if hits.size == 0:
        raise ValueError(f"{name} = {target!r} is not a grid value")
    return int(hits[0])


def select_by_knee(surface, axis="nuc", fixed_value=None):
    """Knee along one penalty with the other held at a grid value.

    ``axis="nuc"`` varies ``lambda_nuc`` at ``lambda_sparse = fixed_value``;
    ``axis="sparse"`` does the converse. Returns ``((lambda_nuc, lambda_sparse), distinct)``.
    """
    if axis == "nuc":
        j = _axis_index(surface.lambda_sparse, fixed_value, "lambda_sparse")
        lam, res, ok = surface.lambda_nuc, surface.residual[:, j], surface.converged[:, j]
    elif axis == "sparse":
        i = _axis_index(surface.lambda_nuc, fixed_value, "lambda_nuc")
        lam, res, ok = surface.lambda_sparse, surface.residual[i, :], surface.converged[i, :]
    else:
        raise ValueError(f"axis must be 'nuc' or 'sparse', got {axis!r}")
    if not ok.all():
        bad = ", ".join(repr(float(v)) for v in lam[~ok])
        raise ValueError(f"slice has unconverged cells at {axis} = {bad}")
    k, distinct = knee_point(lam, res)
    if axis == "nuc":
        return (float(lam[k]), float(fixed_value)), distinct
    return (float(fixed_value), float(lam[k])), distinct


def _cell_validation(train, params, op, lam_n, lam_s, opts, order_policy, tail, n_valid):
    try:
        ident = identify(train, params, Penalties(lam_n, lam_s), opts, order_policy, op=op)
    except NonConvergenceError:
        return math.nan, False, "nonconverged", -1
    except (OrderSelectionError, np.linalg.LinAlgError, ValueError) as exc:
        logger.debug("cell (%g, %g) failed: %s", lam_n, lam_s, exc)
        return math.nan, False, "failed", -1
    # the model state starts at the first identification sample of the training record
    y_sim = simulate(ident.model, tail.inputs)[-n_valid:]
    valid = tail.window(len(tail) - n_valid)
    obs = valid.observed
    err = float(np.sum((y_sim[obs] - valid.outputs[obs]) ** 2))
    return err, True, "ok", ident.model.n_x


def cross_validate(
    record, params, grid=None, split_fraction=0.9, opts=None, order_policy="gap", jobs=1
):
    """Hold out the final samples, tune on the rest, score forward simulations.

    ``params`` supplies ``r`` and ``s``; ``N`` is refit to the training length.
    The selected cell minimizes the validation error, ties going to the
    largest ``(lambda_nuc, lambda_sparse)`` in lexicographic order.
    """
    if not 0 < split_fraction < 1:
        raise ValueError("split_fraction must lie in (0, 1)")
    grid = GridSpec() if grid is None else grid
    opts = TUNING_OPTIONS if opts is None else opts
    T = len(record)
    n_train = int(math.floor(split_fraction * T))
    n_valid = T - n_train
    if n_valid < 5:
        raise ValueError(f"validation window has {n_valid} samples, need at least 5")
    train = record.window(0, n_train)
    train_params = HankelParams.for_length(n_train, r=params.r, s=params.s)
    op = build_g_operator(train, train_params)
    bounds = _bounds_for(train, train_params, grid, op)
    nuc, sparse = grid.points(bounds)
    tail = record.window(train_params.s)
    cells = [
        (train, train_params, op, ln, ls, opts, order_policy, tail, n_valid)
        for ln in nuc
        for ls in sparse
    ]
    surface = _empty_surface(nuc, sparse, bounds, "validation")
    _fill(surface, _run_cells(_cell_validation, cells, jobs))

    ok = surface.converged & np.isfinite(surface.residual)
    if not ok.any():
        logger.warning("no grid cell converged; nothing selected")
        return surface
    best = surface.residual[ok].min()
    tol = 1e-12 * max(abs(best), np.finfo(float).tiny)
    ties = np.argwhere(ok & (surface.residual <= best + tol))
    # argwhere is row-major, so the last entry is the lexicographically largest pair
    i, j = ties[-1]
    surface.selected = (float(nuc[i]), float(sparse[j]))
    surface.method = "cv"
    return surface


def write_surface(surface, path):
    """Delimited export, one row per grid cell, in full precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda_nuc", "lambda_sparse", "residual", "converged"])
        for ln, ls, res, ok in surface.rows():
            w.writerow([repr(ln), repr(ls), repr(res), int(ok)])
