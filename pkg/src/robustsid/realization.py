"""Order selection and state-space realization from filtered outputs.

The pipeline is: ``G_hat = G(y_hat)``, truncated SVD ``G_hat ~ P diag(S) Q^T``,
``(A, C)`` from the shift structure of ``P`` and finally a linear least
squares fit of ``(B, D, x0)`` against the cleaned outputs. Models are only
ever compared through their input/output behaviour since ``P`` fixes the
state basis arbitrarily.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    NonConvergenceError,
    OrderSelectionError,
    RankDeficientWarning,
    RecordTooShortError,
)
from .hankel import IoRecord, apply_g, as_sequence, build_g_operator
from .solver import SolveOptions, problem_from_record, solve_robust

__all__ = [
    "StateSpaceModel",
    "SvdSplit",
    "OrderPolicy",
    "estimate_g_hat",
    "svd_split",
    "select_order",
    "estimate_ac",
    "estimate_bd_x0",
    "simulate",
    "estimate_x0",
    "identify",
    "realize",
    "Identification",
]

logger = logging.getLogger(__name__)

SV_FLOOR = 1e-12
# singular values of G(y_hat) below this fraction of ||G(y_meas)|| are zero
ZERO_RTOL = 1e-9


@dataclass
class StateSpaceModel:
    """``x(k+1) = A x(k) + B u(k)``, ``y(k) = C x(k) + D u(k)``, ``x(0) = x0``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    x0: np.ndarray

    def __post_init__(self):
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        n_p, n_m = self.D.shape
        A = np.asarray(self.A, dtype=float)
        self.A = np.atleast_2d(A) if A.size else np.zeros((0, 0))
        n_x = self.A.shape[0]
        if self.A.shape != (n_x, n_x):
            raise ValueError(f"A must be square, got shape {self.A.shape}")
        self.B = np.asarray(self.B, dtype=float).reshape(n_x, n_m)
        self.C = np.asarray(self.C, dtype=float).reshape(n_p, n_x)
        self.x0 = np.asarray(self.x0, dtype=float).reshape(n_x)

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_inputs(self):
        return self.D.shape[1]

    @property
    def n_outputs(self):
        return self.D.shape[0]

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("A", "B", "C", "D", "x0")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(d[k], dtype=float) for k in ("A", "B", "C", "D", "x0")})


@dataclass
class SvdSplit:
    P: np.ndarray
    Sigma: np.ndarray
    Q: np.ndarray
    sigma_tail: np.ndarray


@dataclass(frozen=True)
class OrderPolicy:
    """How to read the model order off a singular value spectrum.

    ``kind`` is ``"gap"`` (largest ratio of consecutive values), ``"fixed"``
    (``value`` is the order) or ``"threshold"`` (count values above
    ``value * sigma_1``).
    """

    kind: str = "gap"
    value: float = None

    def __post_init__(self):
        if self.kind not in ("gap", "fixed", "threshold"):
            raise ValueError(f"unknown order policy {self.kind!r}")
        if self.kind == "fixed" and (self.value is None or int(self.value) != self.value or self.value < 0):
            raise ValueError("fixed order policy needs a nonnegative integer")
        if self.kind == "threshold" and not (self.value is not None and 0 < self.value < 1):
            raise ValueError("threshold policy needs a value in (0, 1)")

    @classmethod
    def parse(cls, text):
        """Parse ``gap``, ``fixed:N`` or ``threshold:T``."""
        if isinstance(text, OrderPolicy):
            return text
        kind, _, arg = str(text).partition(":")
        kind = kind.strip()
        if kind == "gap":
            if arg:
                raise ValueError("gap policy takes no argument")
            return cls("gap")
        if not arg:
            raise ValueError(f"order policy {kind!r} needs an argument, e.g. {kind}:2")
        if kind == "fixed":
            return cls("fixed", int(arg))
        return cls(kind, float(arg))

    def __str__(self):
        return self.kind if self.kind == "gap" else f"{self.kind}:{self.value:g}"


def estimate_g_hat(y_hat, op):
    return apply_g(op, y_hat)


def svd_split(G_hat, n_x):
    U, s, Vt = np.linalg.svd(G_hat, full_matrices=False)
    if n_x > s.size:
        raise OrderSelectionError(f"order {n_x} exceeds the {s.size} available singular values")
    return SvdSplit(P=U[:, :n_x], Sigma=s[:n_x], Q=Vt[:n_x].T, sigma_tail=s[n_x:])


def select_order(singular_values, policy="gap", max_order=None, atol=0.0):
    """Model order from a nonincreasing singular value sequence.

    Values at or below ``atol`` count as exact zeros; ``identify`` sets it from
    the scale of the data so that rounding noise in ``G(y_hat) = 0`` reads as
    order zero.
    """
    sv = np.asarray(singular_values, dtype=float).ravel()
    if sv.size == 0:
        raise OrderSelectionError("empty singular value sequence")
    if np.any(sv < 0) or np.any(np.diff(sv) > 1e-12 * max(sv[0], 1.0)):
        raise ValueError("singular values must be nonnegative and nonincreasing")
    policy = OrderPolicy.parse(policy)
    limit = sv.size if max_order is None else min(sv.size, max_order)

    if policy.kind == "fixed":
        n = int(policy.value)
        if n > limit:
            raise OrderSelectionError(f"fixed order {n} exceeds the {limit} admissible values")
        return n
    if sv[0] <= atol:
        return 0
    if policy.kind == "threshold":
        return min(int(np.count_nonzero(sv > policy.value * sv[0])), limit)

    floor = max(SV_FLOOR * sv[0], atol)
    n_sig = int(np.count_nonzero(sv > floor))
    # candidate orders 1..limit need a following value; a ratio onto an exact zero is infinite
    best_n, best_ratio = None, 1.0
    for n in range(1, limit + 1):
        if n > n_sig or n >= sv.size:
            break
        nxt = sv[n]
        ratio = np.inf if nxt <= floor else sv[n - 1] / nxt
        if ratio > best_ratio * (1.0 + 1e-9):
            best_n, best_ratio = n, ratio
    if best_n is None:
        raise OrderSelectionError("no significant gap in the singular value spectrum")
    return best_n


def estimate_ac(V_basis, r, n_p):
    """``C = V_0`` and ``A`` from the shift equations ``V_i = V_{i-1} A``."""
    if r < 2:
        raise ValueError("r must be >= 2 to form shift equations")
    V = np.asarray(V_basis, dtype=float)
    if V.shape[0] != r * n_p:
        raise ValueError(f"V_basis must have {r * n_p} rows, got {V.shape[0]}")
    n_x = V.shape[1]
    C = V[:n_p].copy()
    if n_x == 0:
        return np.zeros((0, 0)), C
    upper, lower = V[:-n_p], V[n_p:]
    A, _, rank, _ = np.linalg.lstsq(upper, lower, rcond=None)
    if rank < n_x:
        warnings.warn(
            f"shift equations have rank {rank} < {n_x}; using the minimum-norm A",
            RankDeficientWarning,
            stacklevel=2,
        )
    return A, C


def _regressors(A, C, u):
    """Rows mapping ``theta = [x0; vec(B); vec(D)]`` to ``y(k)`` (column-major vec)."""
    T, n_m = u.shape
    n_x = A.shape[0]
    n_p = C.shape[0]
    n_theta = n_x + n_x * n_m + n_p * n_m
    rows = np.zeros((T, n_p, n_theta))
    # S is d x(k) / d [x0; vec(B)]
    S = np.hstack([np.eye(n_x), np.zeros((n_x, n_x * n_m))])
    I_x = np.eye(n_x)
    I_p = np.eye(n_p)
    for k in range(T):
        rows[k, :, : S.shape[1]] = C @ S
        rows[k, :, S.shape[1] :] = np.kron(u[k][None, :], I_p)
        S = A @ S
        S[:, n_x:] += np.kron(u[k][None, :], I_x)
    return rows


def estimate_bd_x0(A, C, record):
    """Least-squares ``(B, D, x0)`` of the simulated-output mismatch on observed samples.

    Returns ``(B, D, x0, residual)`` where ``residual`` is the summed squared
    mismatch at the solution.
    """
    if not isinstance(record, IoRecord):
        raise TypeError("record must be an IoRecord")
    A = np.atleast_2d(np.asarray(A, dtype=float)) if np.size(A) else np.zeros((0, 0))
    C = np.asarray(C, dtype=float).reshape(record.n_outputs, A.shape[0])
    n_x, n_m, n_p = A.shape[0], record.n_inputs, record.n_outputs
    rows = _regressors(A, C, record.inputs)[record.observed]
    target = record.outputs[record.observed]
    X = rows.reshape(-1, rows.shape[-1])
    y = target.reshape(-1)
    if X.shape[0] == 0:
        raise RecordTooShortError("no observed samples to fit B, D, x0")
    # equilibrate columns: an unstable A makes some regressors explode
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    theta, _, rank, _ = np.linalg.lstsq(X / scale, y, rcond=None)
    theta = theta / scale
    if rank < X.shape[1] and np.any(X):
        warnings.warn(
            f"B/D/x0 regression has rank {rank} < {X.shape[1]}; using the minimum-norm solution",
            RankDeficientWarning,
            stacklevel=2,
        )
    residual = float(np.sum((X @ theta - y) ** 2))
    x0 = theta[:n_x]
    B = theta[n_x : n_x + n_x * n_m].reshape(n_m, n_x).T
    D = theta[n_x + n_x * n_m :].reshape(n_m, n_p).T
    return B, D, x0, residual


def estimate_x0(model, u, y, observed=None):
    """Least-squares initial state for the sequence ``(u, y)`` with ``A, B, C, D`` fixed."""
    u = as_sequence(u)
    y = as_sequence(y)
    obs = np.ones(len(u), dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    if model.n_x == 0:
        return np.zeros(0)
    free = StateSpaceModel(model.A, model.B, model.C, model.D, np.zeros(model.n_x))
    forced = simulate(free, u)
    rows = _regressors(model.A, model.C, u)[:, :, : model.n_x][obs]
    target = (y - forced)[obs]
    x0, *_ = np.linalg.lstsq(rows.reshape(-1, model.n_x), target.reshape(-1), rcond=None)
    return x0


def simulate(model, u):
    """Noise-free response of ``model`` to the input sequence ``u``."""
    u = as_sequence(u)
    if u.shape[1] != model.n_inputs:
        raise ValueError(f"input has {u.shape[1]} channels, model expects {model.n_inputs}")
    y = np.empty((u.shape[0], model.n_outputs))
    x = model.x0.copy()
    for k in range(u.shape[0]):
        y[k] = model.C @ x + model.D @ u[k]
        x = model.A @ x + model.B @ u[k]
    return y


@dataclass
class Identification:
    model: StateSpaceModel
    solve: object
    singular_values: np.ndarray
    bd_residual: float
    op: object = None

    def __iter__(self):
        return iter((self.model, self.solve))


def identify(record, params, penalties, opts=None, order_policy="gap", op=None):
    """Robust filtering followed by realization over the identification window.

    Returns an :class:`Identification`. The regression for ``B, D, x0`` uses
    the measured outputs with the estimated outliers removed, ``y_meas + e_hat``,
    on observed samples only.
    """
    if len(record) == 0:
        raise RecordTooShortError("empty record")
    if op is None:
        op = build_g_operator(record, params)
    problem = problem_from_record(record, params, penalties, op=op)
    result = solve_robust(problem, opts or SolveOptions())
    if not result.converged:
        raise NonConvergenceError(
            f"robust solve did not converge in {result.iterations} iterations "
            f"(primal {result.primal_residual:.3g}, dual {result.dual_residual:.3g})",
            result=result,
        )

    return realize(record, params, problem, result, order_policy, op)


def realize(record, params, problem, result, order_policy="gap", op=None):
    """Realization step of :func:`identify` for an existing solve."""
    op = problem.op if op is None else op
    G_hat = estimate_g_hat(result.y_hat, op)
    sv = np.linalg.svd(G_hat, compute_uv=False)
    data_scale = np.linalg.norm(estimate_g_hat(problem.y_meas, op), 2)
    n_x = select_order(
        sv,
        order_policy,
        max_order=(params.r - 1) * record.n_outputs,
        atol=ZERO_RTOL * data_scale,
    )
    split = svd_split(G_hat, n_x)
    A, C = estimate_ac(split.P, params.r, record.n_outputs)

    window = record.window(params.s, params.s + params.window_length)
    cleaned = window.with_outputs(
        np.where(problem.observed[:, None], problem.y_meas + result.e_hat, np.nan)
    )
    B, D, x0, resid = estimate_bd_x0(A, C, cleaned)
    model = StateSpaceModel(A=A, B=B, C=C, D=D, x0=x0)
    logger.debug("identified order %d, B/D/x0 residual %.3g", n_x, resid)
    return Identification(model=model, solve=result, singular_values=sv, bd_residual=resid, op=op)
