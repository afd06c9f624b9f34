"""Shutoff values of the two penalties.

Above ``lambda_sparse_max`` the outlier estimate is identically zero; above
``lambda_nuc_max`` the filtered output carries no rank, ``G(y_hat) = 0``. The useful
tuning region is the box ``(0, lambda_nuc_max] x (0, lambda_sparse_max]``.

``lambda_nuc_max`` is the optimal value of

    min ||W||_2   subject to   G*(W) = g,

where ``g`` is the Huber gradient at ``y = 0``. The program is solved by ADMM
on ``W = X``; every ``W`` iterate is an exact projection onto the affine
constraint set, so ``||W||_2`` is always a valid upper bound, and the scaled
dual yields a matching lower bound from ``max <g, y> s.t. ||G(y)||_* <= 1``.
Iteration stops when the two agree to ``rtol``.

``G`` always annihilates static feedthrough outputs ``y = D u`` (and possibly
more), so for generic data no ``W`` meets the constraints and ``y`` never
becomes zero. In that case the shutoff is the point where ``G(y_hat) = 0``:
``y_hat`` is then the Huber fit of ``y_meas`` inside ``null(G)`` and the
certificate is computed for the gradient at that fit. When ``y_meas`` has no
component the operator cannot see, the fit is zero and both programs coincide.
"""

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateProblemError, InfeasibleCertificateError
from .hankel import adjoint_g, apply_g, as_sequence

__all__ = [
    "PenaltyBounds",
    "NuclearCertificate",
    "lambda_sparse_max",
    "huber_gradient_at_zero",
    "nuclear_certificate",
    "lambda_nuc_max",
    "nullspace_fit",
    "shutoff_gradient",
    "nuclear_lower_bound",
    "penalty_bounds",
]


@dataclass(frozen=True)
class PenaltyBounds:
    lambda_sparse_max: float
    lambda_nuc_max: float
    lambda_sparse_used: float

    def as_dict(self):
        return {
            "lambda_sparse_max": self.lambda_sparse_max,
            "lambda_nuc_max": self.lambda_nuc_max,
            "lambda_sparse_used": self.lambda_sparse_used,
        }


@dataclass
class NuclearCertificate:
    """Result of the spectral-norm program.

    ``W`` satisfies the constraints exactly (up to rounding) and
    ``lower <= optimum <= value = ||W||_2``.
    """

    value: float
    lower: float
    W: np.ndarray
    iterations: int
    converged: bool
    y_limit: np.ndarray = None


# relative size of the gradient component left in the nullspace of G by the fit
STATIONARITY_RTOL = 1e-6


def _mask(y_meas, observed):
    if observed is None:
        return np.ones(y_meas.shape[0], dtype=bool)
    return np.asarray(observed, dtype=bool)


def lambda_sparse_max(y_meas, observed=None):
    """``2 * max |y_meas|`` over observed samples and channels."""
    y_meas = as_sequence(y_meas)
    obs = _mask(y_meas, observed)
    if not obs.any():
        raise DegenerateProblemError("no observed samples")
    return 2.0 * float(np.max(np.abs(y_meas[obs])))


def huber_gradient_at_zero(y_meas, lambda_sparse, observed=None):
    """Negated gradient of the Huber fit term at ``y = 0``, per sample and channel."""
    if lambda_sparse < 0:
        raise ValueError("lambda_sparse must be nonnegative")
    y_meas = as_sequence(y_meas)
    obs = _mask(y_meas, observed)
    if math.isinf(lambda_sparse):
        g = 2.0 * y_meas
    else:
        g = np.where(
            np.abs(y_meas) <= lambda_sparse / 2,
            2.0 * y_meas,
            lambda_sparse * np.sign(y_meas),
        )
    g[~obs] = 0.0
    return g


def _cap_singular_values(s, budget):
    """Singular values of ``prox_{budget * ||.||_2}``: ``s`` clipped at a common cap.

    The cap ``c`` solves ``sum(max(s - c, 0)) = budget``; it is zero when the
    whole spectrum fits within the budget.
    """
    if budget >= s.sum():
        return np.zeros_like(s)
    # s is sorted descending; find c with sum_{i<k}(s_i - c) = budget
    cums = np.cumsum(s)
    k = np.arange(1, s.size + 1)
    caps = (cums - budget) / k
    nxt = np.append(s[1:], 0.0)
    idx = np.flatnonzero(caps >= nxt)[0]
    return np.minimum(s, caps[idx])


class _AffineProjector:
    """Projection onto ``{W : G*(W) = g}``."""

    def __init__(self, op, g):
        self.op = op
        self.g = g
        self.split = op.gram_split

    def gram_pinv(self, x):
        return self.split.pinv(x)

    def __call__(self, V):
        return V - apply_g(self.op, self.gram_pinv(adjoint_g(self.op, V) - self.g))


def nuclear_certificate(op, g, rtol=1e-6, max_iter=20000, check_every=10, target=None):
    """Solve ``min ||W||_2 s.t. adjoint_g(op, W) = g`` to relative gap ``rtol``.

    With ``target`` set, iteration also stops as soon as the bounds decide
    whether the optimum lies above or below it.
    """
    g = as_sequence(g)
    gscale = float(np.max(np.abs(g))) if g.size else 0.0
    if gscale == 0.0:
        return NuclearCertificate(0.0, 0.0, np.zeros(op.output_shape), 0, True)

    proj = _AffineProjector(op, g)
    W = proj(np.zeros(op.output_shape))
    resid = float(np.max(np.abs(adjoint_g(op, W) - g)))
    if resid > 1e-8 * gscale:
        raise InfeasibleCertificateError(
            f"dual certificate infeasible (least-squares residual {resid:.3e})",
            residual=resid,
        )

    best_W = W
    upper = float(np.linalg.norm(W, 2))
    lower = 0.0
    rho = 1.0 / upper
    X = W.copy()
    Ud = np.zeros_like(W)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        X_old = X
        V = W + Ud
        Uv, s, Vt = np.linalg.svd(V, full_matrices=False)
        X = (Uv * _cap_singular_values(s, 1.0 / rho)) @ Vt
        Ud += W - X
        W = proj(X - Ud)

        if it % check_every == 0 or it == max_iter:
            val = float(np.linalg.norm(W, 2))
            if val < upper:
                upper, best_W = val, W
            # rho * Ud lies in the subdifferential of ||X||_2, hence in the
            # dual ball; map it back to a dual point y and normalize
            y = proj.gram_pinv(adjoint_g(op, rho * Ud))
            Gy = apply_g(op, y)
            nuc = float(np.sum(np.linalg.svd(Gy, compute_uv=False)))
            if nuc > 0:
                lower = max(lower, float(np.sum(g * y)) / nuc)
            if upper - lower <= rtol * upper:
                converged = True
                break
            if target is not None and (upper <= target or lower > target):
                break
            r = np.linalg.norm(W - X)
            sd = rho * np.linalg.norm(X - X_old)
            if r > 10.0 * sd:
                rho *= 2.0
                Ud /= 2.0
            elif sd > 10.0 * r:
                rho /= 2.0
                Ud *= 2.0

    return NuclearCertificate(upper, lower, best_W, it, converged)


def _huber_loss(x, lam):
    ax = np.abs(x)
    return np.where(ax <= lam / 2, x**2, lam * ax - lam**2 / 4)


def _huber_fit(basis, target, lam, max_iter=500):
    """Coefficients minimizing ``sum huber(basis @ c - target)``.

    Semismooth Newton on the piecewise-quadratic loss. Rows on the linear
    branch give no curvature, so the Newton matrix is lightly regularized
    (long steps along such directions are what the line search wants) and a
    steepest-descent step is tried whenever the Newton step makes no progress.
    """
    c = np.linalg.lstsq(basis, target, rcond=None)[0]
    if math.isinf(lam):
        return c
    if lam == 0:
        return np.zeros_like(c)
    n = basis.shape[1]
    gram_scale = max(float(np.sum(basis**2)) / max(n, 1), 1e-300)
    tol = 1e-13 * max(1.0, float(np.max(np.abs(target)))) * max(lam, 1.0) * np.sqrt(gram_scale)

    def loss(cc):
        return float(np.sum(_huber_loss(basis @ cc - target, lam)))

    def search(cc, f, step, slope):
        t = 1.0
        while t >= 1e-14:
            c_new = cc + t * step
            f_new = loss(c_new)
            if f_new <= f + 1e-4 * t * slope:
                return c_new, f_new
            t /= 2.0
        return None

    f = loss(c)
    for _ in range(max_iter):
        r = basis @ c - target
        quad = np.abs(r) <= lam / 2
        grad = basis.T @ np.where(quad, 2.0 * r, lam * np.sign(r))
        if np.linalg.norm(grad) <= tol:
            break
        Bq = basis[quad]
        H = 2.0 * Bq.T @ Bq + 1e-9 * gram_scale * np.eye(n)
        step = -np.linalg.solve(H, grad)
        found = search(c, f, step, float(grad @ step))
        if found is None or found[1] >= f:
            # steepest descent, scaled to the curvature of the whole basis
            step = -grad / (2.0 * gram_scale)
            found = search(c, f, step, -float(grad @ grad) / (2.0 * gram_scale))
        if found is None or found[1] >= f:
            break
        c, f = found
    return c


def nullspace_fit(op, y_meas, lambda_sparse, observed=None):
    """Minimizer of the fit term over outputs with ``G(y) = 0``.

    With ``e`` minimized out the fit term is a Huber loss, and it decouples
    over channels because the nullspace acts identically on each of them.
    """
    y_meas = as_sequence(y_meas)
    obs = (
        np.ones(y_meas.shape[0], dtype=bool)
        if observed is None
        else np.asarray(observed, dtype=bool)
    )
    basis = op.gram_split.null_vecs
    y_lim = np.zeros_like(y_meas)
    if basis.shape[1] == 0 or not obs.any():
        return y_lim
    for ch in range(y_meas.shape[1]):
        c = _huber_fit(basis[obs], y_meas[obs, ch], lambda_sparse)
        y_lim[:, ch] = basis @ c
    return y_lim


def shutoff_gradient(op, y_meas, lambda_sparse, observed=None):
    """Corner point ``y_limit`` and the gradient the certificate must reproduce."""
    y_meas = as_sequence(y_meas)
    obs = _mask(y_meas, observed)
    y_lim = nullspace_fit(op, y_meas, lambda_sparse, obs)
    g = huber_gradient_at_zero(y_meas - y_lim, lambda_sparse, obs)
    # optimality of the fit puts g in range(G*); drop the rounding residue
    g_range = op.gram_split.drop_null(g)
    gap = float(np.max(np.abs(g - g_range))) if g.size else 0.0
    if gap > STATIONARITY_RTOL * max(float(np.max(np.abs(g))), np.finfo(float).tiny):
        raise InfeasibleCertificateError(
            f"nullspace fit is not stationary (gradient residue {gap:.3e})", residual=gap
        )
    return y_lim, g_range


def nuclear_lower_bound(op, g, y=None):
    """``<g, y> / ||G(y)||_*``, a lower bound on the certificate value for any ``y``."""
    g = as_sequence(g)
    y = g if y is None else as_sequence(y)
    nuc = float(np.sum(np.linalg.svd(apply_g(op, y), compute_uv=False)))
    return float(np.sum(g * y)) / nuc if nuc > 0 else 0.0


def lambda_nuc_max(
    op, y_meas, lambda_sparse, observed=None, rtol=1e-6, strict=False, certificate=False
):
    """Smallest nuclear weight at which ``G(y_hat) = 0``.

    With ``strict=True`` the constraints use the gradient at ``y = 0`` only and
    :class:`InfeasibleCertificateError` is raised when ``y = 0`` can never be
    optimal. Pass ``certificate=True`` to get the full :class:`NuclearCertificate`.
    """
    y_meas = as_sequence(y_meas)
    obs = _mask(y_meas, observed)
    if strict:
        y_lim = np.zeros_like(y_meas)
        g = huber_gradient_at_zero(y_meas, lambda_sparse, obs)
    else:
        y_lim, g = shutoff_gradient(op, y_meas, lambda_sparse, obs)
    cert = nuclear_certificate(op, g, rtol=rtol)
    cert.y_limit = y_lim
    return cert if certificate else cert.value


def penalty_bounds(op, y_meas, observed=None, rtol=1e-6):
    """Both shutoff values, the nuclear one taken at ``lambda_sparse_max``."""
    lam_s = lambda_sparse_max(y_meas, observed)
    lam_n = lambda_nuc_max(op, y_meas, lam_s, observed, rtol=rtol)
    return PenaltyBounds(
        lambda_sparse_max=lam_s, lambda_nuc_max=lam_n, lambda_sparse_used=lam_s
    )
