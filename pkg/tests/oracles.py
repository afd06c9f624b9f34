"""Independent reference solvers used only by the tests."""

import numpy as np

from robustsid.hankel import adjoint_g, apply_g


def huber(x, lam):
    ax = np.abs(x)
    return np.where(ax <= lam / 2, x**2, lam * ax - lam**2 / 4)


def huber_grad(x, lam):
    return np.where(np.abs(x) <= lam / 2, 2 * x, lam * np.sign(x))


def project_spectral_ball(W, radius):
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    return (U * np.minimum(s, radius)) @ Vt


def nuclear_prox(op, v, c, W0, tol=1e-13, max_iter=20000):
    """``argmin_y 0.5||y - v||^2 + c ||G(y)||_*`` through its dual over ``{||W||_2 <= c}``."""
    L = np.linalg.eigvalsh(op.gram)[-1]
    W = W0.copy()
    Z, t = W.copy(), 1.0
    for _ in range(max_iter):
        W_new = project_spectral_ball(Z + apply_g(op, v - adjoint_g(op, Z)) / L, c)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        Z = W_new + (t - 1) / t_new * (W_new - W)
        done = np.linalg.norm(W_new - W) <= tol * max(1.0, np.linalg.norm(W_new))
        W, t = W_new, t_new
        if done:
            break
    return v - adjoint_g(op, W), W


def huber_objective(y, y_meas, observed, lam_nuc, lam_sparse, op):
    fit = huber(y - y_meas, lam_sparse)[observed].sum()
    return lam_nuc * np.linalg.svd(apply_g(op, y), compute_uv=False).sum() + fit


def proximal_gradient(op, y_meas, observed, lam_nuc, lam_sparse, tol=1e-9, max_iter=20000):
    """FISTA on the Huber form; the smooth part has Lipschitz constant 2."""
    mask = observed[:, None].astype(float)
    step = 0.5
    y = y_meas * mask
    z, t = y.copy(), 1.0
    W = np.zeros(op.output_shape)
    obj = huber_objective(y, y_meas, observed, lam_nuc, lam_sparse, op)
    for _ in range(max_iter):
        grad = mask * huber_grad(z - y_meas, lam_sparse)
        y_new, W = nuclear_prox(op, z - step * grad, step * lam_nuc, W)
        new_obj = huber_objective(y_new, y_meas, observed, lam_nuc, lam_sparse, op)
        if new_obj > obj:
            # restart the momentum when the objective goes up
            z, t = y.copy(), 1.0
            continue
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        z = y_new + (t - 1) / t_new * (y_new - y)
        moved = np.linalg.norm(y_new - y)
        y, t = y_new, t_new
        done = obj - new_obj <= tol * max(abs(new_obj), 1e-300) and moved <= tol * max(1.0, np.linalg.norm(y))
        obj = new_obj
        if done:
            break
    return y, obj
