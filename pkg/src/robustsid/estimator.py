"""scikit-learn style wrapper around :func:`robustsid.realization.identify`."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .hankel import HankelParams, IoRecord
from .realization import StateSpaceModel, estimate_x0, identify, simulate
from .solver import Penalties, SolveOptions

__all__ = ["RobustSubspaceIdentifier"]


class RobustSubspaceIdentifier(RegressorMixin, BaseEstimator):
    """Identify a state-space model from inputs ``X`` and outputs ``y``.

    Rows are time samples. ``y`` may contain NaN for unobserved outputs.
    After fitting, ``model_.x0`` is re-estimated so that :meth:`predict`
    simulates from the first sample of the sequence it is given, which makes
    ``predict(X_train)`` line up with ``y_train``.

    ``outliers_`` holds ``e_hat`` on the identification window, which starts
    at row ``s``.
    """

    def __init__(
        self,
        r=5,
        s=5,
        lambda_nuc=1.0,
        lambda_sparse=1.0,
        order="gap",
        max_iter=2000,
        tol_abs=1e-6,
        tol_rel=1e-4,
        rho=1.0,
    ):
        self.r = r
        self.s = s
        self.lambda_nuc = lambda_nuc
        self.lambda_sparse = lambda_sparse
        self.order = order
        self.max_iter = max_iter
        self.tol_abs = tol_abs
        self.tol_rel = tol_rel
        self.rho = rho

    def fit(self, X, y):
        X = check_array(X, ensure_min_samples=self.r + self.s)
        y = check_array(y, ensure_2d=False, ensure_all_finite="allow-nan")
        self._flat_output = y.ndim == 1
        y = y[:, None] if y.ndim == 1 else y
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} samples but y has {y.shape[0]}")
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]

        record = IoRecord(X, y)
        params = HankelParams.for_length(len(record), r=self.r, s=self.s)
        opts = SolveOptions(
            max_iter=self.max_iter, tol_abs=self.tol_abs, tol_rel=self.tol_rel, rho=self.rho
        )
        ident = identify(
            record, params, Penalties(self.lambda_nuc, self.lambda_sparse), opts, self.order
        )
        self.solve_result_ = ident.solve
        self.singular_values_ = ident.singular_values
        self.outliers_ = ident.solve.e_hat
        self.y_hat_ = ident.solve.y_hat
        self.params_ = params

        # move the initial state back to row 0 using the cleaned outputs
        cleaned = record.filled_outputs()
        window = slice(params.s, params.s + params.window_length)
        cleaned[window] += ident.solve.e_hat
        m = ident.model
        self.model_ = StateSpaceModel(m.A, m.B, m.C, m.D, estimate_x0(m, X, cleaned, record.observed))
        self.n_x_ = m.n_x
        return self

    def _check_inputs(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X):
        X = self._check_inputs(X)
        y = simulate(self.model_, X)
        return y[:, 0] if self._flat_output else y

    def transform(self, X):
        """State trajectory ``x(k)`` driven by ``X``, shape ``(n_samples, n_x)``."""
        X = self._check_inputs(X)
        m = self.model_
        states = np.empty((X.shape[0], m.n_x))
        x = m.x0.copy()
        for k, u in enumerate(X):
            states[k] = x
            x = m.A @ x + m.B @ u
        return states

