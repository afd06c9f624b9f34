import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from robustsid import RobustSubspaceIdentifier
from robustsid.experiments import make_benchmark


@pytest.fixture(scope="module")
def data():
    rec, model = make_benchmark(2, n_samples=120)
    return rec.inputs, rec.outputs, model


@pytest.fixture(scope="module")
def fitted(data):
    X, y, _ = data
    return RobustSubspaceIdentifier(lambda_nuc=0.0, lambda_sparse=np.inf).fit(X, y)


def test_recovers_clean_system(data, fitted):
    X, y, model = data
    assert fitted.n_x_ == model.n_x
    assert np.abs(fitted.predict(X) - y).max() <= 1e-6 * np.abs(y).max()
    assert fitted.score(X, y) == pytest.approx(1.0)


def test_transform_shape(data, fitted):
    X = data[0]
    states = fitted.transform(X)
    assert states.shape == (len(X), fitted.n_x_)
    np.testing.assert_allclose(states @ fitted.model_.C.T + X @ fitted.model_.D.T, fitted.predict(X))


def test_params_and_clone():
    est = RobustSubspaceIdentifier(r=4, lambda_sparse=2.5)
    params = est.get_params()
    assert params["r"] == 4 and params["lambda_sparse"] == 2.5
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "model_")
    assert est.set_params(s=3).s == 3


def test_nan_outputs_allowed(data):
    X, y, _ = data
    y = y.copy()
    y[30:33] = np.nan
    est = RobustSubspaceIdentifier(lambda_nuc=0.0, lambda_sparse=np.inf).fit(X, y)
    assert np.all(np.isfinite(est.predict(X)))


def test_one_dimensional_output(rng):
    X = rng.standard_normal((80, 1))
    y = np.convolve(X[:, 0], [1.0, 0.5, 0.25], mode="full")[:80]
    est = RobustSubspaceIdentifier(r=4, s=4, lambda_nuc=0.0, lambda_sparse=np.inf).fit(X, y)
    assert est.predict(X).shape == (80,)


def test_not_fitted(data):
    with pytest.raises(NotFittedError):
        RobustSubspaceIdentifier().predict(data[0])


def test_validation(data, fitted):
    X, y, _ = data
    with pytest.raises(ValueError):
        RobustSubspaceIdentifier().fit(X, y[:-1])
    with pytest.raises(ValueError):
        RobustSubspaceIdentifier().fit(X[:5], y[:5])
    with pytest.raises(ValueError):
        fitted.predict(X[:, :2])
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        RobustSubspaceIdentifier().fit(bad, y)
