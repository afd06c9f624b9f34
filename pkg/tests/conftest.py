import numpy as np
import pytest

from robustsid.experiments import _random_stable_system
from robustsid.hankel import HankelParams, IoRecord, build_g_operator
from robustsid.realization import StateSpaceModel, simulate


def random_system(rng, n_x, n_m, n_p, radius=0.9):
    A, B, C, D = _random_stable_system(rng, n_x, n_m, n_p, radius)
    return StateSpaceModel(A, B, C, D, rng.standard_normal(n_x))


def noiseless_record(rng, model, T):
    u = rng.standard_normal((T, model.n_inputs))
    return IoRecord(u, simulate(model, u))


def random_record(rng, T, n_m=1, n_p=1):
    return IoRecord(rng.standard_normal((T, n_m)), rng.standard_normal((T, n_p)))


def random_operator(rng, r, s, N, n_p, n_m=1):
    params = HankelParams(r=r, s=s, N=N)
    rec = random_record(rng, params.required_length, n_m, n_p)
    return build_g_operator(rec, params), rec, params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
