from importlib import resources

import numpy as np
import pytest

from posepair.body import generate_corpus, load_body
from posepair.kinematics import load_profile, load_urdf
from posepair.prior import PosePrior

DATA = resources.files("posepair.data")


@pytest.fixture(scope="session")
def body():
    return load_body()


@pytest.fixture(scope="session")
def reachy():
    return load_profile(DATA / "reachy_like.json")


@pytest.fixture(scope="session")
def arm():
    return load_urdf(DATA / "test_arm_7dof.urdf")


@pytest.fixture(scope="session")
def small_prior(body):
    """Tiny prior, enough for plumbing tests."""
    X = generate_corpus(body, 1500, 8, seed=0).reshape(1500, -1)
    return PosePrior(latent_dim=8, hidden_dim=64, epochs=8, random_state=0).fit(X)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record(criterion, passed, detail):
    """Store one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} | {detail}")
