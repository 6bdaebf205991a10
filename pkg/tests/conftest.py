import numpy as np
import pytest

from schedfilt.presets import build_preset


@pytest.fixture(scope="session")
def ou_scenario():
    return build_preset("ou_kalman")


@pytest.fixture(scope="session")
def medical_scenario():
    return build_preset("medical")


@pytest.fixture(scope="session")
def credit_scenario():
    return build_preset("credit_risk")


@pytest.fixture(scope="session")
def njode_scenario():
    return build_preset("njode_style")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
