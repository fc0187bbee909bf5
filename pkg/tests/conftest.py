from __future__ import annotations

import numpy as np
import pytest

from adwynn.model import (
    exponential_decay,
    michaelis_menten,
    one_param_exponential,
    polynomial,
)


@pytest.fixture(scope="session")
def mm_bundle():
    return michaelis_menten()


@pytest.fixture(scope="session")
def poly1_bundle():
    return polynomial(degree=1)


@pytest.fixture(scope="session")
def expdecay_bundle():
    return exponential_decay()


@pytest.fixture(scope="session")
def exp1_bundle():
    return one_param_exponential()


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)
