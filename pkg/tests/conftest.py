import os

import hypothesis
import numpy as np
import pytest

from src.core.funcspace import STANDARD_FUNCTION, FunctionSpec, parse_function
from src.core.reducer import ReductionConfig
from src.core.signsolver import SolverParams

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=60, deadline=None, derandomize=True)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture
def standard_function() -> FunctionSpec:
    return parse_function(STANDARD_FUNCTION)


@pytest.fixture
def constant_function() -> FunctionSpec:
    return FunctionSpec.builtin("const", 0.3)


@pytest.fixture
def tiny_config() -> ReductionConfig:
    """A reduction small enough for unit tests: depth 8, u <= 3, two steps per stage."""
    return ReductionConfig(depth=8, eta=0.125, u_max=3, m_max=1, delta_min=2.0 ** -4, mc_samples=128, seed=7,
                           solver=SolverParams(), threads=1)
