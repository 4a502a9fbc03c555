import numpy as np
import pytest
from hypothesis import settings

from icl_gd.numerics import RngStream
from icl_gd.tasks import MlpTargetSpec, TaskSpec

# fixed example sequence so repeated runs exercise the same cases
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")

# Lines recorded by the acceptance tests, echoed once at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return RngStream(12345)


@pytest.fixture
def iso_spec():
    return TaskSpec.isotropic(3, 8, 0.5)


@pytest.fixture
def skew_spec():
    cov = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, -0.2], [0.0, -0.2, 0.5]])
    return TaskSpec.skewed(cov, 8, 0.5)


@pytest.fixture
def mlp_spec():
    return TaskSpec.nonlinear(MlpTargetSpec((3, 8, 1)), 8, 0.5)


@pytest.fixture(params=["isotropic", "skewed", "nonlinear"])
def any_spec(request, iso_spec, skew_spec, mlp_spec):
    return {"isotropic": iso_spec, "skewed": skew_spec, "nonlinear": mlp_spec}[request.param]
