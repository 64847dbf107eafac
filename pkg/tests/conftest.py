import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sekf_transfer import _pykernels, node_model, nn_core, systems

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

try:
    from sekf_transfer import _kernels
except ImportError:  # extension not built
    _kernels = None

KERNEL_MODULES = [pytest.param(_pykernels, id="python")]
if _kernels is not None:
    KERNEL_MODULES.append(pytest.param(_kernels, id="cython"))


@pytest.fixture(params=KERNEL_MODULES)
def backend(request, monkeypatch):
    """Run the test once per available kernel implementation."""
    for mod in (nn_core, node_model, systems):
        monkeypatch.setattr(mod, "kernels", request.param)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
