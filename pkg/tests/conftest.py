import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spikeseg import tensor as tn

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numpy", "torch"])
def backend(request):
    """Run a test once per available convolution backend."""
    before = tn.get_backend()
    try:
        tn.set_backend(request.param)
    except Exception:
        pytest.skip(f"{request.param} backend unavailable")
    yield request.param
    tn.set_backend(before)


def central_diff(f, x, eps):
    """Elementwise central differences of scalar ``f`` at ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def pytest_terminal_summary(terminalreporter):
    from helpers import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
