import numpy as np
import pytest

from aerodrag import shapes
from aerodrag.autodiff import Tape, Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f at x (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def analytic_grad(build, x: np.ndarray) -> np.ndarray:
    """Gradient of the scalar tensor ``build(Tensor)`` with respect to its input."""
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        out = build(t)
    tape.backward(out)
    return t.grad


@pytest.fixture
def cube():
    return shapes.unit_cube()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> PASS/FAIL line, filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
