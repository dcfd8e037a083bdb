import numpy as np
import pytest


def central_diff(f, x, step=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = f(x)
        x[i] = orig - step
        lo = f(x)
        x[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return g


def max_rel_err(a, b, floor=1e-6):
    """Elementwise |a-b| / max(|a|, |b|, floor), maximised; the floor keeps
    entries that are zero analytically from dividing by rounding noise."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria outcomes, printed once at the end of the session
ACCEPTANCE = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE[number] = (ok, detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
