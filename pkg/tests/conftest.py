import numpy as np
import pytest
from hypothesis import settings

from xlab import tensor as T

settings.register_profile("xlab", deadline=None, max_examples=40)
settings.load_profile("xlab")


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f() with respect to ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        hi = f()
        arr[i] = old - eps
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(analytic, numeric) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(numeric).max(initial=0), np.abs(analytic).max(initial=0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0) / scale)


def check_grads(build, leaves, eps=1e-5):
    """``build()`` returns a scalar Tensor from ``leaves``; returns the worst relative error."""
    for leaf in leaves:
        leaf.zero_grad()
    with T.Tape():
        loss = build()
        T.backward(loss)
    worst = 0.0
    for leaf in leaves:
        def f():
            with T.no_grad():
                return build().item()

        worst = max(worst, rel_err(leaf.grad, numeric_grad(f, leaf.data, eps)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
