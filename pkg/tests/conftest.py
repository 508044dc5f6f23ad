import numpy as np
import pytest

from headmask import gradcore as gc


def numeric_grad(f, arr: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + step
        hi = f()
        arr[i] = orig - step
        lo = f()
        arr[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def check_grads(build, inputs: list[np.ndarray], tol: float = 1e-6) -> float:
    """Compare autodiff and finite-difference gradients of ``build(*tensors) -> scalar Tensor``."""
    tensors = [gc.Tensor(x, requires_grad=True) for x in inputs]
    loss = build(*tensors)
    gc.backward(loss)
    worst = 0.0
    for t, x in zip(tensors, inputs):
        def f():
            with gc.no_grad():
                return float(build(*[gc.Tensor(v) for v in inputs]).data)
        num = numeric_grad(f, x)
        worst = max(worst, rel_err(t.grad, num))
    assert worst < tol, worst
    return worst


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[str, str] = {}


def record_criterion(key: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[key] = f"{'PASS' if passed else 'FAIL'}  {key}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (k[0], int(k[1:].split()[0]))):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
