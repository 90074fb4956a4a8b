import numpy as np
import pytest

from liser import tensor as T


def numeric_grad(f, arr, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_grads(build, inputs, rtol=1e-6, atol=1e-8):
    """Compare tape gradients of ``build(*tensors)`` (a scalar Tensor) with finite differences."""
    tensors = [T.Tensor(a, requires_grad=True) for a in inputs]
    with T.Tape() as tape:
        loss = build(*tensors)
    grads = tape.backward(loss, tensors)
    for t, g in zip(tensors, grads):
        num = numeric_grad(lambda: float(build(*tensors).data), t.data)
        np.testing.assert_allclose(g, num, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
