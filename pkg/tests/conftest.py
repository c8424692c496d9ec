import numpy as np
import pytest

from fgcprune.tensor import Tensor

FD_STEP = 1e-6


def numeric_grad(fn, arrays, h=FD_STEP):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            up = fn(*arrays)
            a[idx] = old - h
            down = fn(*arrays)
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    """Gradients from the autodiff path; ``build`` maps Tensors to a scalar Tensor."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*ts).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_grads(build, arrays, tol=1e-5):
    """Max relative error between autodiff and finite differences."""
    fn = lambda *xs: build(*[Tensor(x) for x in xs]).item()
    num = numeric_grad(fn, [a.copy() for a in arrays])
    ana = analytic_grad(build, arrays)
    return max(rel_err(x, y) for x, y in zip(ana, num))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_sessionstart(session):
    import time
    session.config._fgc_started = time.perf_counter()


def pytest_collection_modifyitems(session, config, items):
    # acceptance last, so the suite-runtime criterion sees every other test's cost
    items.sort(key=lambda it: it.module.__name__.endswith("test_acceptance"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
