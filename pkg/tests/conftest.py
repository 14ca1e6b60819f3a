import numpy as np
import pytest

from stridenet.tensor import Tensor, backward


def central_diff(loss_fn, arrays, step=1e-5, coords=None):
    """Central finite differences of ``loss_fn(arrays) -> float`` w.r.t. each array.

    ``coords`` optionally limits each array to a list of index tuples.
    Perturbs the arrays in place and restores them.
    """
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        idxs = coords[k] if coords is not None else list(np.ndindex(a.shape))
        for idx in idxs:
            old = a[idx]
            a[idx] = old + step
            up = loss_fn(arrays)
            a[idx] = old - step
            down = loss_fn(arrays)
            a[idx] = old
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def analytic_grads(build, arrays):
    """Gradients of ``build(tensors) -> scalar Tensor`` via the autodiff engine."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    return backward(build(ts), ts)


def check_grad(build, arrays, tol=1e-4):
    ana = analytic_grads(build, arrays)
    num = central_diff(lambda arrs: float(build([Tensor(a) for a in arrs]).data), arrays)
    errs = [rel_error(a, n) for a, n in zip(ana, num)]
    assert max(errs) < tol, errs
    return errs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# PASS/FAIL lines collected by the acceptance suite, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
