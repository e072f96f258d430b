import numpy as np
import pytest

from tumorseg.tensor import Parameter, Tape, backward, no_grad


def _fd_check(build_loss, arrays, h=1e-6):
    """Return max norm-relative error between tape and central-difference gradients.

    ``build_loss`` maps a list of Parameters to a scalar Tensor.
    """
    params = [Parameter(np.array(a, dtype=np.float64), id=f"in{i}") for i, a in enumerate(arrays)]
    with Tape():
        loss = build_loss(params)
    backward(loss)
    worst = 0.0
    for p in params:
        numeric = np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            with no_grad():
                p.data[idx] = orig + h
                up = build_loss(params).item()
                p.data[idx] = orig - h
                down = build_loss(params).item()
            p.data[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(numeric), np.linalg.norm(p.grad), 1e-12)
        worst = max(worst, np.linalg.norm(numeric - p.grad) / denom)
    return worst


@pytest.fixture
def fd_check():
    return _fd_check


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
