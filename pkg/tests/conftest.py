import numpy as np
import pytest

from multiscale_va import data as D
from multiscale_va import tensor as T


def numeric_grad(f, arrays, h=1e-6):
    """Five-point central differences of scalar ``f(*arrays)`` w.r.t. every input array.

    Truncation error is O(h**4), so a fairly large ``h`` keeps cancellation small.
    """
    grads = []
    for i, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            vals = []
            for step in (2 * h, h, -h, -2 * h):
                moved = [a.copy() for a in arrays]
                moved[i][idx] += step
                vals.append(f(*moved))
            g[idx] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
        grads.append(g)
    return grads


def max_rel_error(a, b, floor=1e-5):
    # entries below ``floor`` in magnitude are compared on an absolute scale:
    # exact-zero gradients come back from differencing as ~1e-13 roundoff
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_op_gradient(op, arrays, seed=0, h=1e-3):
    """Backprop vs central differences for ``sum(op(*tensors) * R)`` with random R."""
    rng = np.random.default_rng(seed)
    out_shape = op(*[T.Tensor(a) for a in arrays]).shape
    weights = rng.normal(size=out_shape)

    def scalar(*arrs):
        return float(np.sum(op(*[T.Tensor(a) for a in arrs]).data * weights))

    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = T.mean(T.mul(op(*leaves), T.Tensor(weights)))
    grads = T.backward(loss)
    n = weights.size
    analytic = [grads[t] * n for t in leaves]
    numeric = numeric_grad(scalar, [np.array(a, dtype=float) for a in arrays], h)
    return max(max_rel_error(a, b) for a, b in zip(analytic, numeric))


@pytest.fixture(scope="session")
def small_trials():
    # 2 subjects x 8 videos x 4 s: 4000 signal rows, 80 annotations per trial
    return D.synth_dataset(11, 2, 8, 4.0)


# acceptance verdicts, printed once at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
