import re

import numpy as np
import pytest

from ccdist.network import init

# acceptance criteria register (number, passed, detail) here; printed at the end of the run
ACCEPTANCE = {}


def record(number, passed, detail=""):
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE, key=lambda n: (int(re.match(r"\d+", str(n)).group()), str(n))):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def random_net(rng, sizes=None, max_layers=4, max_width=32):
    """Random Dense/ReLU net with small random biases (init gives zero biases)."""
    if sizes is None:
        depth = int(rng.integers(1, max_layers + 1))
        sizes = [int(rng.integers(1, max_width + 1)) for _ in range(depth)] + [int(rng.integers(2, 6))]
        sizes = [int(rng.integers(1, 9))] + sizes
    net = init(sizes, int(rng.integers(2**31)))
    for p in net.parameters()[1::2]:
        p.data[:] = 0.3 * rng.standard_normal(p.data.shape)
    return net


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of every array (mutated in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
