import numpy as np
import pytest

from milr.linalg import Rng, derive_seed
from milr.network import Bias, Conv2D, Dense, Flatten, Input, MaxPool, Network, ReLU


def units(seed, shape, dtype=np.float64, scale=1.0):
    n = int(np.prod(shape))
    return (Rng(seed).units(n) * scale).astype(dtype).reshape(shape)


def dense_net(n, p, dtype=np.float64, seed=0, lead=None):
    """Input(n) [-> Dense(n, lead) -> Bias -> ReLU] -> Dense(n, p) -> Bias."""
    layers = [Input((n,))]
    width = n
    if lead:
        layers += [Dense(units(derive_seed(seed, 9), (n, lead), dtype)), Bias(units(seed + 1, (lead,), dtype, 0.1), "dense"), ReLU()]
        width = lead
    layers += [Dense(units(seed, (width, p), dtype)), Bias(units(seed + 2, (p,), dtype, 0.1), "dense")]
    return Network(layers, dtype)


def conv_net(m=8, f=3, z=1, y=2, dtype=np.float64, seed=0, padding="valid", head=4):
    """Conv -> Bias -> ReLU -> Flatten -> Dense(head) -> Bias."""
    w = units(seed, (f, f, z, y), dtype, 0.5)
    layers = [Input((m, m, z)), Conv2D(w, 1, padding), Bias(units(seed + 1, (y,), dtype, 0.1), "conv"), ReLU(), Flatten()]
    net = Network(layers, dtype)
    width = net.output_shape[0]
    layers += [Dense(units(seed + 2, (width, head), dtype, 0.3)), Bias(units(seed + 3, (head,), dtype, 0.1), "dense")]
    return Network(layers, dtype)


def toy_six(dtype=np.float32, seed=0):
    """Six parameterized layers: conv, bias, dense, bias, dense, bias."""
    layers = [
        Input((8, 8, 2)),
        Conv2D(units(seed, (3, 3, 2, 4), dtype, 0.4)),
        Bias(units(seed + 1, (4,), dtype, 0.1), "conv"),
        ReLU(),
        Flatten(),
        Dense(units(seed + 2, (144, 16), dtype, 0.15)),
        Bias(units(seed + 3, (16,), dtype, 0.1), "dense"),
        ReLU(),
        Dense(units(seed + 4, (16, 10), dtype, 0.4)),
        Bias(units(seed + 5, (10,), dtype, 0.1), "dense"),
    ]
    return Network(layers, dtype)


def pooled_net(dtype=np.float32, seed=0):
    layers = [
        Input((10, 10, 1)),
        Conv2D(units(seed, (3, 3, 1, 4), dtype, 0.5)),
        Bias(units(seed + 1, (4,), dtype, 0.1), "conv"),
        ReLU(),
        MaxPool(2),
        Flatten(),
        Dense(units(seed + 2, (64, 5), dtype, 0.3)),
        Bias(units(seed + 3, (5,), dtype, 0.1), "dense"),
    ]
    return Network(layers, dtype)


def max_rel_err(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def mnist32():
    from milr.network import build_network

    return build_network("mnist", np.float32, seed=1)


# --- acceptance reporting ------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``record(n, ok, detail)`` stores and prints one pass/fail line, then asserts ``ok``."""

    def record(n, ok, detail=""):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
