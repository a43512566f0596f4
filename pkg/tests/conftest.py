import numpy as np
import pytest

from smile.diffusion import build_schedule
from smile.mathcore import FeedForwardNet, SeededRng


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def sched():
    return build_schedule(10, 0.05, 0.6)


def small_net(widths, seed=0):
    return FeedForwardNet(widths, SeededRng(seed))


def finite_difference_grads(net, x, upstream, h=1e-5):
    """Central-difference gradient of (upstream . net(x)) per parameter."""
    grads = []
    for p in net.params():
        g = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = float(np.sum(upstream * net.forward(x)))
            flat_p[i] = orig - h
            down = float(np.sum(upstream * net.forward(x)))
            flat_p[i] = orig
            flat_g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
