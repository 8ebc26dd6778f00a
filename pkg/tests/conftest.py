import warnings

import numpy as np
import pytest

from lagmorph.grid import CellGrid


def smooth_field(rng, shape, modes=3, amplitude=1.0):
    """Sum of a few low-frequency cosines over the last ``len(shape)`` axes."""
    dim = len(shape)
    coords = np.meshgrid(*[(np.arange(n) + 0.5) / n for n in shape], indexing="ij")
    out = np.zeros(shape)
    for _ in range(modes):
        freq = rng.integers(0, 3, size=dim)
        phase = rng.uniform(0, 2 * np.pi)
        arg = sum(np.pi * f * c for f, c in zip(freq, coords)) + phase
        out += rng.normal() * np.cos(arg)
    return amplitude * out / modes


def smooth_velocity(rng, grid: CellGrid, amplitude=0.01):
    arr = np.stack([np.stack([smooth_field(rng, grid.shape, amplitude=amplitude)
                              for _ in range(grid.dim)]) for _ in range(grid.m_t + 1)])
    return arr.ravel()


def rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_solver_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="prox_tv")
        yield


# acceptance lines, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        def key(item):
            label = str(item[0])
            digits = label.rstrip("abcdefgh")
            return int(digits), label[len(digits):]

        for _, line in sorted(ACCEPTANCE, key=key):
            terminalreporter.write_line(line)
