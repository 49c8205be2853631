import numpy as np
import pytest

from dgkit.core import Rng
from dgkit.data import GeneratorConfig, generate_arrays


def dft2_bruteforce(z):
    """Direct double sum over (h, w) for every (u, v) on each channel."""
    c, h, w = z.shape
    out = np.zeros((c, h, w), dtype=complex)
    for ch in range(c):
        for u in range(h):
            for v in range(w):
                acc = 0j
                for hh in range(h):
                    for ww in range(w):
                        acc += z[ch, hh, ww] * np.exp(-2j * np.pi * (hh * u / h + ww * v / w))
                out[ch, u, v] = acc
    return out


@pytest.fixture(scope="session")
def small_dataset():
    cfg = GeneratorConfig(n_per_domain=28, shape=(3, 16, 16))
    return generate_arrays(cfg, Rng(5))


CRITERIA = {}


@pytest.fixture(scope="session")
def criteria():
    """Acceptance tests record one line per criterion; printed in the summary."""
    return CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        terminalreporter.write_line(f"criterion {k:2d}: {CRITERIA[k]}")
