import numpy as np
import pytest

from specmix.volume import DEFAULT_ENERGIES, SpectralVolume


def random_volume(dims=(4, 3, 2), m=None, seed=0, scale=50.0, keep=1.0):
    rng = np.random.default_rng(seed)
    energies = DEFAULT_ENERGIES if m is None else np.linspace(40.0, 140.0, m)
    mask = rng.random(dims) < keep
    if not mask.any():
        mask.flat[0] = True
    curves = rng.normal(0.0, scale, size=(int(mask.sum()), energies.size))
    return SpectralVolume(energies, curves, mask)


def random_tau(n, K, seed=0):
    rng = np.random.default_rng(seed)
    t = rng.random((n, K)) + 0.05
    return t / t.sum(axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
