import sys
import numpy as np
import pytest

from gradseg.phantom import PhantomSpec, generate


@pytest.fixture(scope="session")
def small_phantom():
    return generate(PhantomSpec(depth=3, dims=(48, 48, 48), root_radius=3.0, segment_length=14.0, seed=0))


@pytest.fixture(scope="session")
def default_phantom():
    return generate(PhantomSpec(seed=0))


def cylinder(radius=3.0, length=40, pad=6, axis_offset=0.0):
    """Digital cylinder along z centred in the xy plane."""
    n = int(2 * (radius + pad))
    dims = (n, n, length + 2 * pad)
    c = (n - 1) / 2.0 + axis_offset
    x, y = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    disk = (x - c) ** 2 + (y - c) ** 2 <= radius**2
    m = np.zeros(dims, dtype=np.uint8)
    m[:, :, pad:pad + length] = disk[:, :, None]
    return m, c


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
