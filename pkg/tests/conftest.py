import numpy as np
import pytest
from hypothesis import settings

from partreg.geometry import PointCloud, random_rotation

settings.register_profile("partreg", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("partreg")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pose(rng, scale=1.0):
    from partreg.geometry import RigidTransform

    return RigidTransform(random_rotation(rng), rng.normal(scale=scale, size=3))


def grid_plane(n=12, z=0.0, spacing=0.1):
    u = (np.arange(n) - (n - 1) / 2) * spacing
    X, Y = np.meshgrid(u, u)
    return PointCloud(np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, z)]))


def sphere_points(count, rng):
    p = rng.normal(size=(count, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE = {}


def record_acceptance(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
