import numpy as np
import pytest

from panolayout.geometry import SphericalCamera
from panolayout.synth import RoomSpec, cuboid_fixture, render

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str = "") -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cam():
    return SphericalCamera(128, 64)


@pytest.fixture(scope="session")
def cuboid_views_small():
    """The three-view cuboid rendered at 128 x 64."""
    spec, poses = cuboid_fixture()
    cam = SphericalCamera(128, 64)
    return [render(spec, pose, cam) for pose in poses]


@pytest.fixture(scope="session")
def cuboid_views_medium():
    spec, poses = cuboid_fixture()
    cam = SphericalCamera(256, 128)
    return [render(spec, pose, cam) for pose in poses]


@pytest.fixture(scope="session")
def box_room():
    return RoomSpec.cuboid(4.0, 5.0, 2.6)
