import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from embedcal import rigsim
from embedcal.geomcore import Intrinsics
from embedcal.scenario import BUNDLED, load_scenario

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

CAMERA_OFFSETS_MM = [(0.5, -0.3, 3.0), (0.0, 0.0, -4.0), (1.0, 1.0, 5.0), (-2.0, 0.0, 2.0)]
PROJECTORS = [
    (Intrinsics(1400, 1400, 640, 650), (-0.35, 0.10, 1.2)),
    (Intrinsics(1700, 1710, 630, 500), (0.30, -0.10, 1.1)),
    (Intrinsics(2000, 1990, 650, 420), (0.05, 0.12, 1.3)),
    (Intrinsics(1550, 1560, 645, 410), (-0.10, -0.15, 1.25)),
]


def make_rig(num_projectors=3, num_poses=8, seed=1, offsets=CAMERA_OFFSETS_MM, **camera_kwargs):
    poses = rigsim.generate_board_poses(num_poses, 1.2, np.random.default_rng(seed))
    cams = rigsim.default_cameras(offsets_mm=offsets, **camera_kwargs)
    projs = [
        rigsim.build_projector(k, rigsim.projector_in_room(pos), poses, 1280, 800)
        for k, pos in PROJECTORS[:num_projectors]
    ]
    return rigsim.RigConfig(470.0, 320.0, cams, projs, poses)


@pytest.fixture
def rig():
    return make_rig()


@pytest.fixture
def small_rig():
    return make_rig(num_projectors=2, num_poses=2)


@pytest.fixture(scope="session")
def bundled_scenario():
    return load_scenario(BUNDLED)


# one line per acceptance criterion, repeated in the terminal summary
CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    CRITERIA[number] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
