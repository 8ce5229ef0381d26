import numpy as np
import pytest

from snerf.camera import CameraIntrinsics
from snerf.posegen import RoiSpec
from snerf.volume import find_surface, gen_phantom, isolate_surface

# one "criterion N: PASS|FAIL ..." line per acceptance check, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def report_criterion():
    def report(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return report


@pytest.fixture(scope="session")
def phantom():
    return gen_phantom(42, (96, 96, 96))


@pytest.fixture(scope="session")
def phantom_scene(phantom):
    """Cropped phantom, ROI at the top surface and a 48 px camera."""
    top = find_surface(phantom, (0.0, 0.0, 1.0))
    crop = isolate_surface(phantom, top, 60.0)
    return crop, RoiSpec(tuple(top), 50.0, (0.0, 0.0, 1.0)), CameraIntrinsics.default(48)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
