from pathlib import Path

import pytest

from monorisk.geometry import CameraModel

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def camera():
    return CameraModel(focal_length_px=700.0, mount_height_m=1.5, horizon_row_px=360.0,
                       principal_col_px=640.0, image_width_px=1280, image_height_px=720)


@pytest.fixture
def configs_dir():
    return CONFIGS


_criteria = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_criteria, [])

    def check(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_criteria, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
