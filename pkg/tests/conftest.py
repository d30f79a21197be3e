import numpy as np
import pytest

from shiftpl.trajectory import COLUMNS, TrajectoryTable


def make_table(rows, dt=0.2):
    """Build a table from a list of dicts; unspecified columns get benign defaults."""
    defaults = {"y": 0.0, "vx": 0.0, "vy": 0.0, "ax": 0.0, "ay": 0.0, "lane": 0, "length": 4.5, "width": 1.8}
    cols = {c: [] for c in COLUMNS}
    for r in rows:
        for c in COLUMNS:
            cols[c].append(r.get(c, defaults.get(c)))
    return TrajectoryTable.from_columns(dt, **cols)


def csv_bytes(header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    return ("\n".join(lines) + "\n").encode()


@pytest.fixture
def grid_table():
    """Nine vehicles on three lanes at one frame; vehicle 5 sits in the middle."""
    rows = []
    vid = 1
    for lane in (0, 1, 2):
        for x in (0.0, 20.0, 40.0):
            rows.append({"frame": 0, "id": vid, "x": x, "y": 3.5 * lane, "lane": lane, "vx": 25.0 + vid})
            vid += 1
    return make_table(rows)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdict lines, printed once at the end of the session
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
