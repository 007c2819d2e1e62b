import sys
from pathlib import Path

import pytest

from sinaihole.geometry import build_table, default_table

sys.path.insert(0, str(Path(__file__).parent))

# the two-disk table with radii 0.3 and 0.2; it has open diagonal corridors,
# so it is only used for geometric examples
SMALL_SPECS = [((0.0, 0.0), 0.3), ((0.5, 0.5), 0.2)]
DEFAULT_SPECS = [((0.0, 0.0), 0.4), ((0.5, 0.5), 0.2)]


@pytest.fixture(scope="session")
def table():
    return default_table()


@pytest.fixture(scope="session")
def small_table():
    return build_table(SMALL_SPECS)


@pytest.fixture(scope="session")
def perimeter(table):
    return table.total_perimeter


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
