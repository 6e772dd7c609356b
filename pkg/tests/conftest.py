import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: headline acceptance criterion")


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line (``ok=None`` for INFO); echoed in the terminal summary."""
    def record(name, ok, detail=""):
        tag = "INFO" if ok is None else ("PASS" if ok else "FAIL")
        line = f"{tag}  {name}" + (f"  ({detail})" if detail else "")
        _CRITERIA.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
