import numpy as np
import pytest

ACCEPTANCE_LINES = []


def record_acceptance(number, name, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    ACCEPTANCE_LINES.append(f"ACCEPTANCE {number:>2} {name}: {status}{suffix}")
    assert passed, f"acceptance criterion {number} ({name}) failed{suffix}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
