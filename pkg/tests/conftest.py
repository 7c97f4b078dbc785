import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from eltnilm.tensor import current_tape  # noqa: E402


@pytest.fixture(autouse=True)
def clean_tape():
    current_tape().clear()
    yield
    current_tape().clear()


_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.outcome != "passed":
        detail = ""
        for title, content in report.sections:
            if "stdout" in title and content.strip():
                detail = content.strip().splitlines()[-1]
        previous = _acceptance.get(name)
        if previous is None or previous[0] == "PASS":
            _acceptance[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        status, detail = _acceptance[name]
        number = int(name.split("_")[2])
        label = " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {number:2d} {status}  {label}: {detail}")
