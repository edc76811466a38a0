from pathlib import Path

import pytest
import torch

FIXTURES = Path(__file__).parent / "fixtures"

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, label): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and rep.passed:
                continue
            num, label = props["criterion"]
            status = "PASS" if rep.passed else "FAIL"
            detail = props.get("detail", "")
            lines.append((num, f"criterion {num:2d} {status}  {label}" + (f"  [{detail}]" if detail else "")))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, text in sorted(lines):
            terminalreporter.write_line(text)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def ett_fixture():
    return FIXTURES / "ett_100.csv"

