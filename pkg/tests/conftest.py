import time
from pathlib import Path

import pytest

from comracer.cli import RunConfig, analyze_image, prepare_image
from comracer.isa import load_fixture, with_symbol_tags
from comracer.symbols import DEFAULT_TAGS
from comracer.taint import Mode

SESSION_START = time.perf_counter()
FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

_acceptance: dict[int, tuple[str, str]] = {}


def fixture_path(name: str) -> Path:
    return FIXTURES / name


def tagged_image(name: str):
    return with_symbol_tags(load_fixture(fixture_path(name)), DEFAULT_TAGS)


def analyze_fixture(name: str, mode: str = "e4e5", **kwargs):
    config = RunConfig(mode=Mode(mode), **kwargs)
    return analyze_image(prepare_image(str(fixture_path(name)), config), config, name)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        for key, value in report.user_properties:
            if key == "criterion":
                crit = value
    if crit is None:
        return
    number, title = crit
    if report.when == "call" or report.outcome == "failed":
        if report.outcome == "passed" and report.when == "call":
            _acceptance.setdefault(number, ("PASS", title))
        elif report.outcome != "passed":
            _acceptance[number] = ("FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        status, title = _acceptance[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
