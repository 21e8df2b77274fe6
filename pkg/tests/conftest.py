import json
from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"


def read_tsv(name):
    rows = []
    for line in (DATA / name).read_text().splitlines():
        if line.startswith("#"):
            continue
        rows.append(line.split("\t"))
    return rows


@pytest.fixture(scope="session")
def valid_corpus():
    return [(s, g) for s, g in read_tsv("valid_corpus.tsv")]


@pytest.fixture(scope="session")
def invalid_corpus():
    return [(s, c) for s, c in read_tsv("invalid_corpus.tsv")]


@pytest.fixture(scope="session")
def descriptor_fixtures():
    return json.loads((DATA / "descriptor_fixtures.json").read_text())["molecules"]


# ---------------------------------------------------------------- acceptance report

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid or "criterion_" not in report.nodeid:
        return
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    name = report.nodeid.split("::")[-1]
    detail = dict(report.user_properties).get("detail", "")
    _CRITERIA[name] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        outcome, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{outcome}  {name}  {detail}".rstrip())
