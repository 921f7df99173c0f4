from __future__ import annotations

import pytest

from kgwalk.datasets import fixture_path, load_fixture
from kgwalk.gateway import StubGateway, StubScript
from kgwalk.toolbox import Toolbox


@pytest.fixture(scope="session")
def case_store():
    return load_fixture("case_study")


@pytest.fixture(scope="session")
def crw_store():
    return load_fixture("crw_small")


@pytest.fixture
def case_toolbox(case_store):
    return Toolbox(case_store)


@pytest.fixture
def case_stub():
    return StubGateway(StubScript.from_file(fixture_path("case_study.stub.yaml")))


# Acceptance results, filled in by test_acceptance.py and echoed after the run.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
