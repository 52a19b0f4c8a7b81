import json
import pathlib

import pytest

from rvjop.image import load_file
from rvjop.payload import VulnSpec, build_payload
from rvjop.planner import goal_from_dict, plan_from_catalog
from rvjop.scanner import scan

FIXTURES = pathlib.Path(__file__).parent / "fixtures"
DATA = pathlib.Path(__file__).parent / "data"

# the exfiltration goal: write(1, aes_key, 256)
WRITE_GOAL = {"syscall": "write", "registers": {"a0": 1, "a1": "@aes_key", "a2": 256},
              "secret": {"symbol": "aes_key"}}


@pytest.fixture(scope="session")
def oracle():
    return json.loads((FIXTURES / "oracle.json").read_text())


@pytest.fixture(scope="session")
def single():
    return load_file(FIXTURES / "fixture_single.elf")


@pytest.fixture(scope="session")
def twostage():
    return load_file(FIXTURES / "fixture_twostage.elf")


@pytest.fixture(scope="session")
def dynamic():
    return load_file(FIXTURES / "fixture_dynamic.elf")


@pytest.fixture(scope="session")
def single_catalog(single):
    return scan(single)


@pytest.fixture(scope="session")
def syms(oracle):
    return oracle["fixture_single"]["symbols"]


@pytest.fixture(scope="session")
def goal(single):
    return goal_from_dict(WRITE_GOAL, single)


@pytest.fixture(scope="session")
def plan(single, single_catalog, goal):
    return plan_from_catalog(goal, single_catalog, single)


@pytest.fixture(scope="session")
def vuln():
    return VulnSpec()


@pytest.fixture(scope="session")
def payload(plan, vuln):
    return build_payload(plan, vuln)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
