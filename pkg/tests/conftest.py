import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def report(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    return ok


class Timed:
    def __init__(self, value, seconds):
        self.value = value
        self.seconds = seconds


def _run(name, mode, duration):
    from dacsim.scenario import load_scenario, run

    start = time.perf_counter()
    rec = run(load_scenario(name), mode, duration=duration)
    return Timed(rec, time.perf_counter() - start)


@pytest.fixture(scope="session")
def damage_dac():
    # long enough to cover the manual 1 -> 0 -> 1 sequence and its settling
    return _run("paper_damage1", "dac", 62.0)


@pytest.fixture(scope="session")
def damage_mbc():
    return _run("paper_damage1", "mbc", 30.0)


@pytest.fixture(scope="session")
def nominal_pair():
    return _run("nominal", "mbc", 20.0), _run("nominal", "dac", 20.0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
