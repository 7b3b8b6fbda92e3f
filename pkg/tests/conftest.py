import copy
from pathlib import Path

import pytest
import tomli

from delaycosim import cosim

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
PLATOON = SCENARIOS / "platoon.toml"


def platoon_dict():
    with PLATOON.open("rb") as fh:
        return tomli.load(fh)


def variant(**simulation):
    """Platoon scenario dictionary with ``[simulation]`` overrides applied."""
    data = copy.deepcopy(platoon_dict())
    data["simulation"].update(simulation)
    return data


def run_detailed(cfg):
    """Step a simulation by hand, keeping every controller result and the message log."""
    trace = cosim.TraceLog(cfg.name, cfg.mode, cfg.seed)
    sim = cosim.Simulation(cfg)
    steps = []
    for k in range(cfg.duration):
        steps.append(sim.step(k, trace))
    sim.finalize(trace)
    return trace, steps, sim


@pytest.fixture(scope="session")
def platoon_cfg():
    return cosim.load_config(PLATOON)


@pytest.fixture(scope="session")
def platoon_compare(platoon_cfg):
    return cosim.compare(platoon_cfg)


@pytest.fixture(scope="session")
def platoon_detailed(platoon_cfg):
    return run_detailed(platoon_cfg)


ACCEPTANCE_LINES = []


def report_criterion(number, ok, text):
    """Record and print one acceptance line, then assert it."""
    line = f"AC{number:<2} {'PASS' if ok else 'FAIL'}  {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[2:4])):
            terminalreporter.write_line(line)
