import pytest

from dflshield.harness import bundled_scenario_text
from dflshield.runner import run_simulated
from dflshield.scenario import SETTING_ORDER, parse_scenario


def bundled(name: str):
    return parse_scenario(bundled_scenario_text(name))


@pytest.fixture(scope="session")
def matrix8():
    """The three bundled 8-node 20-round runs on identical seeds."""
    runs = {}
    for name in ("baseline-8", "encryption-8", "encryption-mtd-8"):
        cfg = bundled(name)
        runs[cfg.security] = run_simulated(cfg)
    assert list(runs) == list(SETTING_ORDER)
    return runs


@pytest.fixture(scope="session")
def eclipse8():
    """The three bundled eclipse runs."""
    runs = {}
    for name in ("eclipse-baseline-8", "eclipse-encryption-8", "eclipse-encryption-mtd-8"):
        cfg = bundled(name)
        runs[cfg.security] = run_simulated(cfg)
    return runs
