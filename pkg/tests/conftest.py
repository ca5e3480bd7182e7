import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from safe_pricing.dr_scenario import Appliance, ApplianceBasis, ApplianceCluster

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# lines collected by the acceptance tests, echoed once at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def inflexible():
    return ApplianceCluster((Appliance("lighting", 200, (2, 3)), Appliance("cooking", 500, (3,))), 5.0, "inflexible")


@pytest.fixture(scope="session")
def flexible():
    return ApplianceCluster((
        Appliance("ev", 500, (1, 3), "one_of"),
        Appliance("washer", 300, (2, 3), "one_of"),
        Appliance("hvac", 600, (1, 2, 3), "one_of"),
        Appliance("entertainment", 200, (2, 3), "one_of"),
    ), 5.0, "flexible")


@pytest.fixture(scope="session")
def dr_basis(inflexible, flexible):
    return ApplianceBasis([inflexible, flexible], 3, positive_domain=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
