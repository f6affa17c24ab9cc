import os

import pytest

from skillcycle.orchestrator import TaskPlan, load_plan
from skillcycle.policypool import PolicyPool, load_policies
from skillcycle.simenv import load_scenario

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "src", "skillcycle", "fixtures")


def fixture_path(name: str) -> str:
    return os.path.abspath(os.path.join(FIXTURES, name))


@pytest.fixture(scope="session")
def vanity_scenario():
    return load_scenario(fixture_path("vanity.json"))


@pytest.fixture(scope="session")
def vanity_specs():
    return load_policies(fixture_path("vanity_policies.json"))


@pytest.fixture(scope="session")
def vanity_plan():
    return load_plan(fixture_path("vanity_plan.json"))


@pytest.fixture()
def vanity_pool(vanity_specs):
    return PolicyPool(vanity_specs)


# Iteration-5 single-attempt rates, by plan order.
ITER5_FORWARD = {
    "place_lotion": 43 / 50,
    "place_primer": 40 / 50,
    "insert_lipstick": 23 / 50,
    "wipe_spill": 26 / 50,
}
INVERSE_RATES = {
    "place_lotion": 36 / 50,
    "place_primer": 38 / 50,
    "insert_lipstick": 43 / 50,
    "wipe_spill": 39 / 50,
}
