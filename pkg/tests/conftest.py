import numpy as np
import pytest

from nonconvavg.fast_process import DyadicMapSpec, FiniteChainSpec, stationary_law, two_state_chain
from nonconvavg.field import build_field, decompose_field
from nonconvavg.scenario import Scenario
from nonconvavg.time_scales import FastScale, TimeScaleFamily


@pytest.fixture(scope="session")
def chain():
    # symmetric two-state chain, rates 1 <-> 1, observable +-1
    return two_state_chain()


@pytest.fixture(scope="session")
def stationary_chain():
    return two_state_chain(initial=(0.5, 0.5))


@pytest.fixture(scope="session")
def discrete_chain():
    return FiniteChainSpec([[0.75, 0.25], [0.25, 0.75]], [1.0, -1.0], [1.0, 0.0], time_kind="discrete")


@pytest.fixture(scope="session")
def dyadic():
    return DyadicMapSpec(lambda x: x, holder_exponent=1.0, holder_constant=1.0)


@pytest.fixture(scope="session")
def family12():
    return TimeScaleFamily((1, 2))


@pytest.fixture(scope="session")
def family12_power():
    return TimeScaleFamily((1, 2), (FastScale("power", p=2.0),))


@pytest.fixture(scope="session")
def canonical_field():
    return build_field("product_linear", a=1.0, c=1.0)


@pytest.fixture(scope="session")
def canonical_decomposed(chain, canonical_field):
    return decompose_field(canonical_field, stationary_law(chain))


@pytest.fixture(scope="session")
def canonical_scenario(chain, canonical_field, family12):
    return Scenario("canonical", chain, canonical_field, family12)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
