"""Shared fixtures.

The case-study scenario, its gain schedules, and the certified radii are
expensive to build, so they are computed once per session.
"""
import warnings

import numpy as np
import pytest

from resilient_lqg.certify import gamma_selection
from resilient_lqg.gains import build_gains
from resilient_lqg.harness import SimSetup
from resilient_lqg.model import case_study_config, validate_scenario

warnings.filterwarnings("ignore", message="Solution may be inaccurate")


@pytest.fixture(scope="session")
def case_study():
    return validate_scenario(case_study_config())


@pytest.fixture(scope="session")
def case_gains(case_study):
    return build_gains(case_study)


@pytest.fixture(scope="session")
def case_setup(case_study, case_gains):
    return SimSetup.build(case_study, case_gains)


@pytest.fixture(scope="session")
def case_selection(case_study, case_gains):
    sel = gamma_selection(case_study, 0.3, 0.3, iter_times=6,
                          gains=case_gains)
    assert sel is not None, "radius selection failed on the case study"
    return sel


@pytest.fixture(scope="session")
def short_scenario():
    """Cheaper variant for unit tests that only need a valid scenario."""
    return validate_scenario(case_study_config(T=2.0))


@pytest.fixture(scope="session")
def short_gains(short_scenario):
    return build_gains(short_scenario)


@pytest.fixture(scope="session")
def dual_scenario():
    """Single-pattern variant used by the dual-controller tests."""
    return validate_scenario(case_study_config(T=4.0, patterns=((2,),)))


@pytest.fixture(scope="session")
def dual_gains(dual_scenario):
    return build_gains(dual_scenario)
