import numpy as np
import pytest

from clincov import lincov
from clincov.scenario import parse_scenario
from clincov.simulation import simulate_nominal
from clincov.sysmodel import NoiseSpec
from clincov.uav import UAV


def zero_noise() -> NoiseSpec:
    return NoiseSpec(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 3)))


@pytest.fixture(scope="session")
def model():
    return UAV()


@pytest.fixture(scope="session")
def validate_scenario():
    return parse_scenario("validate")


@pytest.fixture(scope="session")
def validate_run(validate_scenario):
    """Nominal and LinCov series of the shipped validation scenario."""
    sc = validate_scenario
    m = sc.model()
    z0 = m.trim_state(sc.waypoint_array[0], sc.heading)
    nominal, done = simulate_nominal(m, z0, sc.initial_covariance.P0, sc.waypoint_array,
                                     dt=sc.simulation.dt, gps_every=sc.simulation.gps_every,
                                     denied=sc.denied, max_time=sc.simulation.max_time)
    assert done
    series = lincov.run(m, nominal, sc.initial_augmented(), stride=sc.simulation.output_stride)
    return m, nominal, series


@pytest.fixture(scope="session")
def short_nominal(model):
    """A 20 s two-leg nominal with GPS throughout."""
    P0 = np.diag([1.0, 1.0, 0.05**2, np.deg2rad(1.0) ** 2])
    wp = np.array([[0.0, 0.0], [300.0, 0.0], [300.0, 400.0]])
    nominal, done = simulate_nominal(model, model.trim_state(wp[0], 0.0), P0, wp,
                                     dt=0.01, gps_every=100, max_time=20.0)
    return nominal, P0


# one line per acceptance criterion, printed after the test session
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE[number])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
