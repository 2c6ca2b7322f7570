import pytest
from hypothesis import HealthCheck, settings

from jetpose.harness.experiment import preset, run_experiment

# one shared CPU makes wall-clock deadlines meaningless for these numeric checks
settings.register_profile("jetpose", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("jetpose")


# The 100-trial driving batches are expensive; every test that needs one shares these.

@pytest.fixture(scope="session")
def driving_off():
    return run_experiment(preset("driving", trials=100, prior=False), keep_state=True)


@pytest.fixture(scope="session")
def driving_on():
    return run_experiment(preset("driving", trials=100, prior=True))
