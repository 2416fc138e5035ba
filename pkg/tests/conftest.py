import pytest

from dynmed.environments import build_environment
from dynmed.mmdp import pool_tuples, simulate_dataset
from dynmed.nuisance import oracle_nuisances
from dynmed.oracle import ExactOracle


@pytest.fixture(scope="session")
def toy():
    return build_environment("toy")


@pytest.fixture(scope="session")
def toy_iid():
    return build_environment("toy-iid")


@pytest.fixture(scope="session")
def semi():
    return build_environment("semi")


@pytest.fixture(scope="session")
def toy_oracle(toy):
    return ExactOracle(toy.spec, toy.target, toy.control, toy.behavior)


@pytest.fixture(scope="session")
def toy_nuisances(toy):
    return oracle_nuisances(toy.spec, toy.target, toy.control, toy.behavior)


@pytest.fixture(scope="session")
def toy_data(toy):
    """100 behavior trajectories of length 50 on the toy system."""
    return pool_tuples(simulate_dataset(toy.spec, toy.behavior, 100, 50, seed=7))
