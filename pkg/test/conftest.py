import pytest

from multiscale_soc.model import ScenarioConfig, build_example


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run desk-scale acceptance tests"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale acceptance runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def default_config():
    """The default Example 1 scenario."""
    return ScenarioConfig()


@pytest.fixture(scope="session")
def small_config():
    """Example 1 on grids small enough for unit tests."""
    return ScenarioConfig(n_slow=17, n_torus=8, n_control=41, epsilon_list=(0.4, 0.2))


@pytest.fixture(scope="session")
def example1(default_config):
    return build_example(default_config)


@pytest.fixture(scope="session")
def example2(default_config):
    return build_example(default_config.replace(example_id=2))
