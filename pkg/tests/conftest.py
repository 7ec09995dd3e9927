import pytest

from dadet.bsrwst.config import apply_overrides, preset
from dadet.bsrwst.data import generate_domain_pair


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    generate_domain_pair(root, seed=3, counts=(8, 6, 6))
    return root


@pytest.fixture
def smoke_config(tiny_dataset):
    return apply_overrides(preset("smoke"), {"data.root": str(tiny_dataset)})
