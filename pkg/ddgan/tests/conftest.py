import pytest

from ddgan.models import TrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long training runs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


TINY = dict(
    T=2,
    batch_size=32,
    iterations=6,
    latent_dim=4,
    latent_embed_dim=8,
    mapping_layers=1,
    hidden_dim=16,
    hidden_layers=2,
    time_embed_dim=4,
    norm_groups=4,
    log_every=2,
)


@pytest.fixture
def tiny_config():
    return TrainConfig(**TINY)
