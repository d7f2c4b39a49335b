import pytest
import torch

import acceptance_log

from epg.nnet import NetworkConfig
from epg.schedules import DiffusionConfig


def pytest_addoption(parser):
    parser.addoption("--run-long", action="store_true", default=False,
                     help="run desk-scale training reproductions (hours of compute)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-long"):
        return
    skip = pytest.mark.skip(reason="desk-scale reproduction; pass --run-long to run")
    for item in items:
        if "long" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_log.summary_lines():
        terminalreporter.write_line(line)


@pytest.fixture
def tiny_cfg():
    return NetworkConfig(enc_blocks=2, dec_blocks=2, dim_enc=32, dim_dec=32, heads_enc=2, heads_dec=2,
                         patch=4, resolution=8, num_classes=3, time_freqs=16)


@pytest.fixture
def diffusion():
    return DiffusionConfig()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
