import numpy as np
import pytest
import torch

from resmem.backbone import BackboneConfig, pretrain
from resmem.datagen import generate_benchmark

torch.set_num_threads(1)

TINY = BackboneConfig(d_model=32, n_layers=2, n_heads=4, d_ffn=64, max_seq_len=96, rng_seed=3)


@pytest.fixture(scope="session")
def tiny_bench():
    return generate_benchmark(40, 3, 20, seed=11)


@pytest.fixture(scope="session")
def tiny_model(tiny_bench):
    return pretrain(TINY, tiny_bench.pretrain_corpus, 400, log_every=100).model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
