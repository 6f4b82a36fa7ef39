import numpy as np
import pytest
import torch

from tgeat.corpus import EnvironmentCatalog, SynthConfig, synth_corpus


@pytest.fixture(scope="session")
def catalog():
    return EnvironmentCatalog()


@pytest.fixture(scope="session")
def tiny_corpus():
    cfg = SynthConfig(n_train=48, n_dev=16, n_test=12, duration=(0.3, 0.4), noise_clips_per_env=2,
                      noise_duration=0.5)
    return synth_corpus(cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
