import numpy as np
import pytest
import torch

from maskrecovery.encoder import EncoderSpec, build_encoder
from maskrecovery.generator import GeneratorSpec, build_generator


@pytest.fixture(scope="session")
def toy_g():
    return build_generator(GeneratorSpec(depth=4, seed=7))


@pytest.fixture(scope="session")
def toy_g64():
    return build_generator(GeneratorSpec(depth=4, seed=7), dtype=torch.float64)


@pytest.fixture
def toy_encoder(toy_g):
    return build_encoder(EncoderSpec(num_styles=4, input_resolution=32, backbone_width=8), seed=0,
                         latent_offset=toy_g.mean_latent())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
