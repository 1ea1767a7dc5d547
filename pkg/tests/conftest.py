import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # oracles.py

from unienc.model import ModelConfig, UniEncModel


def tiny_config(**overrides) -> ModelConfig:
    base = dict(model_dim=8, ffn_dim=16, num_heads=2, num_blocks=2,
                conv_downsample=2, taee_dim=8, taee_ffn=16, taee_heads=2,
                vocab_size=5, feat_dim=4, max_frames=512, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model() -> UniEncModel:
    return UniEncModel(tiny_config(), seed=7)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
