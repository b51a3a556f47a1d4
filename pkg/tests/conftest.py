import numpy as np
import pytest

from tokenprune import ModelConfig, Rng, VisionTransformer


@pytest.fixture
def micro_config():
    """Smallest geometry that still exercises every path: 4 patches + CLS."""
    return ModelConfig(
        image_size=8, patch_size=4, channels=3, embed_dim=8,
        num_layers=2, num_heads=2, mlp_ratio=2, num_classes=3,
    )


@pytest.fixture
def micro_model(micro_config):
    return VisionTransformer(micro_config, rng=Rng(7))


@pytest.fixture
def micro_model_f64(micro_config):
    return VisionTransformer(micro_config, rng=Rng(7), dtype=np.float64)


@pytest.fixture
def micro_images():
    return np.random.default_rng(3).normal(size=(2, 3, 8, 8)).astype(np.float32)
