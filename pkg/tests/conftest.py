import numpy as np
import pytest

from mmfedsim import backend
from mmfedsim.datagen import DatasetSpec
from mmfedsim.losses import LossConfig
from mmfedsim.model import ModelConfig


@pytest.fixture(params=["numba", "numpy"])
def kernel_backend(request):
    """Run the decorated test under both kernel backends."""
    if request.param == "numba" and not backend.NUMBA_AVAILABLE:
        pytest.skip("numba not available")
    previous = backend.active_backend()
    backend.set_backend(request.param)
    yield request.param
    backend.set_backend(previous)


@pytest.fixture
def tiny_spec():
    """Small dataset spec used by gradient checks and model unit tests."""
    return DatasetSpec(
        num_classes=3,
        latent_dim=3,
        grid_side=4,
        bins_per_dim=3,
        intra_class_sigma=0.2,
        image_noise_sigma=0.05,
        token_dropout_prob=0.1,
        dataset_seed=1234,
    )


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(d_enc=5, d_com=4, d_latent=6, self_heads=2, cross_heads=1, patch_side=2)


@pytest.fixture
def loss_cfg():
    return LossConfig()


def rand_rows(rng: np.random.Generator, b: int, d: int) -> np.ndarray:
    """Random embedding rows bounded away from zero norm."""
    x = rng.standard_normal((b, d))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-6) * (0.5 + rng.random((b, 1)))
