"""
Shared pytest fixtures for the ResNet-TP tests.
"""
import numpy as np
import pytest

from app.dataset import load_dataset, synth_dataset
from backend.models import DataConfig, NetworkConfig, TrainConfig
from backend.tensor_core import Tensor


# --- Random State ---

@pytest.fixture
def rng() -> np.random.Generator:
    """A seeded generator so every test sees the same draws."""
    return np.random.default_rng(1234)


# --- Network Fixtures ---

@pytest.fixture
def tiny_config() -> NetworkConfig:
    """Depth-18, width-1/4 network on 64x64 inputs with 5 classes."""
    return NetworkConfig(depth=18, width_multiplier=0.25, input_size=64, num_classes=5, seed=7)


@pytest.fixture
def tiny_batch(rng) -> Tensor:
    return Tensor(rng.standard_normal((2, 3, 64, 64)).astype(np.float32))


@pytest.fixture
def quick_train_config() -> TrainConfig:
    """Few epochs, plain SGD settings; no augmentation."""
    return TrainConfig(batch_size=8, epochs=2, lr0=0.01, momentum=0.9, seed=3)


# --- Dataset Fixtures ---

@pytest.fixture
def synth_dir(tmp_path):
    """Three classes of four 64x64 gratings written under tmp_path."""
    out = tmp_path / "synth"
    synth_dataset(classes=3, per_class=4, size=64, seed=11, out_dir=out)
    return out


@pytest.fixture
def small_dataset(synth_dir):
    return load_dataset(synth_dir / "manifest.csv", DataConfig(input_size=64))
