"""Pytest configuration and shared fixtures for regional-adv tests."""

from pathlib import Path

import numpy as np
import pytest

from regional_adv.data import LabelledDataset, generate_synthetic
from regional_adv.network import Conv2d, Flatten, Linear, MaxPool2d, Network, ReLU
from regional_adv.tensor import Precision
from regional_adv.zoo import ArchitectureId, Model
from tests.helpers import make_linear_model, relabel

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def tiny_network() -> Network:
    """Conv, pool and linear layers on a 2×6×6 input, in float64."""
    network = Network(
        [
            Conv2d("conv", 2, 3, 3, pad=1),
            ReLU(),
            MaxPool2d(2),
            Flatten(),
            Linear("fc", 3 * 3 * 3, 4),
        ],
        input_shape=(2, 6, 6),
        num_classes=4,
        precision=Precision.HIGH,
    )
    network.init_parameters(7)
    return network


@pytest.fixture
def linear_models() -> list[Model]:
    """
    Three affine models standing in for the zoo, one per architecture id.

    They share a base weight matrix plus a small per-model perturbation, so
    most images get the same prediction from all three.
    """
    base = make_linear_model(ArchitectureId.PLAIN_LARGE_KERNEL, 11)
    rng = np.random.default_rng(12)
    models = [base]
    for arch in list(ArchitectureId)[1:]:
        model = make_linear_model(arch, 0)
        model.set_parameters(
            {
                name: value + 0.05 * value.std() * rng.standard_normal(value.shape)
                for name, value in base.parameters.items()
            }
        )
        models.append(model)
    return models


@pytest.fixture
def synthetic_test() -> LabelledDataset:
    return generate_synthetic(20, seed=3, split="test")


@pytest.fixture
def agreed_images(linear_models: list[Model]) -> LabelledDataset:
    """
    Synthetic images labelled by the first model, restricted to those every
    model classifies identically.
    """
    data = relabel(generate_synthetic(60, seed=5, split="test"), linear_models[0])
    predictions = np.stack(
        [np.argmax(m.forward(data.images), axis=1) for m in linear_models]
    )
    agreed = np.flatnonzero(np.all(predictions == data.labels, axis=0))
    return data.subset(agreed)
