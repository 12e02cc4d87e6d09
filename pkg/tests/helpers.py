"""Model and dataset builders shared by several test modules."""

import numpy as np

from regional_adv.data import LabelledDataset
from regional_adv.network import Flatten, Linear, Network
from regional_adv.tensor import Precision
from regional_adv.zoo import ArchitectureId, Model


def make_linear_model(
    arch: ArchitectureId, seed: int, precision: Precision = Precision.HIGH
) -> Model:
    """A single affine layer on 3×32×32 inputs, cheap enough for attack loops."""
    model = Model(arch, [Flatten(), Linear("fc", 3 * 32 * 32, 10)], precision)
    model.init_parameters(seed)
    return model


def relabel(data: LabelledDataset, model: Network) -> LabelledDataset:
    """Copy of ``data`` labelled with the model's own predictions."""
    labels = np.argmax(model.forward(data.images), axis=1)
    return LabelledDataset(data.images, labels, split=data.split, ids=data.ids)
