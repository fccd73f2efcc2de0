import numpy as np
import pytest

from sifl.nn import ArchitectureSpec, LayerSpec, init_model


def random_arch(rng, num_classes=3, activation=None):
    """A random tiny net drawn from the full layer menu."""
    c = int(rng.integers(1, 3))
    hw = int(rng.choice([2, 4]))
    act = activation or str(rng.choice(["relu", "tanh"]))
    layers = []
    if rng.random() < 0.7:
        layers += [LayerSpec("conv", int(rng.integers(1, 4)), int(rng.choice([1, 3]))), LayerSpec("activation", activation=act)]
        if rng.random() < 0.5:
            layers.append(LayerSpec("pool", 2))
    layers.append(LayerSpec("flatten"))
    layers += [LayerSpec("dense", int(rng.integers(2, 6))), LayerSpec("activation", activation=act)]
    emb = len(layers) - 1
    layers.append(LayerSpec("dense", num_classes))
    return ArchitectureSpec((c, hw, hw), tuple(layers), emb, num_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    arch = ArchitectureSpec(
        (1, 4, 4),
        (
            LayerSpec("conv", 2, 3),
            LayerSpec("activation", activation="relu"),
            LayerSpec("pool", 2),
            LayerSpec("flatten"),
            LayerSpec("dense", 5),
            LayerSpec("activation", activation="relu"),
            LayerSpec("dense", 3),
        ),
        5,
        3,
    )
    return init_model(arch, 7)
