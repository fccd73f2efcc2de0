"""Minimal numpy neural-network engine: fixed layer menu, SGD, KD, averaging."""

from .arch import PRESETS, ArchitectureSpec, LayerSpec, preset
from .model import (
    ModelState,
    embed,
    embed_batched,
    forward,
    forward_batched,
    head,
    init_model,
    load_model,
    model_from_bytes,
    model_to_bytes,
    save_model,
    zeros_model,
)
from .train import (
    TrainConfig,
    cross_entropy,
    distill,
    kd_divergence,
    proximal,
    train_fedprox,
    train_supervised,
    weighted_average,
)

__all__ = [
    "PRESETS",
    "ArchitectureSpec",
    "LayerSpec",
    "ModelState",
    "TrainConfig",
    "cross_entropy",
    "distill",
    "embed",
    "embed_batched",
    "forward",
    "forward_batched",
    "head",
    "init_model",
    "kd_divergence",
    "load_model",
    "model_from_bytes",
    "model_to_bytes",
    "preset",
    "proximal",
    "save_model",
    "train_fedprox",
    "train_supervised",
    "weighted_average",
    "zeros_model",
]
