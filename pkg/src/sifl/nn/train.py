"""Losses, SGD training loops and parameter averaging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import (
    DegenerateWeightsError,
    EmptyDataError,
    IncompatibleArchitectureError,
    InvalidConfigError,
    MisalignedTargetsError,
)
from . import layers as L
from .model import ModelState, backward, forward_with_cache

_SUPERVISED_STREAM = 1
_DISTILL_STREAM = 2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    mu: float = 0.0
    momentum: float = 0.0
    temperature: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidConfigError("learning rate must be positive", "lr")
        if self.epochs < 0:
            raise InvalidConfigError("epochs must be non-negative", "epochs")
        if self.batch_size < 1:
            raise InvalidConfigError("batch size must be positive", "batch_size")
        if self.mu < 0:
            raise InvalidConfigError("proximal coefficient must be >= 0", "mu")
        if not 0 <= self.momentum < 1:
            raise InvalidConfigError("momentum must be in [0, 1)", "momentum")
        if not self.temperature > 0:
            raise InvalidConfigError("temperature must be positive", "temperature")


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, stream]))


# --- losses ------------------------------------------------------------------


def cross_entropy(model: ModelState, inputs, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the parameters."""
    logits, cache = forward_with_cache(model, inputs)
    labels = np.asarray(labels)
    b = len(labels)
    logp = L.log_softmax(logits)
    loss = -logp[np.arange(b), labels].mean()
    d = np.exp(logp)
    d[np.arange(b), labels] -= 1
    d /= b
    return float(loss), backward(model, cache, d)


def kd_divergence(model: ModelState, inputs, target_logits, temperature: float = 1.0):
    """Mean KL(softmax(targets / T) || softmax(student / T)) and its gradient."""
    logits, cache = forward_with_cache(model, inputs)
    target_logits = np.asarray(target_logits, dtype=logits.dtype)
    b = len(logits)
    log_t = L.log_softmax(target_logits, temperature)
    log_s = L.log_softmax(logits, temperature)
    p_t = np.exp(log_t)
    loss = (p_t * (np.maximum(log_t, np.log(1e-12)) - log_s)).sum(axis=1).mean()
    d = (np.exp(log_s) - p_t) / (temperature * b)
    return float(loss), backward(model, cache, d.astype(logits.dtype))


def proximal(params, anchor, mu: float):
    """(mu / 2) * ||w - w_anchor||^2 and its gradient."""
    diff = params - anchor
    return 0.5 * mu * float(diff @ diff), mu * diff


# --- training loops ------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Infinite stream of index batches; a fresh permutation per pass, wrapping."""
    buf = np.empty(0, dtype=np.int64)
    while True:
        while len(buf) < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def _sgd(model: ModelState, grad_fn, steps: int, lr: float, momentum: float) -> ModelState:
    if steps == 0:
        return model
    w = model.params.copy()
    v = np.zeros_like(w) if momentum else None
    current = model
    for _ in range(steps):
        g = grad_fn(current, w)
        if v is not None:
            v *= momentum
            v += g
            g = v
        w -= np.asarray(lr, dtype=w.dtype) * g
        current = ModelState(model.arch, w)
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("training diverged: non-finite parameters")
    return current


def _local_steps(n: int, cfg: TrainConfig) -> int:
    per_epoch = -(-n // cfg.batch_size)
    return cfg.epochs * per_epoch


def _supervised(model, inputs, labels, cfg: TrainConfig, anchor: np.ndarray | None):
    inputs = np.asarray(inputs)
    labels = np.asarray(labels)
    if len(inputs) == 0:
        raise EmptyDataError("cannot train on an empty dataset")
    if len(inputs) != len(labels):
        raise MisalignedTargetsError("inputs and labels differ in length")
    batches = _batches(len(inputs), min(cfg.batch_size, len(inputs)), _rng(cfg.seed, _SUPERVISED_STREAM))

    def grad_fn(current, w):
        idx = next(batches)
        _, g = cross_entropy(current, inputs[idx], labels[idx])
        if anchor is not None:
            g += cfg.mu * (w - anchor)
        return g

    steps = _local_steps(len(inputs), cfg)
    return _sgd(model, grad_fn, steps, cfg.lr, cfg.momentum)


def train_supervised(model: ModelState, inputs, labels, cfg: TrainConfig) -> ModelState:
    """``cfg.epochs`` passes of mini-batch SGD on softmax cross-entropy."""
    return _supervised(model, inputs, labels, cfg, None)


def train_fedprox(model: ModelState, inputs, labels, anchor: ModelState, cfg: TrainConfig) -> ModelState:
    """Supervised training with the proximal penalty (mu / 2) * ||w - anchor||^2.

    With ``cfg.mu == 0`` this is exactly :func:`train_supervised`.
    """
    if anchor.arch != model.arch:
        raise IncompatibleArchitectureError("anchor and model architectures differ")
    a = anchor.params.astype(model.params.dtype) if cfg.mu > 0 else None
    return _supervised(model, inputs, labels, cfg, a)


def distill(model: ModelState, patches, targets, steps: int, cfg: TrainConfig) -> ModelState:
    """``steps`` SGD steps on the KL divergence to softmax(targets)."""
    patches = np.asarray(patches)
    targets = np.asarray(targets)
    if targets.ndim != 2 or len(targets) != len(patches):
        raise MisalignedTargetsError(
            f"{len(targets)} target rows for {len(patches)} distillation inputs"
        )
    if targets.shape[1] != model.arch.num_classes:
        raise MisalignedTargetsError(
            f"targets have {targets.shape[1]} columns, model has {model.arch.num_classes} classes"
        )
    if steps < 0:
        raise InvalidConfigError("distillation steps must be >= 0", "steps")
    if steps == 0:
        return model
    if len(patches) == 0:
        raise EmptyDataError("no distillation inputs")
    batches = _batches(len(patches), min(cfg.batch_size, len(patches)), _rng(cfg.seed, _DISTILL_STREAM))

    def grad_fn(current, w):
        idx = next(batches)
        _, g = kd_divergence(current, patches[idx], targets[idx], cfg.temperature)
        return g

    return _sgd(model, grad_fn, steps, cfg.lr, cfg.momentum)


def weighted_average(models: Sequence[ModelState], weights: Sequence[float]) -> ModelState:
    """Parameter average sum(w_i * p_i) / sum(w_i)."""
    if not models:
        raise EmptyDataError("nothing to average")
    if len(models) != len(weights):
        raise MisalignedTargetsError("one weight per model required")
    arch = models[0].arch
    for m in models[1:]:
        if m.arch != arch:
            raise IncompatibleArchitectureError("cannot average models with different architectures")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DegenerateWeightsError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise DegenerateWeightsError("weights sum to zero")
    acc = np.zeros(arch.num_params, dtype=np.float64)
    for m, wi in zip(models, w):
        acc += (wi / total) * m.params.astype(np.float64)
    return ModelState(arch, acc.astype(models[0].params.dtype))
