"""ModelState plus forward, embedding and backward passes."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError, InputShapeError
from . import layers as L
from .arch import ArchitectureSpec


@dataclass(frozen=True, eq=False)
class ModelState:
    """An architecture plus its flat parameter vector.

    ``params`` is made read-only on construction; every training routine
    returns a fresh ModelState.
    """

    arch: ArchitectureSpec
    params: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.params)
        if p.ndim != 1 or p.size != self.arch.num_params:
            raise InputShapeError(
                f"params length {p.size} != {self.arch.num_params} required by {self.arch.name!r}"
            )
        if p.dtype.kind != "f":
            p = p.astype(np.float32)
        elif p.flags.writeable:
            p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    @property
    def layout(self):
        return self.arch.layout

    def tensors(self) -> dict[tuple[int, str], np.ndarray]:
        """Views into ``params`` keyed by (layer index, "weight" | "bias")."""
        return {
            (s.layer, s.name): self.params[s.offset : s.offset + s.size].reshape(s.shape)
            for s in self.arch.layout
        }

    def with_params(self, params: np.ndarray) -> ModelState:
        return ModelState(self.arch, params)

    def astype(self, dtype) -> ModelState:
        return ModelState(self.arch, self.params.astype(dtype))

    def equals(self, other: ModelState) -> bool:
        return self.arch == other.arch and np.array_equal(self.params, other.params)

    @property
    def nbytes(self) -> int:
        """Wire size of the parameters as 32-bit reals."""
        return 4 * self.arch.num_params


def init_model(arch: ArchitectureSpec, seed: int) -> ModelState:
    """He-normal weights, zero biases, drawn from a stream seeded by ``seed``."""
    rng = np.random.default_rng(seed)
    params = np.zeros(arch.num_params, dtype=np.float32)
    for slot in arch.layout:
        if slot.name == "weight":
            fan_in = slot.shape[1]
            w = rng.standard_normal(slot.size) * np.sqrt(2.0 / fan_in)
            params[slot.offset : slot.offset + slot.size] = w.astype(np.float32)
    return ModelState(arch, params)


def zeros_model(arch: ArchitectureSpec) -> ModelState:
    return ModelState(arch, np.zeros(arch.num_params, dtype=np.float32))


def _check_input(arch: ArchitectureSpec, x: np.ndarray) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != arch.input_shape:
        raise InputShapeError(
            f"expected inputs of shape [B, {', '.join(map(str, arch.input_shape))}], got {list(x.shape)}"
        )


def _run(model: ModelState, x: np.ndarray, start: int, stop: int, cache: list | None = None):
    arch = model.arch
    t = model.tensors()
    for i in range(start, stop):
        layer = arch.layers[i]
        if layer.kind == "conv":
            y, cols = L.conv_forward(x, t[i, "weight"], t[i, "bias"], layer.kernel)
            saved = (x.shape, cols)
        elif layer.kind == "dense":
            y = x @ t[i, "weight"].T + t[i, "bias"]
            saved = x
        elif layer.kind == "pool":
            y, arg = L.pool_forward(x, layer.size)
            saved = (x.shape, arg)
        elif layer.kind == "activation":
            y = L.act_forward(x, layer.activation)
            saved = (x, y)
        else:
            y = x.reshape(x.shape[0], -1)
            saved = x.shape
        if cache is not None:
            cache.append(saved)
        x = y
    return x


def _as_input(model: ModelState, x) -> np.ndarray:
    x = np.asarray(x)
    _check_input(model.arch, x)
    return x.astype(model.params.dtype, copy=False)


def forward(model: ModelState, inputs: np.ndarray) -> np.ndarray:
    """Raw logits of shape [B, num_classes]."""
    x = _as_input(model, inputs)
    z = _run(model, x, 0, model.arch.embedding_index + 1)
    return head(model, z)


def embed(model: ModelState, inputs: np.ndarray) -> np.ndarray:
    """Activations at the embedding layer, flattened to [B, E]."""
    x = _as_input(model, inputs)
    z = _run(model, x, 0, model.arch.embedding_index + 1)
    return z.reshape(z.shape[0], -1)


def head(model: ModelState, embeddings: np.ndarray) -> np.ndarray:
    """Apply the layers after the embedding layer."""
    arch = model.arch
    z = np.asarray(embeddings).astype(model.params.dtype, copy=False)
    z = z.reshape((z.shape[0],) + arch.shapes[arch.embedding_index + 1])
    return _run(model, z, arch.embedding_index + 1, len(arch.layers))


def forward_batched(model: ModelState, inputs: np.ndarray, batch_size: int = 512) -> np.ndarray:
    if len(inputs) == 0:
        return np.zeros((0, model.arch.num_classes), dtype=model.params.dtype)
    return np.concatenate(
        [forward(model, inputs[i : i + batch_size]) for i in range(0, len(inputs), batch_size)]
    )


def embed_batched(model: ModelState, inputs: np.ndarray, batch_size: int = 512) -> np.ndarray:
    if len(inputs) == 0:
        return np.zeros((0, model.arch.embedding_dim), dtype=model.params.dtype)
    return np.concatenate(
        [embed(model, inputs[i : i + batch_size]) for i in range(0, len(inputs), batch_size)]
    )


def forward_with_cache(model: ModelState, inputs: np.ndarray):
    x = _as_input(model, inputs)
    cache: list = []
    logits = _run(model, x, 0, len(model.arch.layers), cache)
    return logits, cache


def backward(model: ModelState, cache: list, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the flat parameter vector."""
    arch = model.arch
    t = model.tensors()
    grad = np.zeros_like(model.params)
    slots = {(s.layer, s.name): s for s in arch.layout}
    d = dlogits
    for i in range(len(arch.layers) - 1, -1, -1):
        layer = arch.layers[i]
        saved = cache[i]
        need_dx = i > 0
        if layer.kind == "conv":
            x_shape, cols = saved
            dx, dw, db = L.conv_backward(d, cols, x_shape, t[i, "weight"], layer.kernel, need_dx)
        elif layer.kind == "dense":
            x = saved
            dw = d.T @ x
            db = d.sum(axis=0)
            dx = d @ t[i, "weight"] if need_dx else None
        elif layer.kind == "pool":
            x_shape, arg = saved
            dx = L.pool_backward(d, arg, x_shape, layer.size)
        elif layer.kind == "activation":
            x, y = saved
            dx = L.act_backward(d, x, y, layer.activation)
        else:
            dx = d.reshape(saved)
        if layer.kind in ("conv", "dense"):
            sw, sb = slots[i, "weight"], slots[i, "bias"]
            grad[sw.offset : sw.offset + sw.size] = dw.reshape(-1)
            grad[sb.offset : sb.offset + sb.size] = db
        d = dx
        if not need_dx:
            break
    return grad


# --- serialization -----------------------------------------------------------

MODEL_MAGIC = b"SIFLMDL\0"
MODEL_VERSION = 1


def model_to_bytes(model: ModelState) -> bytes:
    arch_blob = model.arch.to_json().encode("utf-8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(bytes([MODEL_VERSION]))
    buf.write(struct.pack("<I", len(arch_blob)))
    buf.write(arch_blob)
    buf.write(struct.pack("<Q", model.arch.num_params))
    buf.write(model.params.astype("<f4").tobytes())
    return buf.getvalue()


def model_from_bytes(blob: bytes) -> ModelState:
    if blob[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError("not a model checkpoint (bad magic)")
    pos = len(MODEL_MAGIC)
    version = blob[pos]
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos += 1
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arch = ArchitectureSpec.from_dict(json.loads(blob[pos : pos + n].decode("utf-8")))
    pos += n
    (count,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if count != arch.num_params or len(blob) != pos + 4 * count:
        raise FormatError("checkpoint parameter block has the wrong length")
    params = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).astype(np.float32)
    return ModelState(arch, params)


def save_model(model: ModelState, path) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> ModelState:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
