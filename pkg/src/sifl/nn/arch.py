"""Architecture descriptors, parameter layouts and the built-in presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import cached_property

from ..errors import IncompatibleArchitectureError, InvalidConfigError

LAYER_KINDS = ("conv", "dense", "pool", "activation", "flatten")
ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass(frozen=True)
class LayerSpec:
    """One entry of the fixed layer menu.

    ``size`` is the output channel count for conv, the unit count for dense
    and the window (= stride) for pool. ``kernel`` only applies to conv,
    which always uses stride 1 and "same" zero padding.
    """

    kind: str
    size: int = 0
    kernel: int = 3
    activation: str = "identity"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidConfigError(f"unknown layer kind {self.kind!r}", "kind")
        if self.kind in ("conv", "dense", "pool") and self.size < 1:
            raise InvalidConfigError(f"{self.kind} layer needs size >= 1", "size")
        if self.kind == "conv" and (self.kernel < 1 or self.kernel % 2 == 0):
            raise InvalidConfigError("conv kernel must be odd and positive", "kernel")
        if self.activation not in ACTIVATIONS:
            raise InvalidConfigError(f"unknown activation {self.activation!r}", "activation")


@dataclass(frozen=True)
class Slot:
    layer: int
    name: str  # "weight" or "bias"
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


@dataclass(frozen=True)
class ArchitectureSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    embedding_index: int
    num_classes: int
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise InvalidConfigError("input_shape must be (C, H, W) with positive entries", "input_shape")
        if not self.layers or self.layers[-1].kind != "dense":
            raise InvalidConfigError("the final layer must be a dense classifier", "layers")
        if self.layers[-1].size != self.num_classes:
            raise InvalidConfigError(
                f"final layer width {self.layers[-1].size} != num_classes {self.num_classes}",
                "num_classes",
            )
        if not 0 <= self.embedding_index < len(self.layers) - 1:
            raise InvalidConfigError(
                "embedding_index must point strictly before the classifier layer", "embedding_index"
            )
        self.shapes  # validates the layer chain

    @cached_property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        """Per-sample activation shape after each layer (index 0 is the input)."""
        out = [self.input_shape]
        cur: tuple[int, ...] = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(cur) != 3:
                    raise InvalidConfigError(f"layer {i}: conv needs a spatial input", "layers")
                cur = (layer.size, cur[1], cur[2])
            elif layer.kind == "pool":
                if len(cur) != 3 or cur[1] % layer.size or cur[2] % layer.size:
                    raise InvalidConfigError(f"layer {i}: pool window must divide H and W", "layers")
                cur = (cur[0], cur[1] // layer.size, cur[2] // layer.size)
            elif layer.kind == "flatten":
                n = 1
                for d in cur:
                    n *= d
                cur = (n,)
            elif layer.kind == "dense":
                if len(cur) != 1:
                    raise InvalidConfigError(f"layer {i}: dense needs a flat input", "layers")
                cur = (layer.size,)
            out.append(cur)
        return tuple(out)

    @cached_property
    def layout(self) -> tuple[Slot, ...]:
        slots = []
        offset = 0
        for i, layer in enumerate(self.layers):
            fan_in = self.shapes[i]
            if layer.kind == "conv":
                shapes = [(layer.size, fan_in[0] * layer.kernel * layer.kernel), (layer.size,)]
            elif layer.kind == "dense":
                shapes = [(layer.size, fan_in[0]), (layer.size,)]
            else:
                continue
            for name, shape in zip(("weight", "bias"), shapes):
                slot = Slot(i, name, offset, shape)
                slots.append(slot)
                offset += slot.size
        return tuple(slots)

    @property
    def num_params(self) -> int:
        return sum(s.size for s in self.layout)

    @property
    def embedding_dim(self) -> int:
        n = 1
        for d in self.shapes[self.embedding_index + 1]:
            n *= d
        return n

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [asdict(layer) for layer in self.layers],
            "embedding_index": self.embedding_index,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ArchitectureSpec:
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=tuple(LayerSpec(**layer) for layer in d["layers"]),
            embedding_index=int(d["embedding_index"]),
            num_classes=int(d["num_classes"]),
            name=d.get("name", "custom"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def check_same(self, other: ArchitectureSpec) -> None:
        if self != other:
            raise IncompatibleArchitectureError(
                f"architecture mismatch: {self.name!r} vs {other.name!r}"
            )


def _conv_net(name, input_shape, num_classes, channels, hidden):
    layers = []
    for c in channels:
        layers += [
            LayerSpec("conv", c, 3),
            LayerSpec("activation", activation="relu"),
            LayerSpec("pool", 2),
        ]
    layers += [
        LayerSpec("flatten"),
        LayerSpec("dense", hidden),
        LayerSpec("activation", activation="relu"),
    ]
    embedding_index = len(layers) - 1
    layers.append(LayerSpec("dense", num_classes))
    return ArchitectureSpec(tuple(input_shape), tuple(layers), embedding_index, num_classes, name)


PRESETS = ("small", "medium", "wide")


def preset(name: str, input_shape=(3, 16, 16), num_classes: int = 10) -> ArchitectureSpec:
    """Small conv nets standing in for the ResNet-8 / ResNet-20 / WRN family.

    The embedding is the activated hidden dense layer right before the
    classifier.
    """
    if name == "small":
        return _conv_net(name, input_shape, num_classes, (8,), 32)
    if name == "medium":
        return _conv_net(name, input_shape, num_classes, (8, 16), 32)
    if name == "wide":
        return _conv_net(name, input_shape, num_classes, (16,), 64)
    raise InvalidConfigError(f"unknown architecture preset {name!r}", "architecture")
