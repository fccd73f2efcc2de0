"""Labelled datasets, non-IID client partitions and hold-out splits."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, TooManyClientsError
from .patchgen import SourceImage

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LabelledDataset:
    inputs: np.ndarray  # float32 [M, C, H, W] in [0, 1]
    labels: np.ndarray  # int64 [M]
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if len(labels) != len(self.inputs):
            raise InvalidConfigError("inputs and labels differ in length", "labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InvalidConfigError(f"labels must lie in [0, {self.num_classes})", "labels")
        if len(labels) < self.num_classes:
            log.warning("%s has fewer examples (%d) than classes (%d)", self.name, len(labels), self.num_classes)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices, name: str | None = None) -> LabelledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabelledDataset(self.inputs[idx], self.labels[idx], self.num_classes, name or self.name)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class Partition:
    clients: tuple[np.ndarray, ...]
    alpha: float
    seed: int

    def __len__(self) -> int:
        return len(self.clients)

    def sizes(self) -> list[int]:
        return [len(c) for c in self.clients]

    def to_json(self) -> str:
        return json.dumps(
            {"alpha": self.alpha, "seed": self.seed, "clients": [c.tolist() for c in self.clients]},
            sort_keys=True,
        )


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, stream]))


def dirichlet_partition(labels, n_clients: int, alpha: float, seed: int) -> Partition:
    """Per-class Dirichlet(alpha) split of example indices across clients.

    Clients left empty are repaired by moving one index from the currently
    largest client (lowest id on ties).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if n_clients < 1:
        raise InvalidConfigError("need at least one client", "clients")
    if not alpha > 0:
        raise InvalidConfigError("alpha must be positive", "alpha")
    if n_clients > len(labels):
        raise TooManyClientsError(f"{n_clients} clients but only {len(labels)} examples")
    rng = _rng(seed, 10)
    shards: list[list[int]] = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(n_clients, float(alpha)))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
        for client, part in enumerate(np.split(idx, cuts)):
            shards[client].extend(part.tolist())
    for client in range(n_clients):
        if not shards[client]:
            donor = max(range(n_clients), key=lambda i: (len(shards[i]), -i))
            shards[client].append(shards[donor].pop())
    return Partition(tuple(np.array(sorted(s), dtype=np.int64) for s in shards), float(alpha), int(seed))


def holdout_split(ds: LabelledDataset, fraction: float, seed: int):
    """Stratified split; the second part gets ``round(fraction * M)`` items."""
    if not 0 < fraction < 1:
        raise InvalidConfigError("fraction must be in (0, 1)", "validation_fraction")
    total = round(fraction * len(ds))
    counts = ds.class_counts()
    quota = counts * fraction
    take = np.floor(quota).astype(np.int64)
    # largest remainders first, lowest class on ties
    order = np.lexsort((np.arange(len(counts)), -(quota - take)))
    short = total - int(take.sum())
    for c in order:
        if short <= 0:
            break
        if take[c] < counts[c]:
            take[c] += 1
            short -= 1
    rng = _rng(seed, 11)
    val = []
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        val.extend(idx[: take[c]].tolist())
    val = np.sort(np.array(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(ds)), val)
    return ds.subset(train, f"{ds.name}-train"), ds.subset(val, f"{ds.name}-val")


# --- synthetic data -------------------------------------------------------------------


def _palette(classes: int, palette_seed: int) -> np.ndarray:
    """Well-spread class colours: evenly spaced hues with a seeded offset."""
    rng = _rng(palette_seed, 12)
    offset = rng.random()
    hues = (offset + np.arange(classes) / classes) % 1.0
    sat = 0.65 + 0.3 * rng.random(classes)
    val = 0.6 + 0.35 * rng.random(classes)
    k = (np.array([5.0, 3.0, 1.0])[None, :] + hues[:, None] * 6) % 6
    rgb = val[:, None] - val[:, None] * sat[:, None] * np.clip(np.minimum(k, 4 - k), 0, 1)
    return rgb


def _signatures(classes: int, palette_seed: int):
    rng = _rng(palette_seed, 13)
    freq = 1.0 + np.arange(classes) % 4 + rng.random(classes) * 0.5
    theta = np.pi * (np.arange(classes) / classes + 0.1 * rng.random(classes))
    return freq, theta


def _render(cls: np.ndarray, size: int, separation: float, palette, freq, theta, rng, channels: int):
    n = len(cls)
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = rng.random(n) * 2 * np.pi
    proj = xx[None] * np.cos(theta[cls])[:, None, None] + yy[None] * np.sin(theta[cls])[:, None, None]
    wave = 0.6 + 0.4 * np.sin(2 * np.pi * freq[cls][:, None, None] * proj + phase[:, None, None])
    signal = palette[cls][:, :, None, None] * wave[:, None]
    noise = rng.random((n, 3, size, size))
    img = separation * signal + (1 - separation) * noise
    if channels == 1:
        img = img.mean(axis=1, keepdims=True)
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def synth_dataset(
    classes: int,
    per_class: int,
    image_size: int = 16,
    separation: float = 0.9,
    seed: int = 0,
    palette_seed: int | None = None,
    channels: int = 3,
    montage_grid: int = 12,
    name: str = "synth",
    montage_tile: int | None = None,
    montage_blank: float = 0.0,
):
    """Class-conditional textured images plus a montage source image.

    Each class has its own colour and stripe frequency/orientation; each
    example draws a random stripe phase and is blended with uniform noise,
    ``separation`` being the weight of the class signal. The montage tiles
    ``montage_grid`` x ``montage_grid`` fresh exemplars of all classes, each
    rendered at ``montage_tile`` pixels (default ``image_size``). A
    ``montage_blank`` fraction of tiles is flat grey background, standing in
    for the information-poor regions of a natural photograph.
    """
    if classes < 2:
        raise InvalidConfigError("need at least two classes", "classes")
    if not 0 <= separation <= 1:
        raise InvalidConfigError("separation must be in [0, 1]", "separation")
    if not 0 <= montage_blank < 1:
        raise InvalidConfigError("blank fraction must be in [0, 1)", "montage_blank")
    palette_seed = seed if palette_seed is None else palette_seed
    palette = _palette(classes, palette_seed)
    freq, theta = _signatures(classes, palette_seed)

    rng = _rng(seed, 14)
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(len(labels))]
    pixels = _render(labels, image_size, separation, palette, freq, theta, rng, channels)
    ds = LabelledDataset(pixels.astype(np.float32) / 255.0, labels, classes, name)

    mrng = _rng(seed, 15)
    tiles = montage_grid * montage_grid
    tile_cls = np.arange(tiles) % classes
    tile_cls = tile_cls[mrng.permutation(tiles)]
    s = montage_tile or image_size
    tile_px = _render(tile_cls, s, separation, palette, freq, theta, mrng, channels)
    blank = mrng.permutation(tiles)[: round(montage_blank * tiles)]
    tile_px[blank] = np.round(127 + 8 * mrng.standard_normal((len(blank),) + tile_px.shape[1:])).clip(0, 255)
    g = montage_grid
    montage = tile_px.reshape(g, g, channels, s, s).transpose(0, 3, 1, 4, 2).reshape(g * s, g * s, channels)
    return ds, SourceImage(montage)


def split_dataset(ds: LabelledDataset, fraction: float, seed: int):
    """Unstratified random split, used to carve a test set from a pool."""
    rng = _rng(seed, 16)
    perm = rng.permutation(len(ds))
    n = round(fraction * len(ds))
    return ds.subset(np.sort(perm[n:])), ds.subset(np.sort(perm[:n]))


# --- directory format -------------------------------------------------------------------


def load_png_dir(path, num_classes: int | None = None, name: str | None = None) -> LabelledDataset:
    """Read ``images/*.png`` plus ``labels.csv`` (filename,label)."""
    from PIL import Image

    root = Path(path)
    rows = []
    with open(root / "labels.csv", newline="") as f:
        for row in csv.reader(f):
            if not row or row[0] == "filename":
                continue
            rows.append((row[0], int(row[1])))
    if not rows:
        raise InvalidConfigError(f"{root / 'labels.csv'} lists no images", "dataset.path")
    arrays = []
    for fname, _ in rows:
        with Image.open(root / "images" / fname) as im:
            a = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im, dtype=np.uint8)
        arrays.append(a[:, :, None] if a.ndim == 2 else a)
    inputs = np.stack(arrays).transpose(0, 3, 1, 2).astype(np.float32) / 255.0
    labels = np.array([lbl for _, lbl in rows], dtype=np.int64)
    n = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabelledDataset(inputs, labels, n, name or root.name)


def save_png_dir(ds: LabelledDataset, path) -> None:
    from PIL import Image

    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["filename", "label"])
        for i, (x, y) in enumerate(zip(ds.inputs, ds.labels)):
            px = np.round(x.transpose(1, 2, 0) * 255).astype(np.uint8)
            fname = f"{i:06d}.png"
            Image.fromarray(px[:, :, 0] if px.shape[2] == 1 else px).save(root / "images" / fname)
            w.writerow([fname, int(y)])


def label_entropy(ds_labels, indices, num_classes: int) -> float:
    counts = np.bincount(np.asarray(ds_labels)[indices], minlength=num_classes).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum()) if len(p) else 0.0


def mean_client_entropy(labels, partition: Partition, num_classes: int) -> float:
    return float(np.mean([label_entropy(labels, c, num_classes) for c in partition.clients]))

