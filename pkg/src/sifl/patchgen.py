"""Seeded patch generation from a single source image.

Every patch has its own counter-based random stream keyed by (seed, index),
so patch ``i`` can be regenerated in isolation and generation is identical
for any degree of parallelism.

Pipeline (version 1): crop -> bilinear resize to ``patch_size`` -> rotation
uniform in [-deg, +deg] -> horizontal flip -> brightness, contrast,
saturation jitter. Resampling is bilinear with edge clamping, so rotated
corners are filled with the nearest edge pixels.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FormatError, InvalidConfigError, SourceTooSmallError

PIPELINE_VERSION = 1
_GRAY = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SourceImage:
    pixels: np.ndarray  # uint8, [H, W, C]
    digest: str = field(default="")

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] not in (1, 3):
            raise InvalidConfigError("source image must be uint8 [H, W, 1|3]", "image")
        px = np.ascontiguousarray(px)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        digest = self.compute_digest(px)
        if self.digest and self.digest != digest:
            raise FormatError("source image digest does not match its pixels")
        object.__setattr__(self, "digest", digest)

    @staticmethod
    def compute_digest(px: np.ndarray) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<III", *px.shape))
        h.update(px.tobytes())
        return h.hexdigest()

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def from_png(cls, path) -> SourceImage:
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return cls(np.array(im, dtype=np.uint8))

    def to_png(self, path) -> None:
        from PIL import Image

        px = self.pixels[:, :, 0] if self.channels == 1 else self.pixels
        Image.fromarray(px).save(path, format="PNG")


@dataclass(frozen=True)
class AugmentationConfig:
    patch_size: int = 32
    crop_scale: tuple[float, float] = (0.08, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    rotation_degrees: float = 35.0
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    crop: bool = True
    rotate: bool = True
    flip: bool = True
    jitter: bool = True

    def __post_init__(self):
        object.__setattr__(self, "crop_scale", tuple(float(v) for v in self.crop_scale))
        object.__setattr__(self, "crop_ratio", tuple(float(v) for v in self.crop_ratio))
        if self.patch_size < 1:
            raise InvalidConfigError("patch size must be positive", "patch_size")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise InvalidConfigError("crop scale must satisfy 0 < min <= max <= 1", "crop_scale")
        if not 0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise InvalidConfigError("crop ratio must satisfy 0 < min <= max", "crop_ratio")
        if not 0 <= self.flip_prob <= 1:
            raise InvalidConfigError("flip probability must be in [0, 1]", "flip_prob")
        for name in ("brightness", "contrast", "saturation", "rotation_degrees"):
            if getattr(self, name) < 0:
                raise InvalidConfigError(f"{name} must be non-negative", name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        d["crop_ratio"] = list(self.crop_ratio)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AugmentationConfig:
        return cls(**d)


@dataclass(frozen=True, eq=False)
class PatchDataset:
    patches: np.ndarray  # float32 [P, C, s, s] in [0, 1]
    seed: int
    source_digest: str
    config: AugmentationConfig

    def __len__(self) -> int:
        return len(self.patches)

    def to_bytes(self) -> bytes:
        cfg = json.dumps(self.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        buf = io.BytesIO()
        buf.write(PATCH_MAGIC)
        buf.write(bytes([PATCH_VERSION, PIPELINE_VERSION]))
        buf.write(struct.pack("<Q", self.seed))
        buf.write(bytes.fromhex(self.source_digest))
        buf.write(struct.pack("<I", len(cfg)))
        buf.write(cfg)
        buf.write(struct.pack("<4I", *self.patches.shape))
        buf.write(self.patches.astype("<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> PatchDataset:
        if blob[: len(PATCH_MAGIC)] != PATCH_MAGIC:
            raise FormatError("not a patch container (bad magic)")
        pos = len(PATCH_MAGIC)
        version, pipeline = blob[pos], blob[pos + 1]
        if version != PATCH_VERSION or pipeline != PIPELINE_VERSION:
            raise FormatError(f"unsupported patch container version {version}/{pipeline}")
        pos += 2
        (seed,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        digest = blob[pos : pos + 32].hex()
        pos += 32
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        cfg = AugmentationConfig.from_dict(json.loads(blob[pos : pos + n]))
        pos += n
        shape = struct.unpack_from("<4I", blob, pos)
        pos += 16
        count = int(np.prod(shape))
        if len(blob) != pos + 4 * count:
            raise FormatError("patch container payload has the wrong length")
        patches = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(shape)
        return cls(patches, seed, digest, cfg)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> PatchDataset:
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


PATCH_MAGIC = b"SIFLPAT\0"
PATCH_VERSION = 1


# --- resampling ------------------------------------------------------------------


def _bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``img`` [H, W, C] at float coordinates with edge clamping."""
    h, w = img.shape[:2]
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def crop_resize(img: np.ndarray, x0: float, y0: float, cw: float, ch: float, size: int) -> np.ndarray:
    grid = np.arange(size) + 0.5
    xs = x0 + grid * (cw / size) - 0.5
    ys = y0 + grid * (ch / size) - 0.5
    return _bilinear(img, xs[None, :].repeat(size, 0), ys[:, None].repeat(size, 1))


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0:
        return img
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: output pixel -> source pixel
    xs = c * xx + s * yy + cx
    ys = -s * xx + c * yy + cy
    return _bilinear(img, xs, ys)


def _jitter(img: np.ndarray, u: np.ndarray, cfg: AugmentationConfig) -> np.ndarray:
    if cfg.brightness:
        img = np.clip(img * (1 + (2 * u[0] - 1) * cfg.brightness), 0, 1)
    gray = img @ _GRAY if img.shape[2] == 3 else img[..., 0]
    if cfg.contrast:
        m = gray.mean()
        img = np.clip((img - m) * (1 + (2 * u[1] - 1) * cfg.contrast) + m, 0, 1)
        gray = img @ _GRAY if img.shape[2] == 3 else img[..., 0]
    if cfg.saturation and img.shape[2] == 3:
        g = gray[..., None]
        img = np.clip((img - g) * (1 + (2 * u[2] - 1) * cfg.saturation) + g, 0, 1)
    return img


def _check_size(img: SourceImage, cfg: AugmentationConfig) -> None:
    scale = cfg.crop_scale[0] if cfg.crop else 1.0
    side = min(img.width, img.height) * math.sqrt(scale)
    if side + 1e-9 < cfg.patch_size:
        raise SourceTooSmallError(
            f"{img.width}x{img.height} image gives crops of {side:.1f}px at scale {scale}, "
            f"smaller than patch size {cfg.patch_size}"
        )


def _patch_rng(seed: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, index])
    return np.random.Generator(np.random.Philox(ss))


def _make_patch(src: np.ndarray, seed: int, index: int, cfg: AugmentationConfig) -> np.ndarray:
    h, w = src.shape[:2]
    # fixed draw layout regardless of enabled steps keeps streams stable
    u = _patch_rng(seed, index).random(9)
    if cfg.crop:
        area = h * w * (cfg.crop_scale[0] + u[0] * (cfg.crop_scale[1] - cfg.crop_scale[0]))
        lr = math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1])
        ratio = math.exp(lr[0] + u[1] * (lr[1] - lr[0]))
        cw = min(max(math.sqrt(area * ratio), 1.0), w)
        ch = min(max(math.sqrt(area / ratio), 1.0), h)
        x0, y0 = u[2] * (w - cw), u[3] * (h - ch)
    else:
        cw, ch, x0, y0 = w, h, 0.0, 0.0
    out = crop_resize(src, x0, y0, cw, ch, cfg.patch_size)
    if cfg.rotate:
        out = rotate(out, (2 * u[4] - 1) * cfg.rotation_degrees)
    if cfg.flip and u[5] < cfg.flip_prob:
        out = out[:, ::-1]
    if cfg.jitter:
        out = _jitter(out, u[6:9], cfg)
    return np.clip(out, 0, 1).transpose(2, 0, 1).astype(np.float32)


def _source_array(img: SourceImage) -> np.ndarray:
    return img.pixels.astype(np.float64) / 255.0


def regenerate_patch(img: SourceImage, seed: int, cfg: AugmentationConfig, index: int) -> np.ndarray:
    """Patch ``index`` alone; equals ``generate_patches(...).patches[index]``."""
    _check_size(img, cfg)
    return _make_patch(_source_array(img), seed, index, cfg)


def generate_patches(
    img: SourceImage, count: int, seed: int, cfg: AugmentationConfig | None = None, workers: int = 1
) -> PatchDataset:
    cfg = cfg or AugmentationConfig()
    if count < 1:
        raise InvalidConfigError("patch count must be positive", "count")
    if not 0 <= seed < 2**64:
        raise InvalidConfigError("seed must be an unsigned 64-bit integer", "seed")
    _check_size(img, cfg)
    src = _source_array(img)
    out = np.empty((count, img.channels, cfg.patch_size, cfg.patch_size), dtype=np.float32)

    def fill(lo, hi):
        for i in range(lo, hi):
            out[i] = _make_patch(src, seed, i, cfg)

    if workers <= 1:
        fill(0, count)
    else:
        step = -(-count // workers)
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda lo: fill(lo, min(lo + step, count)), range(0, count, step)))
    return PatchDataset(out, int(seed), img.digest, cfg)


def materialize_subset(ds: PatchDataset, indices) -> np.ndarray:
    """Gather patches in the given order (duplicates allowed)."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= len(ds)):
        raise IndexError(f"patch index out of range [0, {len(ds)})")
    return ds.patches[idx]


def resize_full(img: SourceImage, size: int) -> np.ndarray:
    """Whole image resized to ``size`` x ``size``; the degenerate pipeline output."""
    src = _source_array(img)
    out = crop_resize(src, 0.0, 0.0, img.width, img.height, size)
    return np.clip(out, 0, 1).transpose(2, 0, 1).astype(np.float32)


def bundled_image() -> SourceImage:
    """The 256x256 test image shipped with the package."""
    from importlib import resources

    return SourceImage.from_png(resources.files("sifl") / "assets" / "test_image.png")
