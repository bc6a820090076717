"""Dataset loading, augmentation, and batching.

Supported corpora:

* IDX pairs (big-endian, magic 0x00000803 for images, 0x00000801 for
  labels), loaded as grayscale N x 1 x H x W scaled to [0, 1].
* Class-per-subdirectory image folders, optionally with a manifest CSV
  (header ``path,split``) that pins the train/test membership of each file.
* A built-in synthetic digit corpus (procedurally rendered 28x28 glyphs)
  so experiments run without any network download.

Augmentation follows crop -> bilinear resize -> horizontal flip ->
per-channel normalize. The test split is never randomly augmented; it only
gets the resize + normalize step.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError, ParameterError
from .tensor import Tensor

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Dataset:
    """Immutable image-classification split with [0, 1] pixel values."""

    images: Tensor
    labels: np.ndarray
    class_names: list[str]
    split: str = "train"

    def __post_init__(self):
        if not isinstance(self.images, Tensor):
            self.images = Tensor(np.asarray(self.images, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractError(f"dataset images must be NCHW, got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ContractError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels")
        if self.labels.size and self.labels.max() >= len(self.class_names):
            raise ContractError(
                f"label {self.labels.max()} exceeds {len(self.class_names)} classes")
        if self.images.size and (self.images.data.min() < 0.0 or self.images.data.max() > 1.0):
            raise ContractError("pixel values must lie in [0, 1] before normalization")

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class AugmentConfig:
    crop_scale_range: tuple[float, float] = (0.7, 1.0)
    target_size: tuple[int, int] = (32, 32)
    hflip_prob: float = 0.5
    normalize_mean: tuple[float, ...] = (0.5,)
    normalize_std: tuple[float, ...] = (0.5,)
    enabled: bool = True

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ParameterError(f"crop_scale_range {self.crop_scale_range} invalid")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ParameterError(f"hflip_prob {self.hflip_prob} invalid")
        if any(s <= 0 for s in self.normalize_std):
            raise ParameterError("normalize_std entries must be positive")


@dataclass
class LabeledBatch:
    """One mini-batch; teacher logits are attached during distillation."""

    images: Tensor
    labels: np.ndarray
    indices: np.ndarray | None = None
    teacher_logits: Tensor | None = None


# ---------------------------------------------------------------------------
# IDX format


def _read_header(buf: bytes, fmt: str, offset: int, path, what: str):
    size = struct.calcsize(fmt)
    if len(buf) < offset + size:
        raise FormatError(
            f"{path}: truncated {what} at byte offset {len(buf)} (need {offset + size})")
    return struct.unpack_from(fmt, buf, offset)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Load an IDX image/label pair into a grayscale dataset."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    ibuf = images_path.read_bytes()
    magic, n, h, w = _read_header(ibuf, ">IIII", 0, images_path, "image header")
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(
            f"{images_path}: bad magic 0x{magic:08x} at byte offset 0, "
            f"expected 0x{IDX_IMAGES_MAGIC:08x}")
    expected = 16 + n * h * w
    if len(ibuf) < expected:
        raise FormatError(
            f"{images_path}: truncated pixel data at byte offset {len(ibuf)} "
            f"(need {expected})")
    lbuf = labels_path.read_bytes()
    lmagic, ln = _read_header(lbuf, ">II", 0, labels_path, "label header")
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(
            f"{labels_path}: bad magic 0x{lmagic:08x} at byte offset 0, "
            f"expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(lbuf) < 8 + ln:
        raise FormatError(
            f"{labels_path}: truncated label data at byte offset {len(lbuf)} "
            f"(need {8 + ln})")
    if n != ln:
        raise FormatError(f"{images_path}: {n} images but {labels_path}: {ln} labels")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=n * h * w, offset=16)
    images = pixels.reshape(n, 1, h, w).astype(np.float64) / 255.0
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=ln, offset=8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(images=Tensor(images), labels=labels,
                   class_names=[str(c) for c in range(num_classes)], split=split)


def write_idx(images, labels, images_path, labels_path) -> None:
    """Write [0, 1] grayscale images and labels as an IDX pair."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[1] != 1:
            raise ContractError("write_idx supports single-channel images only")
        arr = arr[:, 0]
    n, h, w = arr.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ContractError(f"write_idx: {n} images vs {labels.shape} labels")
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# image folders


def _read_manifest(path) -> dict[str, str]:
    assignments: dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:2]] != ["path", "split"]:
            raise FormatError(f"{path}: manifest must start with header 'path,split'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2 or row[1].strip() not in ("train", "test"):
                raise FormatError(f"{path}:{lineno}: expected 'relative_path,train|test'")
            assignments[row[0].strip()] = row[1].strip()
    return assignments


def load_image_folder(root, manifest_csv=None, split: str = "train",
                      image_size: int | None = None) -> Dataset:
    """Load a class-per-subdirectory folder; classes sort lexicographically."""
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ConfigError(f"{root}: no class subdirectories found")
    manifest = _read_manifest(manifest_csv) if manifest_csv else {}
    class_names = [d.name for d in class_dirs]
    images: list[np.ndarray] = []
    labels: list[int] = []
    shape_seen: tuple[int, int] | None = None
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            log.warning("class directory %s is empty", cdir)
            continue
        for path in files:
            rel = f"{cdir.name}/{path.name}"
            if manifest.get(rel, "train") != split:
                continue
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            except (OSError, UnidentifiedImageError) as exc:
                raise FormatError(f"unreadable image {path}: {exc}") from exc
            arr = arr.transpose(2, 0, 1)
            if image_size is not None:
                arr = resize_bilinear(arr, (image_size, image_size))
            elif shape_seen is None:
                shape_seen = arr.shape[1:]
            elif arr.shape[1:] != shape_seen:
                raise FormatError(
                    f"{path}: size {arr.shape[1:]} differs from {shape_seen}; "
                    f"pass image_size to resize on load")
            images.append(arr)
            labels.append(label)
    stack = (np.stack(images) if images
             else np.zeros((0, 3, image_size or 1, image_size or 1)))
    return Dataset(images=Tensor(np.clip(stack, 0.0, 1.0)),
                   labels=np.asarray(labels, dtype=np.int64),
                   class_names=class_names, split=split)


# ---------------------------------------------------------------------------
# augmentation


def resize_bilinear(img: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize over the last two axes, half-pixel-centered sampling."""
    oh, ow = out_size
    h, w = img.shape[-2:]
    if (h, w) == (oh, ow):
        return np.array(img, dtype=np.float64)
    ys = np.clip((np.arange(oh) + 0.5) * (h / oh) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(ow) + 0.5) * (w / ow) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = xs - x0
    rows = np.take(img, y0, axis=-2) * (1.0 - wy) + np.take(img, y1, axis=-2) * wy
    return np.take(rows, x0, axis=-1) * (1.0 - wx) + np.take(rows, x1, axis=-1) * wx


def _channel_stats(cfg: AugmentConfig, channels: int):
    mean = np.asarray(cfg.normalize_mean, dtype=np.float64)
    std = np.asarray(cfg.normalize_std, dtype=np.float64)
    if mean.size == 1:
        mean = np.repeat(mean, channels)
    if std.size == 1:
        std = np.repeat(std, channels)
    if mean.size != channels or std.size != channels:
        raise ParameterError(
            f"normalization stats for {mean.size}/{std.size} channels, image has {channels}")
    return mean.reshape(-1, 1, 1), std.reshape(-1, 1, 1)


def _augment_array(x: np.ndarray, cfg: AugmentConfig,
                   rng: np.random.Generator) -> np.ndarray:
    c, h, w = x.shape
    lo, hi = cfg.crop_scale_range
    scale = rng.uniform(lo, hi)
    side = math.sqrt(scale)
    ch = int(round(h * side))
    cw = int(round(w * side))
    if not (1 <= ch <= h and 1 <= cw <= w):
        log.debug("degenerate crop %dx%d, using full image", ch, cw)
        ch, cw = h, w
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    out = resize_bilinear(x[:, top:top + ch, left:left + cw], cfg.target_size)
    if rng.random() < cfg.hflip_prob:
        out = out[:, :, ::-1]
    mean, std = _channel_stats(cfg, c)
    return (out - mean) / std


def augment(image, cfg: AugmentConfig, rng: np.random.Generator) -> Tensor:
    """Random crop, bilinear resize, horizontal flip, normalize (one image)."""
    x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise ContractError(f"augment expects one CHW image, got {x.shape}")
    if not cfg.enabled:
        mean, std = _channel_stats(cfg, x.shape[0])
        return Tensor((resize_bilinear(x, cfg.target_size) - mean) / std)
    return Tensor(_augment_array(x, cfg, rng))


def preprocess(images: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Deterministic resize + normalize for a whole batch (eval path)."""
    x = np.asarray(images, dtype=np.float64)
    mean, std = _channel_stats(cfg, x.shape[1])
    return (resize_bilinear(x, cfg.target_size) - mean) / std


def augment_batch(images: np.ndarray, cfg: AugmentConfig,
                  rng: np.random.Generator) -> np.ndarray:
    if not cfg.enabled:
        return preprocess(images, cfg)
    return np.stack([_augment_array(images[i], cfg, rng)
                     for i in range(len(images))])


# ---------------------------------------------------------------------------
# batching


def batches(ds: Dataset, batch_size: int, shuffle: bool, seed: int = 0):
    """Yield mini-batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    order = (np.random.default_rng(seed).permutation(n) if shuffle
             else np.arange(n))
    for start in range(0, n, batch_size):
        sel = order[start:start + batch_size]
        yield LabeledBatch(images=Tensor(ds.images.data[sel]),
                           labels=ds.labels[sel], indices=sel)


# ---------------------------------------------------------------------------
# synthetic digits

_DIGIT_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}

_GLYPHS = np.stack([
    np.array([[float(ch) for ch in row] for row in _DIGIT_GLYPHS[d]])
    for d in range(10)
])


def synthetic_digits(n: int, seed: int = 0, image_size: int = 28,
                     split: str = "train", noise: float = 0.12) -> Dataset:
    """Procedural 10-class digit corpus: jittered glyph scale, position,
    aspect, stroke intensity, and additive pixel noise."""
    if n < 10:
        raise ParameterError(f"synthetic_digits needs n >= 10, got {n}")
    entropy = [0x5D161757, seed] + list(split.encode())
    rng = np.random.default_rng(np.random.SeedSequence(entropy))
    labels = np.tile(np.arange(10), (n + 9) // 10)[:n]
    labels = rng.permutation(labels)
    images = np.empty((n, 1, image_size, image_size))
    max_h = image_size - 2
    for i, label in enumerate(labels):
        gh = int(rng.integers(image_size // 2, max_h + 1))
        aspect = rng.uniform(0.85, 1.2)
        gw = int(np.clip(round(gh * 5.0 / 7.0 * aspect), 4, image_size - 2))
        glyph = resize_bilinear(_GLYPHS[label], (gh, gw))
        top = int(rng.integers(0, image_size - gh + 1))
        left = int(rng.integers(0, image_size - gw + 1))
        canvas = np.zeros((image_size, image_size))
        canvas[top:top + gh, left:left + gw] = glyph * rng.uniform(0.6, 1.0)
        canvas += rng.normal(0.0, noise, size=canvas.shape)
        images[i, 0] = np.clip(canvas, 0.0, 1.0)
    return Dataset(images=Tensor(images), labels=labels.astype(np.int64),
                   class_names=[str(d) for d in range(10)], split=split)


# ---------------------------------------------------------------------------
# directory conventions used by the CLI

_IDX_CANDIDATES = {
    "train": (("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
              ("train-images.idx", "train-labels.idx")),
    "test": (("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
             ("test-images-idx3-ubyte", "test-labels-idx1-ubyte"),
             ("test-images.idx", "test-labels.idx")),
}


def load_dir(path, image_size: int | None = None) -> tuple[Dataset, Dataset]:
    """Resolve a data directory into (train, test) datasets.

    IDX pairs win when present (canonical or ``.idx`` names); otherwise the
    directory is treated as a class-per-subdirectory image folder with an
    optional ``manifest.csv``.
    """
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"data directory {root} does not exist")
    found = {}
    for split, candidates in _IDX_CANDIDATES.items():
        for imgs, lbls in candidates:
            if (root / imgs).exists() and (root / lbls).exists():
                found[split] = (root / imgs, root / lbls)
                break
    if "train" in found and "test" in found:
        train = load_idx(*found["train"], split="train")
        test = load_idx(*found["test"], split="test")
    elif any(d.is_dir() for d in root.iterdir()):
        manifest = root / "manifest.csv"
        manifest = manifest if manifest.exists() else None
        train = load_image_folder(root, manifest, "train", image_size)
        test = load_image_folder(root, manifest, "test", image_size)
    else:
        raise ConfigError(
            f"{root}: found neither IDX train/test pairs nor class subdirectories")
    classes = max(len(train.class_names), len(test.class_names))
    names = (train.class_names if len(train.class_names) == classes
             else test.class_names)
    train.class_names = names
    test.class_names = names
    return train, test
