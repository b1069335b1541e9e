"""Datasets: IDX ingestion, a synthetic shape-composition generator, splits, batching."""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import (
    ArgumentError,
    BadMagicError,
    ConfigError,
    CountMismatchError,
    TruncatedFileError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledImageSet:
    images: np.ndarray  # [n, C, H, W], float64 in [0, 1]
    labels: np.ndarray  # [n], int64
    class_names: list[str] | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ArgumentError(f"images must be [n, C, H, W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise CountMismatchError(f"{self.images.shape[0]} images but {self.labels.shape} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, index) -> "LabeledImageSet":
        return LabeledImageSet(self.images[index], self.labels[index], self.class_names)


# ----------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError(f"{what}: file too short for a magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{what}: magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{what}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    body = raw[header:]
    if len(body) < need:
        raise TruncatedFileError(f"{what}: expected {need} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def load_idx_pair(images_path, labels_path) -> LabeledImageSet:
    """Read an IDX image file (u8, ``[n, rows, cols]``) and its label file.

    Pixels are scaled by 1/255; ``.gz`` files are decompressed transparently.
    """
    pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if pixels.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{pixels.shape[0]} images but {labels.shape[0]} labels")
    images = pixels[:, None, :, :].astype(np.float64) / 255.0
    return LabeledImageSet(images, labels.astype(np.int64))


def write_idx_pair(images_u8: np.ndarray, labels_u8: np.ndarray, images_path, labels_path) -> None:
    """Write u8 arrays in IDX layout (used for fixtures and round trips)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images_u8.shape))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels_u8.shape[0]))
        fh.write(labels_u8.tobytes())


# ----------------------------------------------------------------------------
# synthetic shapes

PRIMITIVES = ("hbar", "vbar", "diag", "antidiag", "cross", "xcross",
              "ring", "blob", "checker", "square", "hstripes", "vstripes",
              "triangle", "dots", "zigzag", "diamond")


def _primitive(kind: str, dy: np.ndarray, dx: np.ndarray, scale: float, freq: int) -> np.ndarray:
    s = scale
    if kind == "hbar":
        return ((np.abs(dy) < 1.5 * s) & (np.abs(dx) < 5 * s)).astype(float)
    if kind == "vbar":
        return ((np.abs(dx) < 1.5 * s) & (np.abs(dy) < 5 * s)).astype(float)
    if kind == "diag":
        return ((np.abs(dx - dy) < 2.0 * s) & (np.abs(dx + dy) < 7 * s)).astype(float)
    if kind == "antidiag":
        return _primitive("diag", dy, -dx, s, freq)
    if kind == "cross":
        return _primitive("hbar", dy, dx, s, freq) + _primitive("vbar", dy, dx, s, freq) > 0
    if kind == "xcross":
        return _primitive("diag", dy, dx, s, freq) + _primitive("antidiag", dy, dx, s, freq) > 0
    if kind == "ring":
        r = np.hypot(dy, dx)
        return (np.abs(r - 4.0 * s) < 1.2 * s).astype(float)
    if kind == "blob":
        r2 = dy ** 2 + dx ** 2
        return np.exp(-r2 / (2 * (2.5 * s) ** 2))
    if kind == "checker":
        inside = (np.abs(dx) < 5 * s) & (np.abs(dy) < 5 * s)
        return (inside & ((np.floor(dx / freq) + np.floor(dy / freq)) % 2 == 0)).astype(float)
    if kind in ("hstripes", "vstripes"):
        inside = (np.abs(dx) < 5 * s) & (np.abs(dy) < 5 * s)
        along = dy if kind == "hstripes" else dx
        return (inside & (np.floor(along / freq) % 2 == 0)).astype(float)
    if kind == "triangle":
        return ((dy < 4 * s) & (dy > -5 * s) & (np.abs(dx) < (dy + 5 * s) * 0.55)).astype(float)
    if kind == "dots":
        near = (np.abs((dx + 6 * s) % (4 * s) - 2 * s) < 1.0) & (np.abs((dy + 6 * s) % (4 * s) - 2 * s) < 1.0)
        return (near & (np.abs(dx) < 6 * s) & (np.abs(dy) < 6 * s)).astype(float)
    if kind == "zigzag":
        wave = 2.5 * s * np.abs(((dx / (2.5 * s)) % 2) - 1) * 2 - 2.5 * s
        return ((np.abs(dy - wave) < 1.2 * s) & (np.abs(dx) < 6 * s)).astype(float)
    if kind == "diamond":
        d = np.abs(dx) + np.abs(dy)
        return ((d > 3.5 * s) & (d < 5.5 * s)).astype(float)
    if kind == "square":
        m = np.maximum(np.abs(dx), np.abs(dy))
        return ((m > 3.5 * s) & (m < 5.2 * s)).astype(float)
    raise ConfigError(f"unknown primitive {kind!r}")


@dataclass
class SyntheticSpec:
    """Each class is a pair of primitives: one on the left, one on the right.

    The right-hand part is drawn at ``right_contrast``. In the default table
    the six known classes form a cycle over three strokes and three textures,
    so every stroke and every texture belongs to two known classes and neither
    side alone names the class. Classes 6..8 are the three unused
    stroke/texture pairings, class 9 uses two primitives no known class has.
    """

    classes: list[tuple[str, str]] = field(default_factory=lambda: [
        ("hbar", "ring"), ("hbar", "blob"), ("vbar", "blob"),
        ("vbar", "checker"), ("diag", "checker"), ("diag", "ring"),
        ("hbar", "checker"), ("vbar", "ring"), ("diag", "blob"), ("triangle", "dots"),
    ])
    size: int = 32
    right_contrast: float = 0.6
    jitter: int = 3
    scale_range: tuple[float, float] = (0.85, 1.15)
    intensity_range: tuple[float, float] = (0.7, 1.0)
    noise: float = 0.08

    def __post_init__(self):
        self.classes = [tuple(c) for c in self.classes]
        self.scale_range = tuple(self.scale_range)
        self.intensity_range = tuple(self.intensity_range)
        if len(self.classes) < 2:
            raise ConfigError("synthetic spec needs at least two classes")
        for pair in self.classes:
            if len(pair) != 2 or any(p not in PRIMITIVES for p in pair):
                raise ConfigError(f"bad class definition {pair!r}")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("duplicate class definitions")
        if self.size < 16 or self.jitter < 0 or self.noise < 0:
            raise ConfigError("size >= 16, jitter >= 0 and noise >= 0 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [list(c) for c in self.classes]
        d["scale_range"] = list(self.scale_range)
        d["intensity_range"] = list(self.intensity_range)
        return d


def generate_synthetic(spec: SyntheticSpec, n_per_class: int, seed: int) -> LabeledImageSet:
    """Render ``n_per_class`` single-channel images per class; pure in ``(spec, seed)``."""
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    S = spec.size
    yy, xx = np.mgrid[0:S, 0:S].astype(float)
    n_cls = len(spec.classes)
    images = np.empty((n_cls * n_per_class, 1, S, S))
    labels = np.repeat(np.arange(n_cls), n_per_class)
    centers = ((S / 2, S * 0.28), (S / 2, S * 0.72))
    for idx, c in enumerate(labels):
        canvas = np.zeros((S, S))
        for side, kind in enumerate(spec.classes[c]):
            cy, cx = centers[side]
            cy += rng.integers(-spec.jitter, spec.jitter + 1)
            cx += rng.integers(-spec.jitter, spec.jitter + 1)
            scale = rng.uniform(*spec.scale_range)
            amp = rng.uniform(*spec.intensity_range)
            freq = int(rng.integers(2, 4))
            if side == 1:
                amp *= spec.right_contrast
            canvas = np.maximum(canvas, amp * _primitive(kind, yy - cy, xx - cx, scale, freq))
        canvas += rng.uniform(0.0, 0.15) + spec.noise * rng.standard_normal((S, S))
        images[idx, 0] = np.clip(canvas, 0.0, 1.0)
    names = [f"{a}+{b}" for a, b in spec.classes]
    return LabeledImageSet(images, labels, names)


# ----------------------------------------------------------------------------
# splits


@dataclass
class SplitSpec:
    known_classes: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    unknown_classes: list[int] = field(default_factory=lambda: [6, 7, 8, 9])
    seed: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        self.known_classes = [int(c) for c in self.known_classes]
        self.unknown_classes = [int(c) for c in self.unknown_classes]
        if set(self.known_classes) & set(self.unknown_classes):
            raise ConfigError("known and unknown class lists overlap")
        if len(set(self.known_classes)) != len(self.known_classes):
            raise ConfigError("duplicate known classes")
        if len(self.known_classes) < 2:
            raise ConfigError("need at least two known classes")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        return cls(**json.loads(text))


class Split(NamedTuple):
    train_known: LabeledImageSet
    test_known: LabeledImageSet
    test_unknown: LabeledImageSet


def apply_split(data: LabeledImageSet, spec: SplitSpec) -> Split:
    """Per-class seeded train/test split of the known classes.

    Known labels are remapped so ``known_classes[j] -> j``. All samples of
    unknown classes go to ``test_unknown`` with their original labels.
    """
    present = set(np.unique(data.labels).tolist())
    missing = (set(spec.known_classes) | set(spec.unknown_classes)) - present
    if missing:
        raise ConfigError(f"split names classes absent from the data: {sorted(missing)}")
    rng = np.random.default_rng(spec.seed)
    train_idx, test_idx = [], []
    for c in spec.known_classes:
        idx = np.nonzero(data.labels == c)[0]
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(spec.train_fraction * idx.size))
        train_idx.append(np.sort(idx[:n_train]))
        test_idx.append(np.sort(idx[n_train:]))
    remap = np.full(int(data.labels.max()) + 1, -1, dtype=np.int64)
    remap[spec.known_classes] = np.arange(len(spec.known_classes))
    names = None
    if data.class_names is not None:
        names = [data.class_names[c] for c in spec.known_classes]

    def known(parts):
        idx = np.concatenate(parts)
        return LabeledImageSet(data.images[idx], remap[data.labels[idx]], names)

    unk = np.nonzero(np.isin(data.labels, spec.unknown_classes))[0]
    return Split(known(train_idx), known(test_idx), data.subset(unk))


def batches(data: LabeledImageSet, batch_size: int, seed: int = 0,
            shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ArgumentError("batch_size must be >= 1")
    n = len(data)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield data.images[idx], data.labels[idx]


def channel_stats(images: np.ndarray) -> tuple[list[float], list[float]]:
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return mean.tolist(), std.tolist()


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return (images - m) / s
