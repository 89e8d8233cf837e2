"""Small-image datasets: IDX files and synthetic multi-domain generators.

Synthetic domains share one label space but differ in feature distribution:
each class has a seeded base pattern, samples add per-sample jitter, and a
domain transform (invert, noise, downsampling, background clutter) reshapes
the feature distribution without touching labels.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, replace

import numpy as np

from .nncore import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TRANSFORM_KINDS = ("identity", "invert", "gaussian_noise", "downsample", "background_clutter")


class DatasetError(ValueError):
    pass


class IdxError(DatasetError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray  # (channels, height, width), float64 in [0, 1]
    label: int


@dataclass
class DomainDataset:
    examples: list[LabeledExample]
    domain_id: str
    native_resolution: tuple[int, int]
    channels: int
    class_count: int

    def __post_init__(self):
        c, (h, w) = self.channels, self.native_resolution
        for ex in self.examples:
            if ex.image.shape != (c, h, w):
                raise DatasetError(
                    f"domain {self.domain_id}: example shape {ex.image.shape} "
                    f"!= ({c}, {h}, {w})")
            if not 0 <= ex.label < self.class_count:
                raise DatasetError(
                    f"domain {self.domain_id}: label {ex.label} outside "
                    f"[0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.examples)

    def labels(self) -> np.ndarray:
        return np.asarray([ex.label for ex in self.examples], dtype=np.int64)

    def images(self) -> np.ndarray:
        return np.stack([ex.image for ex in self.examples])


@dataclass(frozen=True)
class Transform:
    kind: str
    sigma: float = 0.0       # gaussian_noise
    factor: int = 2          # downsample
    level: float = 0.0       # background_clutter

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise DatasetError(f"unknown transform {self.kind!r}")
        if self.kind == "gaussian_noise" and self.sigma < 0:
            raise DatasetError("gaussian_noise sigma must be >= 0")
        if self.kind == "downsample" and self.factor not in (2, 4):
            raise DatasetError("downsample factor must be 2 or 4")
        if self.kind == "background_clutter" and not 0.0 <= self.level <= 1.0:
            raise DatasetError("background_clutter level must be in [0, 1]")


def parse_transforms(text: str) -> tuple[Transform, ...]:
    """Parse a transform chain such as 'invert+gaussian_noise(0.1)'."""
    out = []
    for part in text.strip().split("+"):
        part = part.strip()
        m = re.fullmatch(r"([a-z_0-9]+)(?:\(([^)]*)\))?", part)
        if not m:
            raise DatasetError(f"cannot parse transform {part!r}")
        name, arg = m.group(1), m.group(2)
        if name == "identity":
            out.append(Transform("identity"))
        elif name == "invert":
            out.append(Transform("invert"))
        elif name == "gaussian_noise":
            out.append(Transform("gaussian_noise", sigma=float(arg)))
        elif name == "downsample":
            out.append(Transform("downsample", factor=int(arg)))
        elif name == "background_clutter":
            out.append(Transform("background_clutter", level=float(arg)))
        else:
            raise DatasetError(f"unknown transform {name!r}")
    return tuple(out)


@dataclass(frozen=True)
class SyntheticDomainSpec:
    base_pattern_seed: int
    transforms: tuple[Transform, ...] = (Transform("identity"),)
    resolution: tuple[int, int] = (16, 16)
    samples_per_class: int = 100
    class_count: int = 10

    def __post_init__(self):
        if self.samples_per_class < 1 or self.class_count < 1:
            raise DatasetError("samples_per_class and class_count must be positive")
        if min(self.resolution) < 4:
            raise DatasetError("resolution sides must be >= 4")


# ---------------------------------------------------------------------------
# IDX format


def _read_exact(fh, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise IdxTruncatedError(f"{path}: expected {n} more bytes, got {len(data)}")
    return data


def load_idx(images_path, labels_path, domain_id: str | None = None) -> DomainDataset:
    """Load a big-endian IDX image/label pair, rescaling pixels to [0, 1]."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxMagicError(
                f"{images_path}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
        raw = _read_exact(fh, count * rows * cols, images_path)
    with open(labels_path, "rb") as fh:
        magic, lcount = struct.unpack(">II", _read_exact(fh, 8, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise IdxMagicError(
                f"{labels_path}: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
        lraw = _read_exact(fh, lcount, labels_path)
    if count != lcount:
        raise IdxCountMismatchError(
            f"{images_path}: {count} images but {lcount} labels")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    labels = np.frombuffer(lraw, dtype=np.uint8)
    class_count = int(labels.max()) + 1 if count else 0
    examples = [
        LabeledExample(pixels[i][None].astype(np.float64) / 255.0, int(labels[i]))
        for i in range(count)
    ]
    name = domain_id if domain_id is not None else str(images_path)
    return DomainDataset(examples, name, (rows, cols), 1, class_count)


def save_idx(dataset: DomainDataset, images_path, labels_path) -> None:
    """Serialize a single-channel dataset back to an IDX pair."""
    if dataset.channels != 1:
        raise DatasetError("IDX serialization supports single-channel data only")
    h, w = dataset.native_resolution
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(dataset), h, w))
        for ex in dataset.examples:
            fh.write(np.round(ex.image[0] * 255.0).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(dataset)))
        fh.write(bytes(int(ex.label) for ex in dataset.examples))


# ---------------------------------------------------------------------------
# Synthetic domains


def _box_blur(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return out / 9.0


def _class_patterns(seed: int, class_count: int, resolution: tuple[int, int]) -> np.ndarray:
    rng = make_rng(seed, 301)
    h, w = resolution
    patterns = np.empty((class_count, h, w))
    for c in range(class_count):
        raw = _box_blur(rng.uniform(0.0, 1.0, (h, w)))
        cut = np.quantile(raw, 0.65)
        patterns[c] = _box_blur(np.where(raw > cut, 0.85, 0.15))
    return patterns


def _apply_transforms(images: np.ndarray, transforms: tuple[Transform, ...],
                      rng: np.random.Generator) -> np.ndarray:
    for tf in transforms:
        if tf.kind == "identity":
            continue
        if tf.kind == "invert":
            images = 1.0 - images
        elif tf.kind == "gaussian_noise":
            images = np.clip(images + rng.normal(0.0, tf.sigma, images.shape), 0.0, 1.0)
        elif tf.kind == "downsample":
            images = images[:, ::tf.factor, ::tf.factor]
        elif tf.kind == "background_clutter":
            n, h, w = images.shape
            clutter = np.stack([_box_blur(rng.uniform(0.0, 1.0, (h, w))) for _ in range(n)])
            images = np.maximum(images, tf.level * clutter)
    return images


def synth_domain(spec: SyntheticDomainSpec, seed: int,
                 domain_id: str | None = None) -> DomainDataset:
    """Deterministic synthetic domain: equal class counts, shared label space.

    The base sample stream depends only on (spec geometry, seed), never on the
    transform chain, so two specs that differ only in transforms produce
    pixel-aligned sample pairs.
    """
    h, w = spec.resolution
    patterns = _class_patterns(spec.base_pattern_seed, spec.class_count, spec.resolution)
    rng_base = make_rng((spec.base_pattern_seed, seed), 311)
    images = np.empty((spec.class_count * spec.samples_per_class, h, w))
    labels = np.empty(spec.class_count * spec.samples_per_class, dtype=np.int64)
    i = 0
    for c in range(spec.class_count):
        for _ in range(spec.samples_per_class):
            dy, dx = rng_base.integers(-1, 2, size=2)
            sample = np.roll(patterns[c], (int(dy), int(dx)), axis=(0, 1))
            sample = sample + rng_base.normal(0.0, 0.08, (h, w))
            images[i] = np.clip(sample, 0.0, 1.0)
            labels[i] = c
            i += 1
    rng_tf = make_rng((spec.base_pattern_seed, seed), 313)
    images = _apply_transforms(images, spec.transforms, rng_tf)
    order = make_rng((spec.base_pattern_seed, seed), 317).permutation(len(labels))
    name = domain_id if domain_id is not None else "+".join(t.kind for t in spec.transforms)
    examples = [LabeledExample(images[j][None].copy(), int(labels[j])) for j in order]
    res = images.shape[1:]
    return DomainDataset(examples, name, (res[0], res[1]), 1, spec.class_count)


def resize(dataset: DomainDataset, target_resolution: tuple[int, int]) -> DomainDataset:
    """Nearest-neighbor resampling; labels untouched."""
    th, tw = target_resolution
    if th < 1 or tw < 1:
        raise DatasetError("target resolution sides must be >= 1")
    h, w = dataset.native_resolution
    if (th, tw) == (h, w):
        return replace(dataset, examples=list(dataset.examples))
    rows = (np.arange(th) * h // th).astype(np.intp)
    cols = (np.arange(tw) * w // tw).astype(np.intp)
    examples = [
        LabeledExample(ex.image[:, rows][:, :, cols].copy(), ex.label)
        for ex in dataset.examples
    ]
    return replace(dataset, examples=examples, native_resolution=(th, tw))


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class DomainSplits:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


def stratified_split(dataset: DomainDataset, val_fraction: float, test_fraction: float,
                     seed) -> DomainSplits:
    """Per-class shuffled split; every class must land in the training part."""
    labels = dataset.labels()
    rng = make_rng(seed, 331)
    train, val, test = [], [], []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(val_fraction * idx.size))
        n_test = int(round(test_fraction * idx.size))
        if idx.size - n_val - n_test < 1:
            raise DatasetError(
                f"domain {dataset.domain_id}: class {c} has no training samples "
                f"after split ({idx.size} total)")
        val.extend(idx[:n_val].tolist())
        test.extend(idx[n_val:n_val + n_test].tolist())
        train.extend(idx[n_val + n_test:].tolist())
    return DomainSplits(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)))


def subset(dataset: DomainDataset, indices) -> DomainDataset:
    examples = [dataset.examples[i] for i in indices]
    return replace(dataset, examples=examples)
