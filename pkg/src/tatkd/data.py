"""Synthetic shape datasets and the IDX binary image format."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TASKS = ("classification", "segmentation")

SHAPES = ("square", "disc", "cross", "xcross", "triangle", "ring", "diamond", "tee")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXError(ValueError):
    pass


class IDXMagicError(IDXError):
    pass


class IDXDimensionError(IDXError):
    pass


class IDXTruncatedError(IDXError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x Cin, float32
    labels: np.ndarray  # (N,) class ids or (N, H, W) per-pixel ids
    num_classes: int
    split: str = "train"
    task: str = "classification"
    shapes: list = field(default_factory=list, repr=False)  # render metadata, synthetic sets only

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    @property
    def in_channels(self) -> int:
        return self.images.shape[-1]

    def sample_hashes(self) -> set[str]:
        return {hashlib.sha1(img.tobytes()).hexdigest() for img in self.images}


# ---------------------------------------------------------------------------
# rendering


def shape_mask(kind: str, cy: int, cx: int, radius: int, hw: int) -> np.ndarray:
    """Boolean ``hw x hw`` mask of one shape centred at ``(cy, cx)``."""
    yy, xx = np.mgrid[0:hw, 0:hw]
    dy, dx = yy - cy, xx - cx
    cheb = np.maximum(np.abs(dy), np.abs(dx))
    dist = np.sqrt(dy * dy + dx * dx)
    r = radius
    if kind == "square":
        return (cheb <= r) & (cheb > r - 1)
    if kind == "disc":
        return dist <= r + 0.3
    if kind == "cross":
        return ((dx == 0) & (np.abs(dy) <= r)) | ((dy == 0) & (np.abs(dx) <= r))
    if kind == "xcross":
        return ((dx == dy) | (dx == -dy)) & (cheb <= r)
    if kind == "triangle":
        return (np.abs(dy) <= r) & (2 * np.abs(dx) <= dy + r)
    if kind == "ring":
        return (dist <= r + 0.3) & (dist > r - 0.7)
    if kind == "diamond":
        manhattan = np.abs(dx) + np.abs(dy)
        return (manhattan <= r) & (manhattan > r - 1)
    if kind == "tee":
        return ((dy == -r) & (np.abs(dx) <= r)) | ((dx == 0) & (np.abs(dy) <= r))
    raise ValueError(f"unknown shape {kind!r}")


def render_scene(hw: int, shapes: list[tuple[str, int, int, int, float]]) -> tuple[np.ndarray, np.ndarray]:
    """Paint shapes in order; returns ``(image hw x hw, label map)``.

    Each entry is ``(kind, cy, cx, radius, intensity)``.  Label ids are
    ``SHAPES.index(kind) + 1`` with 0 for background.
    """
    image = np.zeros((hw, hw), dtype=np.float32)
    labels = np.zeros((hw, hw), dtype=np.int64)
    for kind, cy, cx, radius, intensity in shapes:
        m = shape_mask(kind, cy, cx, radius, hw)
        image[m] = intensity
        labels[m] = SHAPES.index(kind) + 1
    return image, labels


def _check_args(n: int, hw: int, k_classes: int) -> None:
    if n < 1:
        raise ValueError("n must be >= 1")
    if hw < 8:
        raise ValueError(f"image size must be >= 8, got {hw}")
    if not 2 <= k_classes <= len(SHAPES):
        raise ValueError(f"k_classes must be in 2..{len(SHAPES)}, got {k_classes}")


def _random_shape(kind: str, hw: int, rng: np.random.Generator) -> tuple[str, int, int, int, float]:
    radius = int(rng.integers(2, max(3, hw // 4) + 1))
    cy = int(rng.integers(radius, hw - radius))
    cx = int(rng.integers(radius, hw - radius))
    intensity = float(rng.uniform(0.6, 1.0))
    return kind, cy, cx, radius, intensity


def gen_shapes_classification(n: int, hw: int, k_classes: int, noise: float, seed: int, split: str = "train") -> Dataset:
    """Balanced single-shape images labelled by shape kind."""
    _check_args(n, hw, k_classes)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % k_classes)
    images = np.empty((n, hw, hw, 1), dtype=np.float32)
    meta = []
    for i, lab in enumerate(labels):
        spec = _random_shape(SHAPES[lab], hw, rng)
        img, _ = render_scene(hw, [spec])
        if noise > 0:
            img = img + rng.normal(0.0, noise, size=img.shape).astype(np.float32)
        images[i, :, :, 0] = img
        meta.append(spec)
    return Dataset(images, labels.astype(np.int64), k_classes, split, "classification", meta)


def gen_shapes_segmentation(n: int, hw: int, k_classes: int, seed: int, noise: float = 0.0, split: str = "train") -> Dataset:
    """One shape per image; ``k_classes`` counts background plus ``k_classes - 1`` shape kinds."""
    _check_args(n, hw, k_classes)
    rng = np.random.default_rng(seed)
    kinds = rng.permutation(np.arange(n) % (k_classes - 1))
    images = np.empty((n, hw, hw, 1), dtype=np.float32)
    labels = np.empty((n, hw, hw), dtype=np.int64)
    meta = []
    for i, kind in enumerate(kinds):
        spec = _random_shape(SHAPES[kind], hw, rng)
        img, lab = render_scene(hw, [spec])
        if noise > 0:
            img = img + rng.normal(0.0, noise, size=img.shape).astype(np.float32)
        images[i, :, :, 0] = img
        labels[i] = lab
        meta.append(spec)
    return Dataset(images, labels, k_classes, split, "segmentation", meta)


def make_splits(
    task: str, n_train: int, n_test: int, hw: int, k_classes: int, noise: float, seed: int
) -> tuple[Dataset, Dataset]:
    """Train/test sets from independent seed streams, with exact duplicates of
    training samples removed from the test side."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    train_seed, test_seed = np.random.SeedSequence(seed).spawn(2)
    gen = gen_shapes_classification if task == "classification" else gen_shapes_segmentation

    def build(count, ss, split):
        s = int(ss.generate_state(1)[0])
        if task == "classification":
            return gen(count, hw, k_classes, noise, s, split)
        return gen(count, hw, k_classes, s, noise, split)

    train = build(n_train, train_seed, "train")
    seen = train.sample_hashes()
    test = build(n_test, test_seed, "test")
    keep = [i for i, img in enumerate(test.images) if hashlib.sha1(img.tobytes()).hexdigest() not in seen]
    if len(keep) != len(test):
        test = Dataset(
            test.images[keep], test.labels[keep], k_classes, "test", task, [test.shapes[i] for i in keep]
        )
    return train, test


def augment(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator, flip: bool, crop: bool, pad: int = 2):
    """Random horizontal flip and pad-then-crop; per-pixel labels follow the image."""
    if not (flip or crop):
        return images, labels
    images = images.copy()
    labels = labels.copy()
    B, H, W, _ = images.shape
    dense = labels.ndim == 3
    for i in range(B):
        if flip and rng.random() < 0.5:
            images[i] = images[i, :, ::-1]
            if dense:
                labels[i] = labels[i, :, ::-1]
        if crop:
            oy, ox = rng.integers(0, 2 * pad + 1, size=2)
            padded = np.pad(images[i], ((pad, pad), (pad, pad), (0, 0)))
            images[i] = padded[oy : oy + H, ox : ox + W]
            if dense:
                lp = np.pad(labels[i], pad)
                labels[i] = lp[oy : oy + H, ox : ox + W]
    return images, labels


# ---------------------------------------------------------------------------
# IDX


def _open(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(raw: bytes, expected_magic: tuple[int, ...], what: str) -> np.ndarray:
    if len(raw) < 4:
        raise IDXTruncatedError(f"{what}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in expected_magic:
        raise IDXMagicError(f"{what}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXTruncatedError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise IDXTruncatedError(f"{what}: expected {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx(images_path: str | Path, labels_path: str | Path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels scaled to ``[0, 1]``.

    Label files are 1-d (``0x00000801``) for classification or 3-d
    (``0x00000803``) for per-pixel segmentation maps.
    """
    images = _parse_idx(_open(images_path), (IDX_IMAGES_MAGIC,), "images")
    labels = _parse_idx(_open(labels_path), (IDX_LABELS_MAGIC, IDX_IMAGES_MAGIC), "labels")
    if images.shape[0] != labels.shape[0]:
        raise IDXDimensionError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    task = "classification"
    if labels.ndim == 3:
        if labels.shape != images.shape:
            raise IDXDimensionError(f"label maps {labels.shape} do not match images {images.shape}")
        task = "segmentation"
    labels = labels.astype(np.int64)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    data = (images.astype(np.float32) / 255.0)[..., None]
    return Dataset(data, labels, k, split, task)


def _idx_bytes(arr: np.ndarray, magic: int) -> bytes:
    return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.astype(np.uint8).tobytes()


def write_idx(dataset: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    """Write a single-channel dataset as IDX; pixels clipped to ``[0, 1]`` and quantised."""
    if dataset.in_channels != 1:
        raise IDXError("IDX images are single-channel")
    pix = np.rint(np.clip(dataset.images[..., 0], 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(_idx_bytes(pix, IDX_IMAGES_MAGIC))
    labels = dataset.labels.astype(np.uint8)
    magic = IDX_LABELS_MAGIC if labels.ndim == 1 else IDX_IMAGES_MAGIC
    Path(labels_path).write_bytes(_idx_bytes(labels, magic))
