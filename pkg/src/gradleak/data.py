"""Dataset provisioning: synthetic shape/texture corpora, CIFAR-10 binary
ingestion, batch sampling, and the label-shift trick used with the DP defense.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GEOMETRIC_SHAPES = ("disk", "square", "cross", "triangle", "ring",
                    "diamond", "hbar", "vbar", "frame", "dot")
TEXTURE_PATTERNS = ("hstripes", "vstripes", "dstripes", "checker", "noise",
                    "gradient_h", "gradient_v", "rings", "blocks", "speckle")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float64 in [0,1]
    labels: np.ndarray  # (n,) int64
    split: str = "public"
    n_classes: int = 0

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("images/labels length mismatch")
        if self.n_classes == 0:
            self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self) -> int:
        return len(self.images)


def _draw_geometric(rng: np.random.Generator, cls: int, size: int) -> np.ndarray:
    shape = GEOMETRIC_SHAPES[cls]
    bg = rng.uniform(0.0, 0.25, 3)
    fg = rng.uniform(0.55, 1.0, 3)
    img = np.ones((3, size, size)) * bg[:, None, None]
    yy, xx = np.mgrid[0:size, 0:size]
    cy = rng.uniform(0.35, 0.65) * size
    cx = rng.uniform(0.35, 0.65) * size
    r = rng.uniform(0.18, 0.32) * size
    if shape == "disk":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif shape == "square":
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    elif shape == "cross":
        t = max(1.0, r / 2.5)
        mask = ((np.abs(yy - cy) <= t) | (np.abs(xx - cx) <= t)) & \
               (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    elif shape == "triangle":
        mask = (yy - cy <= r / 2) & (yy - cy >= np.abs(xx - cx) * 2 - r)
    elif shape == "ring":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    elif shape == "diamond":
        mask = np.abs(yy - cy) + np.abs(xx - cx) <= r
    elif shape == "hbar":
        mask = (np.abs(yy - cy) <= r / 2.5) & (np.abs(xx - cx) <= r * 1.3)
    elif shape == "vbar":
        mask = (np.abs(xx - cx) <= r / 2.5) & (np.abs(yy - cy) <= r * 1.3)
    elif shape == "frame":
        inner = (np.abs(yy - cy) <= 0.6 * r) & (np.abs(xx - cx) <= 0.6 * r)
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r) & ~inner
    else:  # dot
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (0.45 * r) ** 2
    img[:, mask] = fg[:, None]
    return np.clip(img, 0.0, 1.0)


def _draw_texture(rng: np.random.Generator, cls: int, size: int) -> np.ndarray:
    pattern = TEXTURE_PATTERNS[cls]
    lo = rng.uniform(0.0, 0.3, 3)
    hi = rng.uniform(0.6, 1.0, 3)
    yy, xx = np.mgrid[0:size, 0:size]
    period = rng.integers(2, max(3, size // 4))
    phase = rng.integers(0, period)
    if pattern == "hstripes":
        mask = ((yy + phase) // period) % 2 == 0
    elif pattern == "vstripes":
        mask = ((xx + phase) // period) % 2 == 0
    elif pattern == "dstripes":
        mask = ((yy + xx + phase) // period) % 2 == 0
    elif pattern == "checker":
        mask = (((yy + phase) // period) + ((xx + phase) // period)) % 2 == 0
    elif pattern == "noise":
        mask = rng.random((size, size)) > 0.5
    elif pattern == "gradient_h":
        mask = None
        ramp = xx / (size - 1)
    elif pattern == "gradient_v":
        mask = None
        ramp = yy / (size - 1)
    elif pattern == "rings":
        d = np.sqrt((yy - size / 2) ** 2 + (xx - size / 2) ** 2)
        mask = ((d.astype(int) + phase) // period) % 2 == 0
    elif pattern == "blocks":
        blk = max(2, size // 4)
        mask = rng.random((size // blk + 1, size // blk + 1)) > 0.5
        mask = mask.repeat(blk, 0).repeat(blk, 1)[:size, :size]
    else:  # speckle
        mask = rng.random((size, size)) > 0.8
    if mask is None:
        img = lo[:, None, None] + (hi - lo)[:, None, None] * ramp[None]
    else:
        img = np.where(mask[None], hi[:, None, None], lo[:, None, None])
        img = np.broadcast_to(img, (3, size, size)).copy()
    return np.clip(img, 0.0, 1.0)


def synth_dataset(seed: int, count: int, classes: int, size: int = 32,
                  family: str = "geometric", split: str = "public") -> Dataset:
    """Deterministic synthetic dataset; class = shape or texture type."""
    if size not in (16, 32):
        raise DataError(f"unsupported size {size}")
    if not 1 <= classes <= 10:
        raise DataError("classes must be in 1..10")
    if family not in ("geometric", "texture"):
        raise DataError(f"unknown family {family!r}")
    rng = np.random.default_rng(seed)
    draw = _draw_geometric if family == "geometric" else _draw_texture
    labels = np.array([i % classes for i in range(count)], dtype=np.int64)
    rng.shuffle(labels)
    images = np.stack([draw(rng, int(c), size) for c in labels])
    return Dataset(images, labels, split=split, n_classes=classes)


def load_cifar10_binary(path) -> Dataset:
    """Standard 3073-byte-record binary layout: 1 label byte + 3072 pixels."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % 3073:
        raise DataError(f"bad CIFAR-10 file length {raw.size}")
    records = raw.reshape(-1, 3073)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError("label byte > 9")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, split="private", n_classes=10)


def mislabel(dataset: Dataset) -> Dataset:
    """Shift every label by one class; no label keeps its original value."""
    if dataset.n_classes < 2:
        raise DataError("mislabel needs at least 2 classes")
    labels = (dataset.labels + 1) % dataset.n_classes
    return Dataset(dataset.images, labels, split=dataset.split,
                   n_classes=dataset.n_classes)


def sample_batch(dataset: Dataset, batch_size: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Without-replacement batch: ((B,C,H,W) images, (B,) labels)."""
    if batch_size > len(dataset):
        raise DataError(f"batch {batch_size} > dataset {len(dataset)}")
    idx = rng.choice(len(dataset), size=batch_size, replace=False)
    return dataset.images[idx], dataset.labels[idx]
