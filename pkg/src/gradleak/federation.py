"""Single-round FedSGD simulation: the client computes head-only gradients on
a private batch, optionally clips and noises them, and uploads the result."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset, sample_batch
from .models import FeatureExtractor, SpabHead, save_checkpoint, load_checkpoint
from .tensor import Tensor

HEAD_PARAM_NAMES = ("w", "b", "w2", "b2")


@dataclass
class DpConfig:
    epsilon: float
    delta: float
    clip: float  # L2 clipping threshold S_f
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0 or not 0 < self.delta < 1 or self.clip <= 0:
            raise ValueError("bad DP config")


@dataclass
class GradientUpdate:
    grads: dict[str, np.ndarray]  # keyed by head parameter name
    batch_size: int  # metadata, evaluation only

    def l2_norm(self) -> float:
        return float(np.sqrt(sum((g ** 2).sum() for g in self.grads.values())))

    def to_bytes(self) -> bytes:
        return save_checkpoint(f"update:B={self.batch_size}", self.grads)

    @staticmethod
    def from_bytes(blob: bytes) -> "GradientUpdate":
        desc, grads = load_checkpoint(blob)
        if not desc.startswith("update:B="):
            raise ValueError(f"not a gradient update: {desc!r}")
        return GradientUpdate(grads, int(desc.split("=", 1)[1]))


def client_update(fe: FeatureExtractor, head: SpabHead,
                  images: np.ndarray, labels: np.ndarray) -> GradientUpdate:
    """Gradients of the mean cross-entropy w.r.t. head parameters only; the
    frozen extractor receives no gradient."""
    fe.set_trainable(False)
    try:
        y = fe.forward(Tensor(images))
        logits, _z, _zp = head.forward(y)
        T.backward(T.cross_entropy(logits, labels))
        grads = {}
        for name in HEAD_PARAM_NAMES:
            p = head.params[name]
            grads[name] = p.grad.copy() if p.grad is not None else np.zeros(p.shape)
            p.grad = None
        assert all(p.grad is None for p in fe.params.values())
    finally:
        fe.set_trainable(True)
    return GradientUpdate(grads, len(images))


def clip_gradient(update: GradientUpdate, clip: float) -> GradientUpdate:
    """Scale the whole update down to global L2 norm `clip` if it exceeds it."""
    if clip <= 0:
        raise ValueError("clip threshold must be positive")
    norm = update.l2_norm()
    factor = clip / norm if norm > clip else 1.0
    return GradientUpdate({k: g * factor for k, g in update.grads.items()},
                          update.batch_size)


def gaussian_sigma(epsilon: float, delta: float, clip: float) -> float:
    """Standard Gaussian-mechanism calibration S_f * sqrt(2 ln(1.25/delta)) / eps."""
    return clip * np.sqrt(2.0 * np.log(1.25 / delta)) / epsilon


def apply_dp(update: GradientUpdate, cfg: DpConfig) -> GradientUpdate:
    """Single-shot local DP: clip to S_f, then add i.i.d. Gaussian noise."""
    clipped = clip_gradient(update, cfg.clip)
    sigma = gaussian_sigma(cfg.epsilon, cfg.delta, cfg.clip)
    rng = np.random.default_rng(cfg.seed)
    noisy = {k: g + rng.normal(0.0, sigma, g.shape) for k, g in clipped.grads.items()}
    return GradientUpdate(noisy, update.batch_size)


def median_clean_norm(fe: FeatureExtractor, head: SpabHead, private: Dataset,
                      batch_size: int, rng: np.random.Generator,
                      samples: int = 11) -> float:
    """Median L2 norm of noiseless updates over freshly sampled batches; the
    usual way to calibrate the clipping threshold S_f."""
    norms = []
    for _ in range(samples):
        images, labels = sample_batch(private, batch_size, rng)
        norms.append(client_update(fe, head, images, labels).l2_norm())
    return float(np.median(norms))


def run_round(fe: FeatureExtractor, head: SpabHead, private: Dataset,
              batch_size: int, rng: np.random.Generator,
              dp: DpConfig | None = None
              ) -> tuple[GradientUpdate, np.ndarray, np.ndarray]:
    """One client-server interaction. Returns the uploaded update plus the
    sampled batch (ground truth, for evaluation only)."""
    images, labels = sample_batch(private, batch_size, rng)
    update = client_update(fe, head, images, labels)
    if dp is not None:
        update = apply_dp(update, dp)
    return update, images, labels


def aggregate(updates: list[GradientUpdate],
              weights: list[float] | None = None) -> GradientUpdate:
    """Weighted mean of client updates (plumbing; experiments use one client)."""
    if not updates:
        raise ValueError("no updates")
    if weights is None:
        weights = [u.batch_size for u in updates]
    total = float(sum(weights))
    grads = {}
    for name in updates[0].grads:
        grads[name] = sum(w * u.grads[name] for w, u in zip(weights, updates)) / total
    return GradientUpdate(grads, sum(u.batch_size for u in updates))
