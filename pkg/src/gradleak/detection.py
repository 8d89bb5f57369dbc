"""The active client's defense: per-weight-vector normalized-entropy scans,
structural checksums, and constructors for the handcrafted parameter patterns
the scan is meant to catch."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .models import FeatureExtractor, SpabHead, LinearHead

DEFAULT_BIN_WIDTH = 1e-6
DEFAULT_THRESHOLD = 0.5


class DetectionError(ValueError):
    pass


@dataclass
class WeightVectorReport:
    layer: str
    index: int  # output channel for conv, 0 for linear
    size: int
    entropy: float
    flagged: bool


@dataclass
class ScanResult:
    reports: list[WeightVectorReport]
    anomalous: bool
    min_entropy: float
    p3_entropy: float  # 3rd percentile


def normalized_entropy(w: np.ndarray, bin_width: float = DEFAULT_BIN_WIDTH) -> float:
    """Shannon entropy of floor-binned weights over log(size).

    Bin boundaries sit at integer multiples of bin_width, negatives included.
    Vectors of size < 2 are defined as entropy 1.0 (non-anomalous singleton).
    """
    if bin_width <= 0:
        raise DetectionError("bin_width must be positive")
    w = np.asarray(w).ravel()
    if w.size < 2:
        return 1.0
    bins = np.floor(w / bin_width).astype(np.int64)
    _, counts = np.unique(bins, return_counts=True)
    p = counts / w.size
    return float(-(p * np.log(p)).sum() / np.log(w.size))


def _weight_vectors(model) -> list[tuple[str, int, np.ndarray]]:
    """One vector per conv output channel, one per linear layer."""
    out: list[tuple[str, int, np.ndarray]] = []
    if isinstance(model, FeatureExtractor):
        for name, p in model.params.items():
            if not name.endswith(".w"):
                continue
            layer = name[:-2]
            if p.data.ndim == 4:
                for o in range(p.data.shape[0]):
                    out.append((layer, o, p.data[o].ravel()))
            else:
                out.append((layer, 0, p.data.ravel()))
    elif isinstance(model, SpabHead):
        out.append(("spab.w", 0, model.params["w"].data.ravel()))
        out.append(("spab.w2", 0, model.params["w2"].data.ravel()))
    elif isinstance(model, LinearHead):
        out.append(("head.w", 0, model.params["w"].data.ravel()))
    elif isinstance(model, (list, tuple)):
        for part in model:
            out.extend(_weight_vectors(part))
    elif isinstance(model, dict):
        # raw checkpoint tensors: conv weights are rank 4, linear rank 2
        for name, arr in model.items():
            if not name.endswith(".w") and name not in ("w", "w2"):
                continue
            arr = np.asarray(arr)
            layer = name[:-2] if name.endswith(".w") else name
            if arr.ndim == 4:
                for o in range(arr.shape[0]):
                    out.append((layer, o, arr[o].ravel()))
            else:
                out.append((layer, 0, arr.ravel()))
    else:
        raise DetectionError(f"cannot scan {type(model).__name__}")
    return out


def scan_model(model, bin_width: float = DEFAULT_BIN_WIDTH,
               threshold: float = DEFAULT_THRESHOLD) -> ScanResult:
    reports = []
    for layer, idx, vec in _weight_vectors(model):
        h = normalized_entropy(vec, bin_width)
        reports.append(WeightVectorReport(layer, idx, vec.size, h, h < threshold))
    if not reports:
        raise DetectionError("model has no weight vectors")
    entropies = np.array([r.entropy for r in reports])
    return ScanResult(
        reports=reports,
        anomalous=any(r.flagged for r in reports),
        min_entropy=float(entropies.min()),
        p3_entropy=float(np.percentile(entropies, 3)),
    )


# ---------------------------------------------------------------------------
# privacy-leaking primitive fixtures


def make_identity_kernel(in_ch: int, k: int) -> np.ndarray:
    """(in_ch, in_ch, k, k) conv weight mapping channel i to channel i."""
    if k % 2 == 0:
        raise DetectionError("identity kernel needs odd k")
    w = np.zeros((in_ch, in_ch, k, k))
    for i in range(in_ch):
        w[i, i, k // 2, k // 2] = 1.0
    return w


def make_zero_kernel(out_ch: int, in_ch: int, k: int) -> np.ndarray:
    return np.zeros((out_ch, in_ch, k, k))


def make_rtf_module(ir_dim: int, width: int, n_classes: int = 2,
                    rng: np.random.Generator | None = None) -> SpabHead:
    """Two-layer head with the handcrafted invertible pattern: the first
    layer's weight rows are all identical (an averaging filter), the second
    layer's columns are identical constants. Biases form the bin ladder."""
    rng = rng or np.random.default_rng(0)
    head = SpabHead(ir_dim, width, n_classes, rng=rng)
    head.params["w"].data[:] = 1.0 / ir_dim
    head.params["b"].data[:] = -np.sort(rng.uniform(0.0, 1.0, width))
    head.params["w2"].data[:] = 1.0
    head.params["b2"].data[:] = 0.0
    return head


def plant_identity_kernels(fe: FeatureExtractor) -> FeatureExtractor:
    """Overwrite the first in_ch output channels of every conv layer with
    identity-mapping kernels; returns the same extractor."""
    for i, layer in enumerate(fe.spec.layers):
        if layer[0] != "conv":
            continue
        _, cin, cout, k, _pad = layer
        n = min(cin, cout)
        ident = make_identity_kernel(cin, k)
        fe.params[f"conv{i}.w"].data[:n] = ident[:n]
    return fe


def structural_checksum(descriptor: str) -> int:
    """Order-sensitive 64-bit digest of an architecture descriptor."""
    digest = hashlib.sha256(descriptor.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
