"""Server-side analytic recovery of representations from the two-layer head's
gradient, candidate deduplication, and the ground-truth leakage-rate oracle.

The extraction identity: if the first layer computes Z = Yw + b and the
gradient dZ has a single nonzero entry in column q (row p), then

    Y(p,:) = dw(:,q) / db(q)

exactly, since dw(:,q) = sum_k Y(k,:) dZ(k,q) collapses to one term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_TOL = 1e-9
DEFAULT_COS_THRESHOLD = 0.999


@dataclass
class IrCandidate:
    vector: np.ndarray
    source_column: int
    bias_gradient: float  # |db(q)| at the source column
    duplicate_group: int = -1


def extract_candidate_irs(grad_w: np.ndarray, grad_b: np.ndarray,
                          tol: float = DEFAULT_TOL) -> list[IrCandidate]:
    """Emit dw(:,q)/db(q) for every column q with |db(q)| > tol.

    No purity filtering: columns mixing several rows produce blended vectors
    and are left for downstream matching to sort out.
    """
    grad_w = np.asarray(grad_w)
    grad_b = np.asarray(grad_b)
    if grad_w.ndim != 2 or grad_b.shape != (grad_w.shape[1],):
        raise ValueError(f"bad gradient shapes {grad_w.shape}, {grad_b.shape}")
    out = []
    for q in np.flatnonzero(np.abs(grad_b) > tol):
        out.append(IrCandidate(
            vector=grad_w[:, q] / grad_b[q],
            source_column=int(q),
            bias_gradient=float(abs(grad_b[q])),
        ))
    return out


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(a @ b / (na * nb))


def dedupe_candidates(candidates: list[IrCandidate],
                      cos_threshold: float = DEFAULT_COS_THRESHOLD) -> list[IrCandidate]:
    """Greedy cosine clustering; one mean-vector representative per group,
    sorted by descending bias-gradient magnitude."""
    if not 0.0 < cos_threshold < 1.0:
        raise ValueError("cos_threshold must be in (0,1)")
    ordered = sorted(candidates, key=lambda c: -c.bias_gradient)
    groups: list[list[IrCandidate]] = []
    for cand in ordered:
        for gid, group in enumerate(groups):
            if _cosine(cand.vector, group[0].vector) >= cos_threshold:
                cand.duplicate_group = gid
                group.append(cand)
                break
        else:
            cand.duplicate_group = len(groups)
            groups.append([cand])
    reps = []
    for gid, group in enumerate(groups):
        lead = group[0]
        reps.append(IrCandidate(
            vector=np.mean([c.vector for c in group], axis=0),
            source_column=lead.source_column,
            bias_gradient=lead.bias_gradient,
            duplicate_group=gid,
        ))
    return reps


def masked_z_gradient(z: np.ndarray, grad_zp: np.ndarray) -> np.ndarray:
    """Reconstruct dZ from the gradient flowing into the ReLU output."""
    z, grad_zp = np.asarray(z), np.asarray(grad_zp)
    if z.shape != grad_zp.shape:
        raise ValueError("shape mismatch")
    return np.where(z > 0, grad_zp, 0.0)


def exclusive_columns(z: np.ndarray, grad_zp: np.ndarray,
                      tol: float = DEFAULT_TOL) -> list[tuple[int, int]]:
    """(row, column) pairs where the column of dZ has exactly one entry above
    tol in magnitude."""
    gz = masked_z_gradient(z, grad_zp)
    nz = np.abs(gz) > tol
    pairs = []
    for q in range(gz.shape[1]):
        rows = np.flatnonzero(nz[:, q])
        if rows.size == 1:
            pairs.append((int(rows[0]), q))
    return pairs


def leakage_rate_oracle(z: np.ndarray, zp: np.ndarray, grad_zp: np.ndarray,
                        tol: float = DEFAULT_TOL) -> float:
    """Fraction of batch rows owning at least one single-nonzero column of dZ.

    Evaluation-mode only: requires the true activations and upstream gradient.
    """
    del zp  # the ReLU mask is recomputed from z; zp kept for symmetry
    batch = z.shape[0]
    rows = {p for p, _q in exclusive_columns(z, grad_zp, tol)}
    return len(rows) / batch


def match_candidates(candidates: list[IrCandidate], true_irs: np.ndarray,
                     cos_distance: float = 1e-4) -> set[int]:
    """Evaluation helper: indices of true rows matched by some candidate
    within the given cosine distance."""
    matched = set()
    for cand in candidates:
        for i, row in enumerate(np.asarray(true_irs)):
            if 1.0 - _cosine(cand.vector, row) <= cos_distance:
                matched.add(i)
    return matched
