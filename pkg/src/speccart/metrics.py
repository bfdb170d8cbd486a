"""Evaluation suite: reconstruction error, factor accuracy, misdetection.

Factor errors are invariant to the permutation/scaling ambiguity of the
factorization: columns are l1-normalized and matched by optimal assignment
before the l1 distances are averaged.  When both PSD and SLF estimates are
scored, one shared assignment (summed cost) aligns both so the two numbers
refer to the same pairing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import RadioMapTensor
from .factor import pairwise_l1_cost

__all__ = [
    "sre",
    "nae",
    "aligned_factor_errors",
    "misdetection",
    "snr_realized",
    "MetricsRow",
    "write_metrics_csv",
    "read_metrics_csv",
]

METRICS_SCHEMA = "speccart-metrics-v1"


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, RadioMapTensor) else np.asarray(x, dtype=np.float64)


def sre(estimate, truth) -> float:
    """Squared reconstruction error ||Xhat - X||_F^2 / ||X||_F^2."""
    est = _values(estimate)
    tru = _values(truth)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    denom = float((tru**2).sum())
    if denom == 0.0:
        raise ValueError("ground truth is identically zero")
    return float(((est - tru) ** 2).sum()) / denom


def _check_columns(F: np.ndarray, name: str) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2:
        raise ValueError(f"{name} must be a matrix of columns")
    norms = np.abs(F).sum(axis=0)
    for r, v in enumerate(norms):
        if v == 0.0:
            raise ValueError(f"{name} column {r} has zero l1 norm")
    return F


def nae(F_hat, F_true) -> float:
    """Mean l1 distance of l1-normalized columns after optimal matching.

    Ranges over [0, 2]; invariant to positive column scaling and to column
    permutation.
    """
    A = _check_columns(F_hat, "F_hat")
    B = _check_columns(F_true, "F_true")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"column count mismatch {A.shape[1]} vs {B.shape[1]}")
    cost = pairwise_l1_cost(A, B)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def aligned_factor_errors(C_hat, S_hat, C_true, S_true) -> tuple[float, float, np.ndarray]:
    """PSD and SLF errors under one shared assignment.

    SLF rows are scored transposed (as columns), exactly symmetrically to
    the PSD columns.  Returns (nae_c, nae_s, perm) with perm[s] the
    estimated component matched to true component s.
    """
    C_hat = _check_columns(C_hat, "C_hat")
    C_true = _check_columns(C_true, "C_true")
    S_hat = _check_columns(np.asarray(S_hat, dtype=np.float64).T, "S_hat")
    S_true = _check_columns(np.asarray(S_true, dtype=np.float64).T, "S_true")
    cost_c = pairwise_l1_cost(C_hat, C_true)
    cost_s = pairwise_l1_cost(S_hat, S_true)
    rows, cols = linear_sum_assignment(cost_c + cost_s)
    perm = np.empty(C_true.shape[1], dtype=int)
    perm[cols] = rows
    nae_c = float(cost_c[rows, cols].mean())
    nae_s = float(cost_s[rows, cols].mean())
    return nae_c, nae_s, perm


def misdetection(
    estimate,
    truth,
    locations: Sequence[tuple],
    psds: Sequence[np.ndarray],
    threshold: float = 0.25,
    occupancy_frac: float = 0.01,
) -> float:
    """Fraction of (emitter, occupied-bin) pairs reconstructed below
    `threshold` times the true power at the emitter's cell.

    A bin counts as occupied by an emitter when its PSD there exceeds
    `occupancy_frac` of that PSD's peak, so silent bins are not scored.
    """
    est = _values(estimate)
    tru = _values(truth)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    if len(locations) != len(psds):
        raise ValueError("one location per PSD required")
    total = 0
    missed = 0
    for loc, c in zip(locations, psds):
        c = np.asarray(c, dtype=np.float64)
        i = int(round(loc[0]))
        j = int(round(loc[1]))
        i = min(max(i, 0), tru.shape[0] - 1)
        j = min(max(j, 0), tru.shape[1] - 1)
        occupied = np.nonzero(c > occupancy_frac * c.max())[0]
        for k in occupied:
            total += 1
            if est[i, j, k] < threshold * tru[i, j, k]:
                missed += 1
    return missed / total if total else 0.0


def snr_realized(truth, noise) -> float:
    """10 log10(||X||_F^2 / ||N||_F^2); +inf for zero noise."""
    x = _values(truth)
    n = _values(noise)
    pn = float((n**2).sum())
    if pn == 0.0:
        return float("inf")
    return float(10.0 * np.log10((x**2).sum() / pn))


@dataclass
class MetricsRow:
    """One evaluation record; the CSV schema of the experiment drivers."""

    method: str
    seed: int
    rho: float
    eta: float
    dcorr: float
    rank: int
    snr_db: Optional[float]
    sre: Optional[float]
    nae_c: Optional[float]
    nae_s: Optional[float]
    misdetection: Optional[float]
    runtime_s: Optional[float]
    error: str = ""
    schema: str = METRICS_SCHEMA


def write_metrics_csv(path, rows: Sequence[MetricsRow], append: bool = False) -> None:
    names = [f.name for f in fields(MetricsRow)]
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if not append or fh.tell() == 0:
            writer.writerow(names)
        for row in rows:
            writer.writerow([getattr(row, n) for n in names])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
