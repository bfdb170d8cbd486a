"""Thin-plate-spline interpolation baseline, one frequency slab at a time.

Every slab shares the same sensed cells, so the spline system (radial
kernel r^2 log r plus an affine polynomial part) is factorized once and
reused for all K right-hand sides.  Negative interpolants are clamped to
zero, since radio maps are powers.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .core import FiberObservations, GridSpec, RadioMapTensor

__all__ = ["TpsGeometryError", "tps_interpolate"]


class TpsGeometryError(RuntimeError):
    """Observation geometry cannot support a thin-plate fit."""

    def __init__(self, message: str, slab: int):
        super().__init__(message)
        self.slab = slab


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    """phi(r) = r^2 log r, written on squared distances; phi(0) = 0."""
    out = np.zeros_like(r2)
    pos = r2 > 0
    out[pos] = 0.5 * r2[pos] * np.log(r2[pos])
    return out


def default_smoothing(points: np.ndarray) -> float:
    """1e-3 times the squared mean nearest-neighbor spacing."""
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    nn = np.sqrt(d2.min(axis=1))
    return 1e-3 * float(nn.mean()) ** 2


def tps_interpolate(obs: FiberObservations, smoothing: float = None) -> RadioMapTensor:
    """Fit and evaluate a smoothing thin-plate spline per frequency slab.

    `smoothing` = 0 gives exact interpolation at the sensed cells; the
    default couples the regularization to the sensor spacing.  Needs at
    least 3 non-collinear cells.
    """
    grid = obs.grid
    n = len(obs.mask)
    if n < 3:
        raise TpsGeometryError(f"need at least 3 sensed cells, got {n}", slab=0)
    pts = np.array(obs.mask.cells, dtype=np.float64)
    lam = default_smoothing(pts) if smoothing is None else float(smoothing)

    K = _tps_kernel(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    P = np.column_stack([np.ones(n), pts])
    system = np.zeros((n + 3, n + 3))
    system[:n, :n] = K + lam * np.eye(n)
    system[:n, n:] = P
    system[n:, :n] = P.T
    try:
        factor = lu_factor(system)
        # A singular factorization surfaces as non-finite pivots.
        if not np.all(np.isfinite(factor[0])):
            raise np.linalg.LinAlgError("singular system")
    except (np.linalg.LinAlgError, ValueError) as err:
        raise TpsGeometryError(
            f"degenerate sensor geometry (collinear cells?) while fitting slab 0: {err}",
            slab=0,
        ) from err

    ii, jj = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
    eval_pts = np.column_stack([ii.ravel(), jj.ravel()]).astype(np.float64)
    E = _tps_kernel(((eval_pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    Epoly = np.column_stack([np.ones(eval_pts.shape[0]), eval_pts])

    values = np.empty((grid.rows, grid.cols, grid.bins))
    for k in range(grid.bins):
        rhs = np.concatenate([obs.fibers[:, k], np.zeros(3)])
        sol = lu_solve(factor, rhs)
        if not np.all(np.isfinite(sol)):
            raise TpsGeometryError(
                f"degenerate sensor geometry while solving slab {k}", slab=k
            )
        w, a = sol[:n], sol[n:]
        slab = E @ w + Epoly @ a
        values[:, :, k] = np.maximum(slab, 0.0).reshape(grid.rows, grid.cols)
    return RadioMapTensor(grid, values)
