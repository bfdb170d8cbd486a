"""Separable NMF via successive projection, NNLS, and column alignment.

`spa` performs greedy vertex selection on l1-normalized data columns with
orthogonal-complement deflation; under separability (some columns of the
right factor are scaled unit vectors) it identifies the left factor exactly
from noiseless data.  `nnls` is a Lawson-Hanson active-set solver applied
row-wise to a matrix least-squares problem under elementwise nonnegativity.
`align_columns` removes the permutation/scaling ambiguity inherent to any
NMF by optimal assignment on l1-normalized columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "SpaResult",
    "SpaRankError",
    "NnlsError",
    "spa",
    "nnls",
    "nnls_vector",
    "kkt_residual",
    "align_columns",
]


class SpaRankError(RuntimeError):
    """Selected columns became rank deficient during deflation."""

    def __init__(self, iteration: int, message: str):
        super().__init__(message)
        self.iteration = iteration


class NnlsError(RuntimeError):
    """Active-set iteration cap hit; carries the best iterate found."""

    def __init__(self, message: str, best: np.ndarray, residual: float):
        super().__init__(message)
        self.best = best
        self.residual = residual


@dataclass(frozen=True)
class SpaResult:
    """Output of :func:`spa`.

    `A` holds the l1-normalized data columns at `indices`; `B` solves the
    least-squares fit of the normalized data on those columns, so that
    ``A @ (B * col_norms)`` reproduces the original matrix.  `col_norms`
    are the l1 norms used for normalization (zero for dropped columns).
    """

    indices: tuple
    A: np.ndarray
    B: np.ndarray
    col_norms: np.ndarray

    @property
    def B_scaled(self) -> np.ndarray:
        """Coefficients in original (unnormalized) column units."""
        return self.B * self.col_norms[None, :]

    def reconstruct(self) -> np.ndarray:
        return self.A @ self.B_scaled


def spa(F: np.ndarray, R: int, *, nonneg_coefficients: bool = False) -> SpaResult:
    """Successive projection on the columns of a nonnegative M x N matrix.

    Columns are l1-normalized first; indices are then chosen by repeated
    argmax of the projected l2 norm, deflating with the orthogonal
    complement of the already-selected columns.  Ties break toward the
    lowest column index.  All-zero columns are dropped up front and their
    coefficients set to zero.  With ``nonneg_coefficients`` the final
    coefficient fit is solved under a nonnegativity constraint instead of
    plain least squares.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2:
        raise ValueError("F must be a matrix")
    M, N = F.shape
    if not 1 <= R <= min(M, N):
        raise ValueError(f"R must be in [1, min(M, N)] = [1, {min(M, N)}], got {R}")
    if F.size and F.min() < 0.0:
        raise ValueError("F must be nonnegative")

    col_norms = F.sum(axis=0)  # l1 norms of nonnegative columns
    keep = np.nonzero(col_norms > 0.0)[0]
    if keep.size < R:
        raise ValueError(f"only {keep.size} nonzero columns available, need R={R}")
    Fn = F[:, keep] / col_norms[keep][None, :]

    # Greedy selection with QR-based projection onto the complement of the
    # selected columns (numerically safer than the explicit inverse).
    selected_local: list[int] = []
    Q = np.zeros((M, R))
    for r in range(R):
        if r == 0:
            scores = np.linalg.norm(Fn, axis=0)
        else:
            proj = Q[:, :r].T @ Fn
            scores = np.sqrt(np.maximum(np.einsum("ij,ij->j", Fn, Fn) - np.einsum("ij,ij->j", proj, proj), 0.0))
        scores[selected_local] = -np.inf
        pick = int(np.argmax(scores))  # argmax returns the lowest index on ties
        selected_local.append(pick)
        # Extend the orthonormal basis of the selected columns.
        v = Fn[:, pick] - Q[:, :r] @ (Q[:, :r].T @ Fn[:, pick])
        nv = np.linalg.norm(v)
        if nv <= 1e-12 * max(1.0, np.linalg.norm(Fn[:, pick])):
            raise SpaRankError(
                r + 1,
                f"selected columns became rank deficient at iteration {r + 1}",
            )
        Q[:, r] = v / nv

    A = Fn[:, selected_local]
    if nonneg_coefficients:
        B_kept = nnls(Fn.T, A.T).T  # rows of Fn.T fitted on A columns
    else:
        B_kept, *_ = np.linalg.lstsq(A, Fn, rcond=None)
    B = np.zeros((R, N))
    B[:, keep] = B_kept
    indices = tuple(int(keep[k]) for k in selected_local)
    return SpaResult(indices=indices, A=A, B=B, col_norms=col_norms)


def nnls_vector(A: np.ndarray, b: np.ndarray, max_iter: int | None = None) -> np.ndarray:
    """Lawson-Hanson active-set solve of min ||A x - b|| s.t. x >= 0."""
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, n = A.shape
    if max_iter is None:
        max_iter = 3 * n

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = A.T @ (b - A @ x)
    tol = 1e-12 * max(1.0, np.abs(A).sum(axis=0).max()) * max(1.0, np.linalg.norm(b, np.inf))

    steps = 0
    while True:
        active = ~passive
        if not active.any() or (w[active] <= tol).all():
            return x
        candidates = np.where(active)[0]
        passive[candidates[np.argmax(w[candidates])]] = True

        while True:
            steps += 1
            if steps > max_iter:
                residual = float(np.linalg.norm(A @ x - b))
                raise NnlsError(
                    f"active-set iteration cap {max_iter} exceeded", x.copy(), residual
                )
            z = np.zeros(n)
            z[passive], *_ = np.linalg.lstsq(A[:, passive], b, rcond=None)
            if z[passive].min() > 0.0:
                x = z
                break
            # Step toward z until the first passive coordinate hits zero.
            mask = passive & (z <= 0.0)
            alpha = np.min(x[mask] / (x[mask] - z[mask]))
            x = x + alpha * (z - x)
            passive &= x > tol
            x[~passive] = 0.0
        w = A.T @ (b - A @ x)


def nnls(G: np.ndarray, H: np.ndarray, max_iter: int | None = None) -> np.ndarray:
    """Solve min ||G - C H||_F^2 over C >= 0, row by row of G.

    H must have full row rank (checked against a spectral tolerance); each
    row of C solves an independent Lawson-Hanson problem with matrix H^T.
    """
    G = np.asarray(G, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if G.ndim != 2 or H.ndim != 2 or G.shape[1] != H.shape[1]:
        raise ValueError(f"incompatible shapes G {G.shape}, H {H.shape}")
    R = H.shape[0]
    sv = np.linalg.svd(H, compute_uv=False)
    if sv.size < R or sv[R - 1] <= max(H.shape) * np.finfo(np.float64).eps * sv[0]:
        raise ValueError("H is rank deficient; cannot solve the NNLS subproblem")
    A = H.T
    C = np.empty((G.shape[0], R))
    for k in range(G.shape[0]):
        C[k] = nnls_vector(A, G[k], max_iter=max_iter)
    return C


def kkt_residual(G: np.ndarray, H: np.ndarray, C: np.ndarray) -> float:
    """Max KKT violation of C for min ||G - C H||_F^2 s.t. C >= 0.

    The gradient is 2 (C H - G) H^T; optimality requires it to vanish on
    positive entries and to be nonnegative on zero entries.
    """
    grad = 2.0 * (C @ H - G) @ H.T
    free = C > 0.0
    res_free = np.abs(grad[free]).max() if free.any() else 0.0
    res_active = np.maximum(-grad[~free], 0.0).max() if (~free).any() else 0.0
    return float(max(res_free, res_active))


def align_columns(C_hat: np.ndarray, C_true: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best permutation and per-column scales matching C_hat to C_true.

    Returns ``(perm, scales)`` such that column ``perm[s]`` of C_hat
    corresponds to column ``s`` of C_true, with ``scales[s]`` the ratio of
    their l1 norms.  The assignment minimizes the total l1 distance between
    l1-normalized columns.
    """
    C_hat = np.asarray(C_hat, dtype=np.float64)
    C_true = np.asarray(C_true, dtype=np.float64)
    if C_hat.shape != C_true.shape:
        raise ValueError(f"shape mismatch {C_hat.shape} vs {C_true.shape}")
    cost = pairwise_l1_cost(C_hat, C_true)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(C_true.shape[1], dtype=int)
    perm[cols] = rows  # estimated column matched to each true column
    n_hat = np.abs(C_hat).sum(axis=0)
    n_true = np.abs(C_true).sum(axis=0)
    scales = n_hat[perm] / np.where(n_true > 0, n_true, 1.0)
    return perm, scales


def pairwise_l1_cost(C_hat: np.ndarray, C_true: np.ndarray) -> np.ndarray:
    """cost[r, s] = l1 distance between normalized C_hat[:, r] and C_true[:, s]."""
    def normalize(C):
        n = np.abs(C).sum(axis=0)
        return C / np.where(n > 0, n, 1.0)

    A = normalize(np.asarray(C_hat, dtype=np.float64))
    B = normalize(np.asarray(C_true, dtype=np.float64))
    return np.abs(A[:, :, None] - B[:, None, :]).sum(axis=0)
