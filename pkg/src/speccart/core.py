"""Domain types and tensor/mask algebra shared by every other module.

A radio map is an I x J x K tensor of linear-scale power values: K spectral
bins observed on an I x J spatial grid.  Sensors report whole "fibers"
X(i, j, :).  Everything downstream (factorization, completion, evaluation)
works through the flat-index convention

    q = I * i + j          (0-based; 1-based form: q = I*(i-1) + j)

which is fixed here and nowhere else.  The stride is I, not J, so the map
(i, j) -> q is a bijection onto [0, IJ) only for grids where that holds
(square grids always qualify); constructors validate this instead of
silently transposing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GridSpec",
    "RadioMapTensor",
    "Slf",
    "Psd",
    "SensingMask",
    "FiberObservations",
    "FactorModel",
    "assemble",
    "unfold",
    "fold",
    "extract_G",
    "scatter_rows",
]


def _as_float_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_nonnegative(arr: np.ndarray, name: str) -> None:
    if arr.size and arr.min() < 0.0:
        raise ValueError(f"{name} must be nonnegative (min={arr.min():.3e})")


@dataclass(frozen=True)
class GridSpec:
    """Spatial grid of `rows x cols` cells with `bins` spectral bins."""

    rows: int
    cols: int
    bins: int

    def __post_init__(self):
        for name in ("rows", "cols", "bins"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def flat_index(self, i: int, j: int) -> int:
        """Flat column index of cell (i, j), both 0-based."""
        if not (0 <= i < self.rows and 0 <= j < self.cols):
            raise ValueError(f"cell ({i}, {j}) outside {self.rows}x{self.cols} grid")
        return self.rows * i + j

    def cell_of(self, q: int) -> tuple[int, int]:
        """Inverse of :meth:`flat_index`; only defined on bijective grids."""
        self.require_flat_bijection()
        if self.rows == 1:
            return 0, int(q)
        i, j = divmod(int(q), self.rows)
        return i, j

    def flat_bijective(self) -> bool:
        """True when (i, j) -> rows*i + j is a bijection onto [0, rows*cols)."""
        # Square grids always work; a single row degenerates to q = j.
        return self.rows == self.cols or self.rows == 1

    def require_flat_bijection(self) -> None:
        if not self.flat_bijective():
            raise ValueError(
                f"flat-index convention q = rows*i + j is not a bijection on a "
                f"{self.rows}x{self.cols} grid; use a square grid"
            )


@dataclass(frozen=True)
class RadioMapTensor:
    """Dense nonnegative I x J x K power field."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.values, "tensor values")
        expected = (self.grid.rows, self.grid.cols, self.grid.bins)
        if arr.shape != expected:
            raise ValueError(f"tensor shape {arr.shape} does not match grid {expected}")
        _check_nonnegative(arr, "tensor values")
        object.__setattr__(self, "values", arr)

    def fiber(self, i: int, j: int) -> np.ndarray:
        return self.values[i, j, :].copy()


@dataclass(frozen=True)
class Slf:
    """Spatial loss function: one emitter's I x J power-gain pattern."""

    rows: int
    cols: int
    values: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.values, "SLF values")
        if arr.shape != (self.rows, self.cols):
            raise ValueError(f"SLF shape {arr.shape} != ({self.rows}, {self.cols})")
        _check_nonnegative(arr, "SLF values")
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_array(cls, values) -> "Slf":
        arr = np.asarray(values, dtype=np.float64)
        return cls(arr.shape[0], arr.shape[1], arr)


@dataclass(frozen=True)
class Psd:
    """Power spectral density: one emitter's length-K spectral profile."""

    values: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.values, "PSD values")
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("PSD must be a nonempty 1-D vector")
        _check_nonnegative(arr, "PSD values")
        object.__setattr__(self, "values", arr)

    @property
    def bins(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class SensingMask:
    """The sensed cell set and its derived flat-index (column) set.

    Cell order is canonical: sorted ascending by flat index, so the column
    order of every derived matrix is reproducible regardless of how the
    cells were supplied.
    """

    grid: GridSpec
    cells: tuple = field(default=())

    def __post_init__(self):
        cells = tuple((int(i), int(j)) for i, j in self.cells)
        if not 1 <= len(cells) <= self.grid.n_cells:
            raise ValueError(
                f"mask needs between 1 and {self.grid.n_cells} cells, got {len(cells)}"
            )
        if len(set(cells)) != len(cells):
            raise ValueError("mask contains duplicate cells")
        qs = [self.grid.flat_index(i, j) for i, j in cells]
        if max(qs) >= self.grid.n_cells:
            raise ValueError(
                "flat index exceeds grid size; the stride-I convention is not "
                f"usable on a {self.grid.rows}x{self.grid.cols} grid"
            )
        if len(set(qs)) != len(qs):
            raise ValueError(
                "flat-index collision; the stride-I convention is not usable "
                f"on a {self.grid.rows}x{self.grid.cols} grid"
            )
        order = np.argsort(qs)
        object.__setattr__(self, "cells", tuple(cells[k] for k in order))

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def cols(self) -> np.ndarray:
        """Flat column indices in canonical (ascending) order."""
        return np.array([self.grid.flat_index(i, j) for i, j in self.cells])

    def bool_map(self) -> np.ndarray:
        """Boolean I x J indicator of sensed cells."""
        m = np.zeros((self.grid.rows, self.grid.cols), dtype=bool)
        for i, j in self.cells:
            m[i, j] = True
        return m

    @classmethod
    def from_bool_map(cls, grid: GridSpec, m) -> "SensingMask":
        m = np.asarray(m, dtype=bool)
        if m.shape != (grid.rows, grid.cols):
            raise ValueError(f"mask map shape {m.shape} != grid {grid.rows}x{grid.cols}")
        ii, jj = np.nonzero(m)
        return cls(grid, tuple(zip(ii.tolist(), jj.tolist())))


@dataclass(frozen=True)
class FiberObservations:
    """Sensed tensor fibers: one length-K vector per mask cell.

    `fibers[m]` belongs to `mask.cells[m]` (canonical order).
    """

    mask: SensingMask
    fibers: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.fibers, "fibers")
        expected = (len(self.mask), self.mask.grid.bins)
        if arr.shape != expected:
            raise ValueError(f"fibers shape {arr.shape} != {expected}")
        object.__setattr__(self, "fibers", arr)

    @property
    def grid(self) -> GridSpec:
        return self.mask.grid

    @classmethod
    def from_tensor(cls, tensor: RadioMapTensor, mask: SensingMask) -> "FiberObservations":
        rows = np.stack([tensor.values[i, j, :] for i, j in mask.cells])
        return cls(mask, rows)


@dataclass(frozen=True)
class FactorModel:
    """Nonnegative factor pair: PSD columns C (K x R) and SLF rows S (R x IJ)."""

    C: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        C = _as_float_array(self.C, "C")
        S = _as_float_array(self.S, "S")
        if C.ndim != 2 or S.ndim != 2:
            raise ValueError("C and S must be matrices")
        if C.shape[1] != S.shape[0]:
            raise ValueError(f"rank mismatch: C has {C.shape[1]} columns, S has {S.shape[0]} rows")
        _check_nonnegative(C, "C")
        _check_nonnegative(S, "S")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "S", S)

    @property
    def rank(self) -> int:
        return self.C.shape[1]


def assemble(slfs: Sequence[Slf], psds: Sequence[Psd]) -> RadioMapTensor:
    """Superpose per-emitter outer products S_r o c_r into the full tensor."""
    if len(slfs) == 0 or len(slfs) != len(psds):
        raise ValueError(f"need equal nonzero counts of SLFs and PSDs, got {len(slfs)}/{len(psds)}")
    rows, cols = slfs[0].rows, slfs[0].cols
    bins = psds[0].bins
    for r, (s, c) in enumerate(zip(slfs, psds)):
        if (s.rows, s.cols) != (rows, cols):
            raise ValueError(f"SLF {r} has shape {(s.rows, s.cols)}, expected {(rows, cols)}")
        if c.bins != bins:
            raise ValueError(f"PSD {r} has {c.bins} bins, expected {bins}")
    S = np.stack([s.values for s in slfs])          # (R, I, J)
    C = np.stack([c.values for c in psds])          # (R, K)
    values = np.einsum("rij,rk->ijk", S, C)
    return RadioMapTensor(GridSpec(rows, cols, bins), values)


def unfold(tensor: RadioMapTensor) -> np.ndarray:
    """Unfold to a K x IJ matrix; column q holds the fiber at cell q."""
    g = tensor.grid
    g.require_flat_bijection()
    out = np.empty((g.bins, g.n_cells))
    for i in range(g.rows):
        for j in range(g.cols):
            out[:, g.flat_index(i, j)] = tensor.values[i, j, :]
    return out


def fold(matrix: np.ndarray, grid: GridSpec) -> RadioMapTensor:
    """Inverse of :func:`unfold`."""
    grid.require_flat_bijection()
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (grid.bins, grid.n_cells):
        raise ValueError(f"matrix shape {matrix.shape} != ({grid.bins}, {grid.n_cells})")
    values = np.empty((grid.rows, grid.cols, grid.bins))
    for i in range(grid.rows):
        for j in range(grid.cols):
            values[i, j, :] = matrix[:, grid.flat_index(i, j)]
    return RadioMapTensor(grid, values)


def extract_G(obs: FiberObservations) -> np.ndarray:
    """Stack the observed fibers into a K x |mask| matrix, mask order."""
    return obs.fibers.T.copy()


def scatter_rows(H: np.ndarray, mask: SensingMask) -> list[Slf]:
    """Spread the rows of H (R x |mask|) onto the grid; unsensed cells get 0."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != len(mask):
        raise ValueError(f"H must be R x {len(mask)}, got {H.shape}")
    g = mask.grid
    out = []
    for r in range(H.shape[0]):
        vals = np.zeros((g.rows, g.cols))
        for m, (i, j) in enumerate(mask.cells):
            vals[i, j] = H[r, m]
        out.append(Slf(g.rows, g.cols, vals))
    return out
