"""Scene and training-data generation: shadowed SLFs, sinc-mixture PSDs,
sensing masks, and additive noise.

An emitter's spatial loss function combines power-law path loss with
correlated log-normal shadowing,

    S(y) = max(||y - r||, d_min)^(-gamma) * 10^(v(y) / 10),

where v is a zero-mean Gaussian field with covariance
eta * exp(-||y - y'|| / d_corr).  PSDs are sums of randomly scaled squared
sinc lobes.  Cell centers sit at integer coordinates with 1 m spacing, so
distances, decorrelation lengths, and emitter positions share one unit.

All randomness flows through explicit seeds; corpus samples draw from
independent spawned substreams so generation order does not matter.
"""

from __future__ import annotations

import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .core import (
    FactorModel,
    FiberObservations,
    GridSpec,
    Psd,
    RadioMapTensor,
    SensingMask,
    Slf,
    assemble,
)

__all__ = [
    "ShadowParams",
    "PsdParams",
    "SceneConfig",
    "CorpusConfig",
    "Scene",
    "ShadowFieldError",
    "gen_shadow_field",
    "gen_slf",
    "gen_psd",
    "gen_scene",
    "gen_training_corpus",
    "sample_mask",
]

# Path-loss singularity guard: half a cell width.
DISTANCE_CLAMP = 0.5

# Escalating relative diagonal jitter tried when the covariance factorization fails.
_JITTERS = (0.0, 1e-8, 1e-6)


class ShadowFieldError(RuntimeError):
    """Covariance factorization failed even with diagonal jitter."""

    def __init__(self, message: str, jitters_tried: tuple):
        super().__init__(message)
        self.jitters_tried = jitters_tried


@dataclass(frozen=True)
class ShadowParams:
    """Per-emitter propagation parameters."""

    location: tuple  # (row, col) coordinates in meters; fractional allowed
    pathloss: float  # exponent gamma
    shadow_variance: float  # eta, dB^2
    decorrelation: float  # d_corr, meters

    def __post_init__(self):
        if self.pathloss <= 0:
            raise ValueError("pathloss exponent must be positive")
        if self.shadow_variance < 0:
            raise ValueError("shadow variance must be nonnegative")
        if self.decorrelation <= 0:
            raise ValueError("decorrelation distance must be positive")
        object.__setattr__(self, "location", (float(self.location[0]), float(self.location[1])))


@dataclass(frozen=True)
class PsdParams:
    """Sinc-mixture PSD description: subband centers, widths, amplitudes."""

    centers: np.ndarray  # bin indices, 1-based like the bin axis
    widths: np.ndarray
    amplitudes: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.centers, dtype=np.float64))
        w = np.atleast_1d(np.asarray(self.widths, dtype=np.float64))
        a = np.atleast_1d(np.asarray(self.amplitudes, dtype=np.float64))
        if not (c.size == w.size == a.size) or c.size < 1:
            raise ValueError("centers, widths, amplitudes must have equal length >= 1")
        if (w <= 0).any() or (a <= 0).any():
            raise ValueError("widths and amplitudes must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "widths", w)
        object.__setattr__(self, "amplitudes", a)

    @property
    def n_subbands(self) -> int:
        return self.centers.size


@dataclass(frozen=True)
class SceneConfig:
    """Everything needed to generate one synthetic scene deterministically."""

    grid: GridSpec
    n_emitters: int
    sample_fraction: float  # rho
    seed: int
    gamma_range: tuple = (2.0, 2.5)
    eta_range: tuple = (3.0, 8.0)
    dcorr_range: tuple = (30.0, 100.0)
    sparse_occupancy: bool = True
    psd_extra_bands: int = 16
    psd_width_range: tuple = (2.0, 4.0)
    psd_amplitude_range: tuple = (0.5, 2.5)
    snr_db: Optional[float] = None
    offgrid_margin: float = 0.0

    def __post_init__(self):
        if self.n_emitters < 1:
            raise ValueError("need at least one emitter")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample fraction must be in (0, 1]")
        for name in ("gamma_range", "eta_range", "dcorr_range", "psd_width_range", "psd_amplitude_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if self.offgrid_margin < 0:
            raise ValueError("offgrid margin must be nonnegative")


@dataclass(frozen=True)
class Scene:
    """A generated scene: ground truth, observations, and provenance."""

    config: SceneConfig
    tensor: RadioMapTensor  # noiseless ground truth
    observations: FiberObservations  # noisy when snr_db is set
    emitters: tuple  # ShadowParams per emitter
    factors: FactorModel  # ground-truth C (K x R) and S (R x IJ)
    noise: Optional[np.ndarray]  # full noise tensor, or None


# Cholesky factors of the unit-variance exponential correlation, keyed by
# (rows, cols, d_corr); small because corpus generation rarely repeats keys.
_CHOL_CACHE: "OrderedDict[tuple, np.ndarray]" = OrderedDict()
_CHOL_CACHE_MAX = 4
# Cell-to-cell distance matrices, keyed by grid shape (shared by all d_corr).
_DIST_CACHE: "OrderedDict[tuple, np.ndarray]" = OrderedDict()
_DIST_CACHE_MAX = 4


def _cell_distances(grid: GridSpec) -> np.ndarray:
    key = (grid.rows, grid.cols)
    hit = _DIST_CACHE.get(key)
    if hit is not None:
        _DIST_CACHE.move_to_end(key)
        return hit
    ii, jj = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
    ii = ii.ravel().astype(np.float64)
    jj = jj.ravel().astype(np.float64)
    dist = np.sqrt((ii[:, None] - ii[None, :]) ** 2 + (jj[:, None] - jj[None, :]) ** 2)
    _DIST_CACHE[key] = dist
    while len(_DIST_CACHE) > _DIST_CACHE_MAX:
        _DIST_CACHE.popitem(last=False)
    return dist


def _correlation_cholesky(grid: GridSpec, d_corr: float) -> np.ndarray:
    key = (grid.rows, grid.cols, float(d_corr))
    hit = _CHOL_CACHE.get(key)
    if hit is not None:
        _CHOL_CACHE.move_to_end(key)
        return hit
    corr = np.exp(-_cell_distances(grid) / d_corr)
    last_err = None
    for jit in _JITTERS:
        try:
            mat = corr if jit == 0.0 else corr + jit * np.eye(corr.shape[0])
            L = np.linalg.cholesky(mat)
            break
        except np.linalg.LinAlgError as err:
            last_err = err
    else:  # pragma: no cover - would need a pathological grid
        raise ShadowFieldError(
            f"covariance factorization failed after jitters {_JITTERS}: {last_err}",
            _JITTERS,
        )
    _CHOL_CACHE[key] = L
    while len(_CHOL_CACHE) > _CHOL_CACHE_MAX:
        _CHOL_CACHE.popitem(last=False)
    return L


def gen_shadow_field(grid: GridSpec, eta: float, d_corr: float, seed) -> np.ndarray:
    """Draw one correlated zero-mean Gaussian shadowing field (dB units).

    cov(v(y), v(y')) = eta * exp(-||y - y'||_2 / d_corr), exact through a
    dense Cholesky factor of the cell-to-cell correlation matrix.
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if d_corr <= 0:
        raise ValueError("d_corr must be positive")
    if eta == 0.0:
        return np.zeros((grid.rows, grid.cols))
    L = _correlation_cholesky(grid, d_corr)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(grid.n_cells)
    return np.sqrt(eta) * (L @ z).reshape(grid.rows, grid.cols)


def gen_slf(grid: GridSpec, params: ShadowParams, seed) -> Slf:
    """Path loss plus log-normal shadowing on the full grid."""
    v = gen_shadow_field(grid, params.shadow_variance, params.decorrelation, seed)
    ii, jj = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
    ri, rj = params.location
    dist = np.sqrt((ii - ri) ** 2 + (jj - rj) ** 2)
    dist = np.maximum(dist, DISTANCE_CLAMP)
    values = dist ** (-params.pathloss) * 10.0 ** (v / 10.0)
    return Slf(grid.rows, grid.cols, values)


def gen_psd(bins: int, params: PsdParams) -> Psd:
    """Sum of squared sinc lobes: c(k) = sum_i a_i sinc^2((k - f_i) / w_i)."""
    k = np.arange(1, bins + 1, dtype=np.float64)
    values = np.zeros(bins)
    for f, w, a in zip(params.centers, params.widths, params.amplitudes):
        values += a * np.sinc((k - f) / w) ** 2
    return Psd(values)


def sample_mask(grid: GridSpec, fraction: float, rng: np.random.Generator) -> SensingMask:
    """Uniform without-replacement sensing mask with |mask| = round(fraction * IJ)."""
    n = int(round(fraction * grid.n_cells))
    n = max(1, min(n, grid.n_cells))
    picks = rng.choice(grid.n_cells, size=n, replace=False)
    cells = [(int(p) // grid.cols, int(p) % grid.cols) for p in picks]
    return SensingMask(grid, tuple(cells))


def _sample_emitter(cfg: SceneConfig, rng: np.random.Generator) -> ShadowParams:
    g = cfg.grid
    if cfg.offgrid_margin > 0:
        loc = (
            rng.uniform(-cfg.offgrid_margin, g.rows - 1 + cfg.offgrid_margin),
            rng.uniform(-cfg.offgrid_margin, g.cols - 1 + cfg.offgrid_margin),
        )
    else:
        loc = (float(rng.integers(0, g.rows)), float(rng.integers(0, g.cols)))
    return ShadowParams(
        location=loc,
        pathloss=rng.uniform(*cfg.gamma_range),
        shadow_variance=rng.uniform(*cfg.eta_range),
        decorrelation=rng.uniform(*cfg.dcorr_range),
    )


def _sample_psds(cfg: SceneConfig, rng: np.random.Generator) -> list[Psd]:
    """Draw R PSDs; under sparse occupancy each emitter owns one exclusive bin."""
    K = cfg.grid.bins
    R = cfg.n_emitters
    psds = []
    if cfg.sparse_occupancy:
        if R > K:
            raise ValueError(f"sparse occupancy needs at least {R} bins, grid has {K}")
        exclusive = rng.choice(K, size=R, replace=False) + 1  # 1-based bins
        others = np.setdiff1d(np.arange(1, K + 1), exclusive)
        for r in range(R):
            n_extra = int(rng.integers(1, cfg.psd_extra_bands + 1)) if cfg.psd_extra_bands > 0 else 0
            n_extra = min(n_extra, others.size)
            centers = [float(exclusive[r])]
            if n_extra:
                centers.extend(float(c) for c in rng.choice(others, size=n_extra, replace=False))
            params = PsdParams(
                centers=np.array(centers),
                widths=rng.uniform(*cfg.psd_width_range, size=len(centers)),
                amplitudes=rng.uniform(*cfg.psd_amplitude_range, size=len(centers)),
            )
            values = gen_psd(K, params).values
            # Exclusivity is exact: silence every emitter on the other
            # emitters' designated bins (sinc tails would otherwise leak).
            for s in range(R):
                if s != r:
                    values[int(exclusive[s]) - 1] = 0.0
            psds.append(Psd(values))
    else:
        for _ in range(R):
            n_bands = int(rng.integers(1, max(cfg.psd_extra_bands, 1) + 1))
            params = PsdParams(
                centers=rng.uniform(1.0, float(K), size=n_bands),
                widths=rng.uniform(*cfg.psd_width_range, size=n_bands),
                amplitudes=rng.uniform(*cfg.psd_amplitude_range, size=n_bands),
            )
            psds.append(gen_psd(K, params))
    return psds


def gen_scene(cfg: SceneConfig) -> Scene:
    """Generate ground truth, observations, and factor truth for one scene."""
    g = cfg.grid
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    emitters = [_sample_emitter(cfg, rng) for _ in range(cfg.n_emitters)]
    field_seeds = rng.integers(0, 2**63 - 1, size=cfg.n_emitters)
    slfs = [gen_slf(g, p, int(s)) for p, s in zip(emitters, field_seeds)]
    psds = _sample_psds(cfg, rng)
    tensor = assemble(slfs, psds)

    mask = sample_mask(g, cfg.sample_fraction, rng)
    if len(mask) < cfg.n_emitters:
        warnings.warn(
            f"only {len(mask)} sensed cells for {cfg.n_emitters} emitters; "
            "rank-R disaggregation needs at least R sensed fibers",
            stacklevel=2,
        )

    noise = None
    observed = tensor.values
    if cfg.snr_db is not None:
        raw = rng.uniform(0.0, 1.0, size=tensor.values.shape)
        target = np.linalg.norm(tensor.values) / (10.0 ** (cfg.snr_db / 20.0))
        noise = raw * (target / np.linalg.norm(raw))
        observed = tensor.values + noise

    fibers = np.stack([observed[i, j, :] for i, j in mask.cells])
    obs = FiberObservations(mask, fibers)

    g.require_flat_bijection()
    S = np.empty((cfg.n_emitters, g.n_cells))
    for r, s in enumerate(slfs):
        for i in range(g.rows):
            for j in range(g.cols):
                S[r, g.flat_index(i, j)] = s.values[i, j]
    C = np.column_stack([p.values for p in psds])
    factors = FactorModel(C, S)
    return Scene(cfg, tensor, obs, tuple(emitters), factors, noise)


@dataclass(frozen=True)
class CorpusConfig:
    """Sampling law for single-emitter training pairs."""

    grid: GridSpec
    seed: int
    gamma_range: tuple = (2.0, 2.5)
    eta_range: tuple = (3.0, 8.0)
    dcorr_range: tuple = (30.0, 100.0)
    mask_fraction_range: tuple = (0.01, 0.2)
    offgrid_margin: float = 0.0


def gen_training_corpus(cfg: CorpusConfig, count: int) -> Iterator[tuple[SensingMask, Slf]]:
    """Stream `count` independent (mask, single-emitter SLF) training pairs.

    Sample n draws from substream n of the corpus seed, so any subset can be
    regenerated independently and in any order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    for n in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(n,)))
        yield _corpus_sample(cfg, rng)


def _corpus_sample(cfg: CorpusConfig, rng: np.random.Generator) -> tuple[SensingMask, Slf]:
    g = cfg.grid
    if cfg.offgrid_margin > 0:
        loc = (
            rng.uniform(-cfg.offgrid_margin, g.rows - 1 + cfg.offgrid_margin),
            rng.uniform(-cfg.offgrid_margin, g.cols - 1 + cfg.offgrid_margin),
        )
    else:
        loc = (float(rng.integers(0, g.rows)), float(rng.integers(0, g.cols)))
    params = ShadowParams(
        location=loc,
        pathloss=rng.uniform(*cfg.gamma_range),
        shadow_variance=rng.uniform(*cfg.eta_range),
        decorrelation=rng.uniform(*cfg.dcorr_range),
    )
    slf = gen_slf(g, params, rng.integers(0, 2**63 - 1))
    fraction = rng.uniform(*cfg.mask_fraction_range)
    mask = sample_mask(g, fraction, rng)
    return mask, slf
