"""One-shot completion: alternating optimization of PSDs and latent codes.

Fits the observed fibers directly with sum_r g(z_r) o c_r, where g is the
trained decoder.  The PSD block is an exactly-solved nonnegative least
squares problem; the latent block takes a fixed number of adaptive-moment
gradient steps through the decoder.  Latent updates are accepted only if
they decrease the objective (halving the step and retrying otherwise), so
the recorded objective sequence is non-increasing by construction.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import FiberObservations, Psd, Slf, assemble, extract_G
from .factor import kkt_residual, nnls, nnls_vector
from .nasdac import CompletionResult, nasdac
from .neural import DecoderNetwork, SlfModel, grad_latent

__all__ = [
    "DowJonsConfig",
    "DowJonsDiagnostics",
    "StationarityReport",
    "TraceRow",
    "objective",
    "update_C",
    "update_Z",
    "dowjons",
    "stationarity_report",
]

_RIDGE = 1e-8


@dataclass(frozen=True)
class DowJonsConfig:
    max_outer: int = 10
    tol: float = 0.003  # relative objective change stopping threshold
    inner_steps: int = 10
    step_size: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_backtracks: int = 5

    def __post_init__(self):
        if self.max_outer < 1 or self.inner_steps < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.tol <= 0:
            raise ValueError("stopping tolerance must be positive")


@dataclass
class TraceRow:
    outer: int
    objective: float
    z_grad_norm: float
    c_kkt_residual: float
    seconds: float


@dataclass
class DowJonsDiagnostics:
    trace: list = field(default_factory=list)  # TraceRow per outer iteration
    converged: bool = False
    stalled_iters: int = 0
    ridge_fallbacks: int = 0
    final_step_size: float = float("nan")


@dataclass(frozen=True)
class StationarityReport:
    z_grad_norms: np.ndarray  # per-emitter gradient norms
    z_grad_total: float
    c_kkt: float


def _maps_at_mask(maps: np.ndarray, mask) -> np.ndarray:
    """Restrict decoded maps (R, I, J) to the sensed cells -> (R, |mask|)."""
    rows = np.array([c[0] for c in mask.cells])
    cols = np.array([c[1] for c in mask.cells])
    return maps[:, rows, cols]


def objective(Z: np.ndarray, C: np.ndarray, obs: FiberObservations, decoder: DecoderNetwork) -> float:
    """Squared residual over the observed fibers only."""
    maps = decoder.decode(np.asarray(Z, dtype=np.float64))
    H = _maps_at_mask(maps, obs.mask)
    E = extract_G(obs) - np.asarray(C) @ H
    return float((E**2).sum())


def _objective_from_H(G: np.ndarray, C: np.ndarray, H: np.ndarray) -> float:
    E = G - C @ H
    return float((E**2).sum())


def update_C(Z: np.ndarray, obs: FiberObservations, decoder: DecoderNetwork) -> np.ndarray:
    """Exact nonnegative least-squares solve of the PSD block."""
    maps = decoder.decode(np.asarray(Z, dtype=np.float64))
    H = _maps_at_mask(maps, obs.mask)
    C, _ = _solve_C(extract_G(obs), H)
    return C


def _solve_C(G: np.ndarray, H: np.ndarray) -> tuple[np.ndarray, bool]:
    """NNLS for C; rank-deficient H falls back to a tiny ridge. Returns
    (C, used_fallback)."""
    try:
        return nnls(G, H), False
    except ValueError:
        warnings.warn("rank-deficient SLF block; solving PSD update with ridge", stacklevel=2)
        R = H.shape[0]
        A = np.vstack([H.T, np.sqrt(_RIDGE) * np.eye(R)])
        C = np.empty((G.shape[0], R))
        zero = np.zeros(R)
        for k in range(G.shape[0]):
            C[k] = nnls_vector(A, np.concatenate([G[k], zero]))
        return C, True


def _z_gradient(Z: np.ndarray, C: np.ndarray, G: np.ndarray, obs, decoder) -> tuple[np.ndarray, float]:
    """Gradient of the fiber-residual objective w.r.t. all latent codes."""
    maps = decoder.decode(Z)
    H = _maps_at_mask(maps, obs.mask)
    E = G - C @ H  # K x n_obs
    dH = -2.0 * (C.T @ E)  # R x n_obs
    cot = np.zeros((Z.shape[0], maps.shape[1], maps.shape[2]))
    rows = np.array([c[0] for c in obs.mask.cells])
    cols = np.array([c[1] for c in obs.mask.cells])
    cot[:, rows, cols] = dH
    grad = grad_latent(decoder, Z, cot)
    return grad, float((E**2).sum())


def update_Z(
    Z: np.ndarray,
    C: np.ndarray,
    obs: FiberObservations,
    decoder: DecoderNetwork,
    cfg: DowJonsConfig = DowJonsConfig(),
    step_size: float = None,
) -> tuple[np.ndarray, float, bool, float]:
    """Run the inner adaptive-moment loop on the latent block.

    Takes `cfg.inner_steps` Adam steps; the block is accepted only if the
    objective decreased, otherwise the step size halves and the loop reruns
    (up to `cfg.max_backtracks` times).  Returns
    (Z_new, objective_new, stalled, step_used).  On a stall the input Z is
    returned unchanged.
    """
    Z = np.asarray(Z, dtype=np.float64)
    G = extract_G(obs)
    step = cfg.step_size if step_size is None else step_size
    maps = decoder.decode(Z)
    f0 = _objective_from_H(G, C, _maps_at_mask(maps, obs.mask))

    for attempt in range(cfg.max_backtracks + 1):
        Zt = Z.copy()
        m = np.zeros_like(Zt)
        v = np.zeros_like(Zt)
        for t in range(1, cfg.inner_steps + 1):
            grad, _ = _z_gradient(Zt, C, G, obs, decoder)
            m = cfg.beta1 * m + (1 - cfg.beta1) * grad
            v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
            mh = m / (1 - cfg.beta1**t)
            vh = v / (1 - cfg.beta2**t)
            Zt = Zt - step * mh / (np.sqrt(vh) + cfg.eps)
        f1 = _objective_from_H(G, C, _maps_at_mask(decoder.decode(Zt), obs.mask))
        if f1 < f0:
            return Zt, f1, False, step
        step *= 0.5
    return Z, f0, True, step


def dowjons(
    obs: FiberObservations,
    R: int,
    model: SlfModel,
    cfg: DowJonsConfig = DowJonsConfig(),
) -> CompletionResult:
    """Alternating PSD / latent-code optimization, initialized by the
    two-stage solver.

    Stops when the relative objective change drops below `cfg.tol` or after
    `cfg.max_outer` outer iterations; the per-iteration trace lands in the
    result diagnostics.
    """
    decoder = model.decoder
    init = nasdac(obs, R, model)
    # Encode the completed SLFs in the network's normalized range.
    scales = init.diagnostics.input_scales
    Z = np.stack(
        [
            model.encoder.encode(init.slfs[r].values * scales[r])
            for r in range(R)
        ]
    )

    G = extract_G(obs)
    diag = DowJonsDiagnostics()
    step = cfg.step_size
    f_prev = None
    C = None
    t_start = time.perf_counter()
    for k in range(cfg.max_outer):
        maps = decoder.decode(Z)
        H = _maps_at_mask(maps, obs.mask)
        C, used_ridge = _solve_C(G, H)
        diag.ridge_fallbacks += int(used_ridge)

        Z, f, stalled, step = update_Z(Z, C, obs, decoder, cfg, step_size=step)
        diag.stalled_iters += int(stalled)

        grad, _ = _z_gradient(Z, C, G, obs, decoder)
        H_now = _maps_at_mask(decoder.decode(Z), obs.mask)
        row = TraceRow(
            outer=k,
            objective=f,
            z_grad_norm=float(np.linalg.norm(grad)),
            c_kkt_residual=kkt_residual(G, H_now, C),
            seconds=time.perf_counter() - t_start,
        )
        diag.trace.append(row)

        if f_prev is not None and abs(f_prev - f) / max(f_prev, 1e-12) < cfg.tol:
            diag.converged = True
            break
        f_prev = f
    diag.final_step_size = step

    # Final exact C for the factors we return.
    maps = decoder.decode(Z)
    H = _maps_at_mask(maps, obs.mask)
    C, used_ridge = _solve_C(G, H)
    diag.ridge_fallbacks += int(used_ridge)

    grid = obs.grid
    slfs = [Slf(grid.rows, grid.cols, np.maximum(maps[r], 0.0)) for r in range(R)]
    psds = [Psd(C[:, r]) for r in range(R)]
    tensor = assemble(slfs, psds)
    return CompletionResult(
        tensor=tensor,
        slfs=slfs,
        psds=psds,
        diagnostics=diag,
        objective_trace=[row.objective for row in diag.trace],
    )


def stationarity_report(
    Z: np.ndarray,
    C: np.ndarray,
    obs: FiberObservations,
    decoder: DecoderNetwork,
) -> StationarityReport:
    """Per-block optimality measures at a given state: latent gradient norms
    and the KKT residual of the PSD block."""
    Z = np.asarray(Z, dtype=np.float64)
    G = extract_G(obs)
    grad, _ = _z_gradient(Z, C, G, obs, decoder)
    H = _maps_at_mask(decoder.decode(Z), obs.mask)
    return StationarityReport(
        z_grad_norms=np.linalg.norm(grad, axis=1),
        z_grad_total=float(np.linalg.norm(grad)),
        c_kkt=kkt_residual(G, H, np.asarray(C, dtype=np.float64)),
    )
