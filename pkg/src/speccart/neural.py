"""Learned SLF prior: a small convolutional autoencoder built on numpy.

The decoder is a chain of affine maps (dense, convolution, or transposed
convolution) and elementwise activations, so reverse-mode gradients with
respect to the latent input are exact and cheap; they drive the latent
optimization in the one-shot completion solver.  Convolutions are explicit
im2col contractions; transposed convolutions are implemented as the exact
adjoint of a convolution, which makes the gradient pairs self-consistent
by construction.

Weights are kept on the float32 grid (stored as float64 for arithmetic),
so serialization with 32-bit payloads round-trips bit-exactly.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .core import Slf

__all__ = [
    "LayerSpec",
    "EncoderNetwork",
    "DecoderNetwork",
    "TrainConfig",
    "TrainState",
    "TrainResult",
    "CorpusStats",
    "SlfModel",
    "PowerIterationError",
    "TrainingDivergedError",
    "WeightsFormatError",
    "conv_autoencoder_specs",
    "dense_autoencoder_specs",
    "init_network",
    "forward_decoder",
    "grad_latent",
    "complete_slf",
    "lipschitz_product",
    "spectral_norm",
    "train_autoencoder",
    "save_weights",
    "load_weights",
    "save_model",
    "load_model",
]

log = logging.getLogger(__name__)

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

# Global Lipschitz constants of the supported activations.
ACTIVATION_LIPSCHITZ = {
    "selu": SELU_LAMBDA * SELU_ALPHA,
    "sigmoid": 0.25,
    "identity": 1.0,
}

_WEIGHTS_MAGIC = b"SCNET\x00"
_MODEL_MAGIC = b"SCMODEL\x00"
_FORMAT_VERSION = 1


class PowerIterationError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the last finite epoch's networks."""

    def __init__(self, message: str, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


class WeightsFormatError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# activations


def _act(tag: str, u: np.ndarray) -> np.ndarray:
    if tag == "selu":
        return SELU_LAMBDA * np.where(u > 0, u, SELU_ALPHA * np.expm1(np.minimum(u, 0.0)))
    if tag == "sigmoid":
        return expit(u)
    if tag == "identity":
        return u
    raise ValueError(f"unknown activation {tag!r}")


def _act_grad(tag: str, u: np.ndarray, y: np.ndarray) -> np.ndarray:
    if tag == "selu":
        return SELU_LAMBDA * np.where(u > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(u, 0.0)))
    if tag == "sigmoid":
        return y * (1.0 - y)
    if tag == "identity":
        return np.ones_like(u)
    raise ValueError(f"unknown activation {tag!r}")


# ---------------------------------------------------------------------------
# layer specification


@dataclass(frozen=True)
class LayerSpec:
    """One affine+activation stage.

    Shapes exclude the batch axis: dense layers use ``(n,)``, convolutional
    layers ``(channels, height, width)``.  `pad` is (low, high) applied to
    both spatial axes; asymmetric padding keeps odd sizes on the chain.
    """

    kind: str  # "dense" | "conv" | "deconv"
    activation: str
    in_shape: tuple
    out_shape: tuple
    kernel: int = 0
    stride: int = 1
    pad: tuple = (0, 0)

    def __post_init__(self):
        if self.kind not in ("dense", "conv", "deconv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATION_LIPSCHITZ:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "in_shape", tuple(int(v) for v in self.in_shape))
        object.__setattr__(self, "out_shape", tuple(int(v) for v in self.out_shape))
        object.__setattr__(self, "pad", (int(self.pad[0]), int(self.pad[1])))
        if self.kind == "dense":
            pass  # dense layers treat any declared shape as flat
        else:
            if len(self.in_shape) != 3 or len(self.out_shape) != 3:
                raise ValueError("conv layers use (C, H, W) shapes")
            if self.kernel < 1 or self.stride < 1:
                raise ValueError("kernel and stride must be positive")
            self._check_spatial()

    def _check_spatial(self):
        cin, h, w = self.in_shape
        cout, oh, ow = self.out_shape
        plo, phi = self.pad
        if self.kind == "conv":
            for a, b in ((h, oh), (w, ow)):
                span = a + plo + phi - self.kernel
                if span < 0 or span % self.stride or span // self.stride + 1 != b:
                    raise ValueError(f"conv spatial chain broken: {self}")
        else:
            for a, b in ((h, oh), (w, ow)):
                if (a - 1) * self.stride + self.kernel - plo - phi != b:
                    raise ValueError(f"deconv spatial chain broken: {self}")

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.n_out, self.n_in)
        if self.kind == "conv":
            return (self.out_shape[0], self.in_shape[0], self.kernel, self.kernel)
        # deconv kernels are stored in the adjoint-convolution convention
        return (self.in_shape[0], self.out_shape[0], self.kernel, self.kernel)

    @property
    def bias_shape(self) -> tuple:
        return (self.n_out,) if self.kind == "dense" else (self.out_shape[0],)

    @property
    def n_in(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def n_out(self) -> int:
        return int(np.prod(self.out_shape))


# ---------------------------------------------------------------------------
# convolution primitives


def _im2col(x: np.ndarray, k: int, s: int, pad: tuple) -> tuple[np.ndarray, tuple]:
    plo, phi = pad
    if plo or phi:
        x = np.pad(x, ((0, 0), (0, 0), (plo, phi), (plo, phi)))
    B, C, Hp, Wp = x.shape
    oh = (Hp - k) // s + 1
    ow = (Wp - k) // s + 1
    v = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    v = v[:, :, ::s, ::s][:, :, :oh, :ow]
    cols = np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5)).reshape(B, oh * ow, C * k * k)
    return cols, (oh, ow)


def _col2im(gcols: np.ndarray, in_hw: tuple, C: int, k: int, s: int, pad: tuple) -> np.ndarray:
    B = gcols.shape[0]
    plo, phi = pad
    H, W = in_hw
    Hp, Wp = H + plo + phi, W + plo + phi
    oh = (Hp - k) // s + 1
    ow = (Wp - k) // s + 1
    g = gcols.reshape(B, oh, ow, C, k, k).transpose(0, 3, 1, 2, 4, 5)
    gxp = np.zeros((B, C, Hp, Wp), dtype=gcols.dtype)
    for a in range(k):
        for b in range(k):
            gxp[:, :, a : a + s * oh : s, b : b + s * ow : s] += g[:, :, :, :, a, b]
    return gxp[:, :, plo : plo + H, plo : plo + W]


def _conv_fwd(x: np.ndarray, W: np.ndarray, s: int, pad: tuple) -> np.ndarray:
    B = x.shape[0]
    O = W.shape[0]
    cols, (oh, ow) = _im2col(x, W.shape[2], s, pad)
    out = cols.reshape(B * oh * ow, -1) @ W.reshape(O, -1).T
    return out.reshape(B, oh * ow, O).transpose(0, 2, 1).reshape(B, O, oh, ow)


def _conv_bwd_input(g: np.ndarray, W: np.ndarray, s: int, pad: tuple, in_hw: tuple) -> np.ndarray:
    O, C, k, _ = W.shape
    B, _, oh, ow = g.shape
    g2 = np.ascontiguousarray(g.reshape(B, O, oh * ow).transpose(0, 2, 1))
    gcols = g2.reshape(B * oh * ow, O) @ W.reshape(O, -1)
    return _col2im(gcols.reshape(B, oh * ow, -1), in_hw, C, k, s, pad)


def _conv_bwd_weight(x: np.ndarray, g: np.ndarray, W_shape: tuple, s: int, pad: tuple) -> np.ndarray:
    O, C, k, _ = W_shape
    B, _, oh, ow = g.shape
    cols, _ = _im2col(x, k, s, pad)
    g2 = np.ascontiguousarray(g.reshape(B, O, oh * ow).transpose(0, 2, 1))
    gW = g2.reshape(B * oh * ow, O).T @ cols.reshape(B * oh * ow, -1)
    return gW.reshape(W_shape)


def _layer_affine(spec: LayerSpec, W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    B = x.shape[0]
    if spec.kind == "dense":
        return x.reshape(B, spec.n_in) @ W.T + b
    x = x.reshape((B,) + spec.in_shape)
    if spec.kind == "conv":
        return _conv_fwd(x, W, spec.stride, spec.pad) + b[None, :, None, None]
    out_hw = (spec.out_shape[1], spec.out_shape[2])
    return _conv_bwd_input(x, W, spec.stride, spec.pad, out_hw) + b[None, :, None, None]


def _layer_bwd_input(spec: LayerSpec, W: np.ndarray, g: np.ndarray) -> np.ndarray:
    B = g.shape[0]
    if spec.kind == "dense":
        return g.reshape(B, spec.n_out) @ W
    g = g.reshape((B,) + spec.out_shape)
    if spec.kind == "conv":
        return _conv_bwd_input(g, W, spec.stride, spec.pad, (spec.in_shape[1], spec.in_shape[2]))
    return _conv_fwd(g, W, spec.stride, spec.pad)


def _layer_bwd_params(spec: LayerSpec, x: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    B = g.shape[0]
    if spec.kind == "dense":
        x = x.reshape(B, spec.n_in)
        g = g.reshape(B, spec.n_out)
        return g.T @ x, g.sum(axis=0)
    x = x.reshape((B,) + spec.in_shape)
    g = g.reshape((B,) + spec.out_shape)
    if spec.kind == "conv":
        return _conv_bwd_weight(x, g, (spec.out_shape[0],) + (spec.in_shape[0], spec.kernel, spec.kernel), spec.stride, spec.pad), g.sum(axis=(0, 2, 3))
    # Adjoint identity: the deconv's weight gradient is the auxiliary
    # convolution's weight gradient with input and output roles swapped.
    gW = _conv_bwd_weight(g, x, (spec.in_shape[0], spec.out_shape[0], spec.kernel, spec.kernel), spec.stride, spec.pad)
    return gW, g.sum(axis=(0, 2, 3))


def _forward_layers(specs, Ws, bs, x, keep_cache: bool):
    caches = [] if keep_cache else None
    for spec, W, b in zip(specs, Ws, bs):
        u = _layer_affine(spec, W, b, x)
        y = _act(spec.activation, u)
        if keep_cache:
            caches.append((x, u, y))
        x = y
    return x, caches


def _backward_latent(specs, Ws, caches, grad):
    for spec, W, (x_in, u, y) in zip(reversed(specs), reversed(Ws), reversed(caches)):
        grad = grad.reshape(u.shape) * _act_grad(spec.activation, u, y)
        grad = _layer_bwd_input(spec, W, grad)
    return grad


def _backward_full(specs, Ws, caches, grad):
    gWs = [None] * len(specs)
    gbs = [None] * len(specs)
    for idx in range(len(specs) - 1, -1, -1):
        spec, W = specs[idx], Ws[idx]
        x_in, u, y = caches[idx]
        grad = grad.reshape(u.shape) * _act_grad(spec.activation, u, y)
        gWs[idx], gbs[idx] = _layer_bwd_params(spec, x_in, grad)
        grad = _layer_bwd_input(spec, W, grad)
    return grad, gWs, gbs


# ---------------------------------------------------------------------------
# networks


def _quantize(arr: np.ndarray) -> np.ndarray:
    """Snap to float32-representable values, kept as float64 for arithmetic."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def _validate_chain(specs: Sequence[LayerSpec]):
    if not specs:
        raise ValueError("network needs at least one layer")
    for a, b in zip(specs, specs[1:]):
        if a.n_out != b.n_in:
            raise ValueError(f"layer chain broken: {a.out_shape} -> {b.in_shape}")


class _Network:
    def __init__(self, specs: Sequence[LayerSpec], weights, biases):
        specs = tuple(specs)
        _validate_chain(specs)
        if len(weights) != len(specs) or len(biases) != len(specs):
            raise ValueError("one weight/bias pair per layer required")
        self.specs = specs
        self.weights = []
        self.biases = []
        for spec, W, b in zip(specs, weights, biases):
            W = np.asarray(W, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if W.shape != spec.weight_shape or b.shape != spec.bias_shape:
                raise ValueError(
                    f"weight shapes {W.shape}/{b.shape} do not match spec "
                    f"{spec.weight_shape}/{spec.bias_shape}"
                )
            self.weights.append(_quantize(W))
            self.biases.append(_quantize(b))

    @property
    def n_in(self) -> int:
        return self.specs[0].n_in

    @property
    def n_out(self) -> int:
        return self.specs[-1].n_out

    def _forward(self, x: np.ndarray, keep_cache=False):
        return _forward_layers(self.specs, self.weights, self.biases, x, keep_cache)


class DecoderNetwork(_Network):
    """Generator g: latent D-vector -> I x J map (batch-capable)."""

    def __init__(self, specs, weights, biases, latent_bound: float = None):
        super().__init__(specs, weights, biases)
        if len(self.specs[0].in_shape) != 1:
            raise ValueError("decoder input must be a flat latent vector")
        self.latent_dim = self.specs[0].n_in
        out = self.specs[-1].out_shape
        if len(out) == 3:
            if out[0] != 1:
                raise ValueError("decoder must end in a single-channel map")
            self.out_rows, self.out_cols = out[1], out[2]
        else:
            raise ValueError("decoder output layer must produce a (1, I, J) map")
        self.latent_bound = float(latent_bound) if latent_bound else 10.0 * np.sqrt(self.latent_dim)

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        Z = z[None, :] if single else z
        norms = np.linalg.norm(Z, axis=1)
        if (norms > self.latent_bound).any():
            log.debug("latent norm %.3g exceeds bound %.3g", norms.max(), self.latent_bound)
        out, _ = self._forward(Z)
        maps = out.reshape(-1, self.out_rows, self.out_cols)
        return maps[0] if single else maps


class EncoderNetwork(_Network):
    """Encoder p: I x J map -> latent D-vector (batch-capable)."""

    def __init__(self, specs, weights, biases):
        super().__init__(specs, weights, biases)
        if len(self.specs[-1].out_shape) != 1:
            raise ValueError("encoder must end in a flat latent vector")
        self.latent_dim = self.specs[-1].n_out
        first = self.specs[0].in_shape
        if len(first) != 3:
            raise ValueError("encoder input layer must declare a (C, I, J) shape")
        self.in_channels, self.in_rows, self.in_cols = first

    def encode(self, maps: np.ndarray) -> np.ndarray:
        """Accepts (I, J) / (B, I, J) maps, or (C, I, J) / (B, C, I, J) with
        an explicit channel axis when the network has a mask channel."""
        x = np.asarray(maps, dtype=np.float64)
        want = self.specs[0].in_shape
        single = x.ndim == 2 or x.shape == want
        X = x[None, ...] if single else x
        out, _ = self._forward(X.reshape(X.shape[0], -1))
        return out[0] if single else out


# ---------------------------------------------------------------------------
# architecture builders


def _down_pad(size: int, k: int = 4, s: int = 2) -> tuple[int, int]:
    target = -(-size // s)  # ceil
    total = (target - 1) * s + k - size
    return total // 2, total - total // 2


def conv_autoencoder_specs(
    rows: int,
    cols: int,
    latent_dim: int,
    base_channels: int = 16,
    latent_bound: float = None,
) -> tuple[list[LayerSpec], list[LayerSpec]]:
    """Convolutional encoder/decoder pair: four stride-2 stages, one
    unit-stride stage, and a dense bridge to the latent space.  SELU hidden
    activations, sigmoid output."""
    if rows != cols:
        raise ValueError("convolutional preset expects a square grid")
    chans = [base_channels, 2 * base_channels, 4 * base_channels, 8 * base_channels]
    enc: list[LayerSpec] = []
    sizes = [rows]
    pads = []
    cin = 1
    for c in chans:
        h = sizes[-1]
        pad = _down_pad(h)
        oh = (h + pad[0] + pad[1] - 4) // 2 + 1
        enc.append(LayerSpec("conv", "selu", (cin, h, h), (c, oh, oh), kernel=4, stride=2, pad=pad))
        cin = c
        sizes.append(oh)
        pads.append(pad)
    h4 = sizes[-1]
    c4 = chans[-1]
    enc.append(LayerSpec("conv", "selu", (c4, h4, h4), (c4, h4, h4), kernel=3, stride=1, pad=(1, 1)))
    enc.append(LayerSpec("dense", "identity", (c4 * h4 * h4,), (latent_dim,)))

    dec: list[LayerSpec] = [
        LayerSpec("dense", "selu", (latent_dim,), (c4 * h4 * h4,)),
        LayerSpec("deconv", "selu", (c4, h4, h4), (c4, h4, h4), kernel=3, stride=1, pad=(1, 1)),
    ]
    up_chans = [chans[2], chans[1], chans[0], 2]
    cin = c4
    for idx, c in enumerate(up_chans):
        h = sizes[-1 - idx]
        oh = sizes[-2 - idx]
        pad = pads[-1 - idx]
        dec.append(LayerSpec("deconv", "selu", (cin, h, h), (c, oh, oh), kernel=4, stride=2, pad=pad))
        cin = c
    dec.append(LayerSpec("conv", "sigmoid", (2, rows, rows), (1, rows, rows), kernel=4, stride=1, pad=(1, 2)))
    return enc, dec


def dense_autoencoder_specs(
    rows: int,
    cols: int,
    latent_dim: int,
    hidden: int = 64,
) -> tuple[list[LayerSpec], list[LayerSpec]]:
    """Small fully-dense pair for quick experiments and closure tests."""
    n = rows * cols
    enc = [
        LayerSpec("dense", "selu", (1, rows, cols), (hidden,)),
        LayerSpec("dense", "identity", (hidden,), (latent_dim,)),
    ]
    dec = [
        LayerSpec("dense", "selu", (latent_dim,), (hidden,)),
        LayerSpec("dense", "sigmoid", (hidden,), (1, rows, cols)),
    ]
    return enc, dec


def init_network(specs: Sequence[LayerSpec], seed, kind: str, latent_bound: float = None):
    """LeCun-normal initialization (std = 1/sqrt(fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for spec in specs:
        shape = spec.weight_shape
        if spec.kind == "dense":
            fan_in = shape[1]
        elif spec.kind == "conv":
            fan_in = shape[1] * spec.kernel * spec.kernel
        else:
            fan_in = shape[0] * spec.kernel * spec.kernel
        Ws.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))
        bs.append(np.zeros(spec.bias_shape))
    if kind == "decoder":
        return DecoderNetwork(specs, Ws, bs, latent_bound=latent_bound)
    if kind == "encoder":
        return EncoderNetwork(specs, Ws, bs)
    raise ValueError(f"kind must be encoder or decoder, got {kind!r}")


# ---------------------------------------------------------------------------
# public functional API


def forward_decoder(net: DecoderNetwork, z: np.ndarray) -> np.ndarray:
    """Evaluate g(z) for one latent vector; returns the I x J map."""
    return net.decode(z)


def grad_latent(net: DecoderNetwork, z: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Exact gradient of <cotangent, g(z)> with respect to z."""
    z = np.asarray(z, dtype=np.float64)
    cot = np.asarray(cotangent, dtype=np.float64)
    single = z.ndim == 1
    Z = z[None, :] if single else z
    C = cot[None, ...] if single else cot
    if C.shape[0] != Z.shape[0]:
        raise ValueError("one cotangent per latent vector required")
    out, caches = net._forward(Z, keep_cache=True)
    grad = _backward_latent(net.specs, net.weights, caches, C.reshape(Z.shape[0], -1))
    grad = grad.reshape(Z.shape[0], net.latent_dim)
    return grad[0] if single else grad


def complete_slf(
    encoder: EncoderNetwork,
    decoder: DecoderNetwork,
    incomplete,
    mask_map: np.ndarray = None,
    return_latent: bool = False,
):
    """Run the completion network g(p(.)) on an incomplete (masked) map.

    Inputs and outputs live in the network's normalized value range; scale
    handling belongs to the caller.  When the encoder was built with a mask
    input channel, `mask_map` supplies it.
    """
    x = incomplete.values if isinstance(incomplete, Slf) else np.asarray(incomplete, dtype=np.float64)
    if encoder.in_channels == 2:
        if mask_map is None:
            raise ValueError("this encoder expects a mask channel")
        x = np.stack([x, np.asarray(mask_map, dtype=np.float64)])
    z = encoder.encode(x)
    out = decoder.decode(z)
    slf = Slf(out.shape[0], out.shape[1], np.maximum(out, 0.0))
    return (slf, z) if return_latent else slf


def spectral_norm(spec: LayerSpec, W: np.ndarray, tol: float = 1e-6, max_iter: int = 500, seed: int = 0) -> float:
    """Largest singular value of the layer's linear action via power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(spec.n_in)
    v /= np.linalg.norm(v)

    def apply(vec):
        if spec.kind == "dense":
            return W @ vec
        x = vec.reshape((1,) + spec.in_shape)
        if spec.kind == "conv":
            return _conv_fwd(x, W, spec.stride, spec.pad).ravel()
        return _conv_bwd_input(x, W, spec.stride, spec.pad, (spec.out_shape[1], spec.out_shape[2])).ravel()

    def adjoint(vec):
        if spec.kind == "dense":
            return W.T @ vec
        g = vec.reshape((1,) + spec.out_shape)
        if spec.kind == "conv":
            return _conv_bwd_input(g, W, spec.stride, spec.pad, (spec.in_shape[1], spec.in_shape[2])).ravel()
        return _conv_fwd(g, W, spec.stride, spec.pad).ravel()

    sigma_prev = -1.0
    for _ in range(max_iter):
        u = apply(v)
        sigma = float(np.linalg.norm(u))
        if sigma == 0.0:
            return 0.0
        w = adjoint(u / sigma)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return sigma
        v = w / nw
        if abs(sigma - sigma_prev) <= tol * max(1.0, sigma):
            return sigma
        sigma_prev = sigma
    raise PowerIterationError(
        f"power iteration did not converge in {max_iter} steps", abs(sigma - sigma_prev)
    )


def lipschitz_product(net: _Network) -> float:
    """Product over layers of activation Lipschitz constant times spectral norm."""
    total = 1.0
    for spec, W in zip(net.specs, net.weights):
        total *= ACTIVATION_LIPSCHITZ[spec.activation] * spectral_norm(spec, W)
    return total


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.05
    seed: int = 0


@dataclass
class TrainState:
    """Optimizer state: first/second moment accumulators and step count."""

    m: list
    v: list
    step_count: int
    cfg: TrainConfig

    @classmethod
    def fresh(cls, params: list, cfg: TrainConfig) -> "TrainState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            step_count=0,
            cfg=cfg,
        )

    def update(self, params: list, grads: list) -> None:
        self.step_count += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1**self.step_count
        bc2 = 1.0 - c.beta2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= c.step_size * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


@dataclass(frozen=True)
class CorpusStats:
    """Normalization constants learned from a training corpus.

    Values map to the sigmoid range via (x - lo) / (hi - lo); `lo` is pinned
    at zero so the transform stays multiplicative and inverse scales can be
    folded into PSD estimates.  `mean_obs` is the corpus average of the
    per-sample mean normalized value over that sample's sensed cells; it
    anchors the scale of factorization outputs fed back into the network.
    """

    lo: float
    hi: float
    mean_obs: float

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.lo) / (self.hi - self.lo)

    def denormalize(self, t: np.ndarray) -> np.ndarray:
        return t * (self.hi - self.lo) + self.lo


@dataclass
class TrainResult:
    encoder: EncoderNetwork
    decoder: DecoderNetwork
    stats: CorpusStats
    trace: list  # (epoch, train_loss, val_loss) triples


def _materialize_corpus(corpus) -> tuple[np.ndarray, np.ndarray]:
    masks, maps = [], []
    for mask, slf in corpus:
        masks.append(mask.bool_map() if hasattr(mask, "bool_map") else np.asarray(mask, dtype=bool))
        maps.append(slf.values if isinstance(slf, Slf) else np.asarray(slf, dtype=np.float64))
    if not maps:
        raise ValueError("corpus is empty")
    return np.stack(masks), np.stack(maps)


def train_autoencoder(
    corpus: Iterable,
    enc_specs: Sequence[LayerSpec],
    dec_specs: Sequence[LayerSpec],
    cfg: TrainConfig = TrainConfig(),
    init: tuple = None,
    mask_channel: bool = False,
) -> TrainResult:
    """Minimize the masked completion objective mean_n ||f(M_n * Q_n) - Q_n||_F^2.

    Targets are corpus-normalized into the sigmoid range; the stats travel
    with the returned model.  Deterministic for a fixed config and corpus.
    """
    mask_arr, q_arr = _materialize_corpus(corpus)
    n_samples = q_arr.shape[0]
    hi = float(q_arr.max())
    if hi <= 0:
        raise ValueError("corpus values must contain positive entries")
    t_arr = (q_arr / hi).astype(np.float32)
    mask_arr = mask_arr.astype(np.float32)
    mean_obs = float(np.mean([t_arr[n][mask_arr[n] > 0].mean() for n in range(n_samples)]))
    stats = CorpusStats(lo=0.0, hi=hi, mean_obs=mean_obs)

    # The optimization loop runs in float32: weights live on the float32
    # grid anyway, and memory traffic dominates the conv contractions.
    if init is not None:
        enc, dec = init
        enc_specs, dec_specs = init[0].specs, init[1].specs
        latent_bound = dec.latent_bound
        src = init
    else:
        enc0 = init_network(enc_specs, np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0,)), "encoder")
        dec0 = init_network(dec_specs, np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)), "decoder")
        enc_specs, dec_specs = enc0.specs, dec0.specs
        latent_bound = dec0.latent_bound
        src = (enc0, dec0)
    enc_W = [w.astype(np.float32) for w in src[0].weights]
    enc_b = [b.astype(np.float32) for b in src[0].biases]
    dec_W = [w.astype(np.float32) for w in src[1].weights]
    dec_b = [b.astype(np.float32) for b in src[1].biases]

    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2,)))
    order = rng.permutation(n_samples)
    n_val = int(cfg.val_fraction * n_samples)
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if train_idx.size == 0:
        raise ValueError("no training samples left after validation split")

    params = enc_W + enc_b + dec_W + dec_b
    state = TrainState.fresh(params, cfg)
    n_enc = len(enc_W)
    n_dec = len(dec_W)

    def batch_input(idx):
        x = mask_arr[idx] * t_arr[idx]
        if mask_channel:
            x = np.concatenate([x[:, None], mask_arr[idx][:, None]], axis=1)
        return x.reshape(len(idx), -1)

    def eval_loss(idx):
        if idx.size == 0:
            return float("nan")
        total = 0.0
        for lo_i in range(0, idx.size, cfg.batch_size):
            sub = idx[lo_i : lo_i + cfg.batch_size]
            z, _ = _forward_layers(enc_specs, enc_W, enc_b, batch_input(sub), False)
            out, _ = _forward_layers(dec_specs, dec_W, dec_b, z, False)
            diff = out.reshape(len(sub), -1) - t_arr[sub].reshape(len(sub), -1)
            total += float((diff**2).sum())
        return total / idx.size

    trace = []
    checkpoint = None
    for epoch in range(cfg.epochs):
        perm = rng.permutation(train_idx)
        running = 0.0
        for lo_i in range(0, perm.size, cfg.batch_size):
            sub = perm[lo_i : lo_i + cfg.batch_size]
            x = batch_input(sub)
            z, enc_cache = _forward_layers(enc_specs, enc_W, enc_b, x, True)
            out, dec_cache = _forward_layers(dec_specs, dec_W, dec_b, z, True)
            diff = out.reshape(len(sub), -1) - t_arr[sub].reshape(len(sub), -1)
            batch_loss = float((diff**2).sum()) / len(sub)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"loss became non-finite in epoch {epoch}", checkpoint
                )
            running += batch_loss * len(sub)
            grad_out = (2.0 / len(sub)) * diff
            gz, dec_gW, dec_gb = _backward_full(dec_specs, dec_W, dec_cache, grad_out)
            _, enc_gW, enc_gb = _backward_full(enc_specs, enc_W, enc_cache, gz.reshape(len(sub), -1))
            state.update(params, enc_gW + enc_gb + dec_gW + dec_gb)
        train_loss = running / perm.size
        val_loss = eval_loss(val_idx)
        trace.append((epoch, train_loss, val_loss))
        checkpoint = (
            EncoderNetwork(enc_specs, [w.copy() for w in enc_W], [b.copy() for b in enc_b]),
            DecoderNetwork(dec_specs, [w.copy() for w in dec_W], [b.copy() for b in dec_b], latent_bound=latent_bound),
        )

    encoder = EncoderNetwork(enc_specs, enc_W, enc_b)
    decoder = DecoderNetwork(dec_specs, dec_W, dec_b, latent_bound=latent_bound)
    return TrainResult(encoder, decoder, stats, trace)


@dataclass(frozen=True)
class SlfModel:
    """Trained completion model: encoder, decoder, and corpus normalization."""

    encoder: EncoderNetwork
    decoder: DecoderNetwork
    stats: CorpusStats
    mask_channel: bool = False

    @property
    def grid_shape(self) -> tuple:
        return (self.decoder.out_rows, self.decoder.out_cols)

    def complete(self, incomplete, mask_map=None, return_latent=False):
        return complete_slf(
            self.encoder, self.decoder, incomplete,
            mask_map=mask_map, return_latent=return_latent,
        )


# ---------------------------------------------------------------------------
# serialization


def _spec_to_dict(spec: LayerSpec) -> dict:
    return {
        "kind": spec.kind,
        "activation": spec.activation,
        "in_shape": list(spec.in_shape),
        "out_shape": list(spec.out_shape),
        "kernel": spec.kernel,
        "stride": spec.stride,
        "pad": list(spec.pad),
    }


def _spec_from_dict(d: dict) -> LayerSpec:
    return LayerSpec(
        kind=d["kind"],
        activation=d["activation"],
        in_shape=tuple(d["in_shape"]),
        out_shape=tuple(d["out_shape"]),
        kernel=d["kernel"],
        stride=d["stride"],
        pad=tuple(d["pad"]),
    )


def _net_to_bytes(net: _Network) -> bytes:
    kind = "decoder" if isinstance(net, DecoderNetwork) else "encoder"
    header = {
        "kind": kind,
        "specs": [_spec_to_dict(s) for s in net.specs],
    }
    if kind == "decoder":
        header["latent_bound"] = net.latent_bound
    hjson = json.dumps(header, sort_keys=True).encode()
    blob = bytearray()
    blob += _WEIGHTS_MAGIC
    blob += struct.pack("<II", _FORMAT_VERSION, len(hjson))
    blob += hjson
    for W, b in zip(net.weights, net.biases):
        blob += W.astype("<f4").tobytes()
        blob += b.astype("<f4").tobytes()
    return bytes(blob)


def _net_from_bytes(data: bytes, offset: int = 0) -> tuple[_Network, int]:
    n = len(data)
    if n - offset < len(_WEIGHTS_MAGIC) + 8:
        raise WeightsFormatError("file truncated before header")
    if data[offset : offset + len(_WEIGHTS_MAGIC)] != _WEIGHTS_MAGIC:
        raise WeightsFormatError("bad magic; not a network weights payload")
    offset += len(_WEIGHTS_MAGIC)
    version, hlen = struct.unpack_from("<II", data, offset)
    offset += 8
    if version != _FORMAT_VERSION:
        raise WeightsFormatError(f"unsupported format version {version}")
    if n - offset < hlen:
        raise WeightsFormatError("file truncated inside header")
    try:
        header = json.loads(data[offset : offset + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise WeightsFormatError(f"corrupt header: {err}") from err
    offset += hlen
    try:
        specs = [_spec_from_dict(d) for d in header["specs"]]
    except (KeyError, ValueError, TypeError) as err:
        raise WeightsFormatError(f"invalid layer table: {err}") from err
    Ws, bs = [], []
    for spec in specs:
        for shape, sink in ((spec.weight_shape, Ws), (spec.bias_shape, bs)):
            count = int(np.prod(shape))
            nbytes = 4 * count
            if n - offset < nbytes:
                raise WeightsFormatError("file truncated inside weight payload")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
            sink.append(arr.astype(np.float64))
            offset += nbytes
    if header["kind"] == "decoder":
        net = DecoderNetwork(specs, Ws, bs, latent_bound=header.get("latent_bound"))
    else:
        net = EncoderNetwork(specs, Ws, bs)
    return net, offset


def save_weights(net: _Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_net_to_bytes(net))


def load_weights(path) -> _Network:
    with open(path, "rb") as fh:
        data = fh.read()
    net, offset = _net_from_bytes(data)
    if offset != len(data):
        raise WeightsFormatError(f"{len(data) - offset} trailing bytes after payload")
    return net


def save_model(model: SlfModel, path) -> None:
    header = {
        "stats": {"lo": model.stats.lo, "hi": model.stats.hi, "mean_obs": model.stats.mean_obs},
        "mask_channel": model.mask_channel,
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    enc = _net_to_bytes(model.encoder)
    dec = _net_to_bytes(model.decoder)
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<III", _FORMAT_VERSION, len(hjson), 2))
        fh.write(hjson)
        fh.write(struct.pack("<Q", len(enc)))
        fh.write(enc)
        fh.write(struct.pack("<Q", len(dec)))
        fh.write(dec)


def load_model(path) -> SlfModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(_MODEL_MAGIC) + 12 or data[: len(_MODEL_MAGIC)] != _MODEL_MAGIC:
        raise WeightsFormatError("not a model bundle")
    offset = len(_MODEL_MAGIC)
    version, hlen, n_nets = struct.unpack_from("<III", data, offset)
    offset += 12
    if version != _FORMAT_VERSION or n_nets != 2:
        raise WeightsFormatError(f"unsupported bundle (version {version}, {n_nets} networks)")
    if len(data) - offset < hlen:
        raise WeightsFormatError("bundle truncated inside header")
    header = json.loads(data[offset : offset + hlen].decode())
    offset += hlen
    nets = []
    for _ in range(2):
        if len(data) - offset < 8:
            raise WeightsFormatError("bundle truncated before network block")
        (blen,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        if len(data) - offset < blen:
            raise WeightsFormatError("bundle truncated inside network block")
        net, consumed = _net_from_bytes(data[offset : offset + blen])
        if consumed != blen:
            raise WeightsFormatError("network block length mismatch")
        nets.append(net)
        offset += blen
    encoder, decoder = nets
    if not isinstance(encoder, EncoderNetwork) or not isinstance(decoder, DecoderNetwork):
        raise WeightsFormatError("bundle must hold one encoder and one decoder")
    s = header["stats"]
    stats = CorpusStats(lo=float(s["lo"]), hi=float(s["hi"]), mean_obs=float(s["mean_obs"]))
    return SlfModel(encoder, decoder, stats, mask_channel=bool(header.get("mask_channel", False)))
