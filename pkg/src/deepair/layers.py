"""Neural-network layers over the gradient tape, plus the SGD update.

Each layer is a tape-aware function: it computes its forward value with
numpy (convolutions dispatch to ``deepair.kernels``), and registers a
single hand-derived backward node when a tape is active. Finite-difference
tests pin every backward implementation here.

Conventions fixed across the package:

- all arithmetic is float64;
- convolution means cross-correlation (no kernel flip), stride 1, zero
  padding (k-1)/2, so spatial size is preserved;
- batch-norm epsilon is 1e-5 and running-stat momentum 0.1; the first
  train-mode call seeds the running statistics with that batch;
- spatial inputs may carry an optional leading batch axis: [C,H,W] and
  [B,C,H,W] are both accepted, with per-channel statistics pooled over
  batch and space.
"""

from __future__ import annotations

import math
from typing import Iterable, Optional

import numpy as np

from . import kernels
from .rng import Rng
from .tensor import Parameter, Tensor, _accum, _needs, _record, _sigmoid, _tape

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

__all__ = [
    "conv2d",
    "conv1x1",
    "BatchNormState",
    "batch_norm",
    "affine",
    "global_avg_pool",
    "center_pixel",
    "LstmParams",
    "lstm_step",
    "squared_error",
    "sgd_step",
    "glorot_uniform",
]


def _lift4(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ValueError(f"{op}: expected [C,H,W] or [B,C,H,W], got {x.data.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int) -> Tensor:
    """2D cross-correlation, stride 1, zero padding preserving spatial size."""
    xd, squeezed = _lift4(x, "conv2d")
    kd, bd = kernel.data, bias.data
    if kd.ndim != 4 or kd.shape[2] != kd.shape[3]:
        raise ValueError(f"conv2d: kernel must be [C_out,C_in,k,k], got {kd.shape}")
    k = kd.shape[2]
    if k not in (1, 3):
        raise ValueError(f"conv2d: kernel size must be 1 or 3, got {k}")
    if padding != (k - 1) // 2:
        raise ValueError(f"conv2d: padding must be {(k - 1) // 2} for k={k}, got {padding}")
    if kd.shape[1] != xd.shape[1]:
        raise ValueError(
            f"conv2d: kernel expects {kd.shape[1]} input channels "
            f"(kernel {kd.shape}) but input has {xd.shape[1]} (input {x.data.shape})"
        )
    if bd.shape != (kd.shape[0],):
        raise ValueError(f"conv2d: bias shape {bd.shape} != ({kd.shape[0]},)")

    od = kernels.conv2d_forward(xd, kd, bd, padding)
    out = Tensor(od[0] if squeezed else od)
    t = _tape()
    if t is not None and (_needs(x) or _needs(kernel) or _needs(bias)):
        def bwd():
            g = out.grad
            if g is None:
                return
            g4 = g[None] if squeezed else g
            if _needs(kernel):
                _accum(kernel, kernels.conv2d_grad_w(xd, g4, k, padding))
            if _needs(bias):
                _accum(bias, kernels.conv2d_grad_b(g4))
            if _needs(x):
                gx = kernels.conv2d_grad_x(g4, kd, padding)
                _accum(x, gx[0] if squeezed else gx)
        _record(t, out, bwd)
    return out


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel affine map across channels; same code path as conv2d(k=1)."""
    wd = weight.data
    if wd.ndim != 2:
        raise ValueError(f"conv1x1: weight must be [C_out,C_in], got {wd.shape}")
    channels = x.data.shape[-3] if x.data.ndim >= 3 else None
    if channels != wd.shape[1]:
        raise ValueError(
            f"conv1x1: weight expects {wd.shape[1]} channels (weight {wd.shape}) "
            f"but input has shape {x.data.shape}"
        )
    kernel = Tensor(wd.reshape(wd.shape[0], wd.shape[1], 1, 1))
    t = _tape()
    route = t is not None and _needs(weight)
    if route:
        kernel._rec = True  # make conv2d record and fill kernel.grad
    out = conv2d(x, kernel, bias, padding=0)
    if route:
        def alias_bwd():
            if kernel.grad is None:
                return
            _accum(weight, kernel.grad.reshape(weight.data.shape))
            kernel.grad = None
        # placed before the conv node so the reversed traversal runs it after
        t.nodes.insert(len(t.nodes) - 1, ((), alias_bwd))
    return out


class BatchNormState:
    """Running per-channel statistics for one batch-norm layer."""

    def __init__(self, channels: int):
        self.channels = channels
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.initialized = False

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        if not self.initialized:
            self.running_mean = mean.copy()
            self.running_var = var.copy()
            self.initialized = True
        else:
            m = BN_MOMENTUM
            self.running_mean = (1.0 - m) * self.running_mean + m * mean
            self.running_var = (1.0 - m) * self.running_var + m * var


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    Train mode normalizes by the current batch's (biased) statistics and
    updates the running stats; eval mode applies the running stats and
    fails if no train-mode call ever initialized them.
    """
    xd, squeezed = _lift4(x, "batch_norm")
    c = xd.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"batch_norm: gamma/beta must have shape ({c},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")

    axes = (0, 2, 3)
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if mode == "train":
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)  # biased, matches the normalization
        state.update(mean, var)
    else:
        if not state.initialized:
            raise ValueError(
                "batch_norm: eval mode before any train-mode call "
                "(running statistics uninitialized)"
            )
        mean, var = state.running_mean, state.running_var

    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
    od = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(od[0] if squeezed else od)

    t = _tape()
    if t is not None and (_needs(x) or _needs(gamma) or _needs(beta)):
        gamma_data = gamma.data.copy()

        def bwd():
            g = out.grad
            if g is None:
                return
            g4 = g[None] if squeezed else g
            gsum = g4.sum(axis=axes)
            gx_sum = (g4 * xhat).sum(axis=axes)
            if _needs(beta):
                _accum(beta, gsum)
            if _needs(gamma):
                _accum(gamma, gx_sum)
            if _needs(x):
                gi = gamma_data * inv
                if mode == "train":
                    gx = gi[None, :, None, None] * (
                        g4
                        - gsum[None, :, None, None] / n
                        - xhat * gx_sum[None, :, None, None] / n
                    )
                else:
                    gx = gi[None, :, None, None] * g4
                _accum(x, gx[0] if squeezed else gx)
        _record(t, out, bwd)
    return out


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully connected map: weight @ x + bias for 1D x, batched for 2D."""
    wd, bd = weight.data, bias.data
    if wd.ndim != 2 or bd.shape != (wd.shape[0],):
        raise ValueError(
            f"affine: weight [out,in] and bias [out] required, got "
            f"{wd.shape} and {bd.shape}"
        )
    if x.data.ndim == 1:
        if x.data.shape[0] != wd.shape[1]:
            raise ValueError(
                f"affine: input dim {x.data.shape[0]} != weight in-dim {wd.shape[1]}"
            )
        od = wd @ x.data + bd
    elif x.data.ndim == 2:
        if x.data.shape[1] != wd.shape[1]:
            raise ValueError(
                f"affine: input dim {x.data.shape[1]} != weight in-dim {wd.shape[1]}"
            )
        od = x.data @ wd.T + bd
    else:
        raise ValueError(f"affine: expected 1D or 2D input, got {x.data.shape}")

    out = Tensor(od)
    t = _tape()
    if t is not None and (_needs(x) or _needs(weight) or _needs(bias)):
        xd = x.data
        def bwd():
            g = out.grad
            if g is None:
                return
            if xd.ndim == 1:
                if _needs(weight):
                    _accum(weight, np.outer(g, xd))
                if _needs(bias):
                    _accum(bias, g)
                if _needs(x):
                    _accum(x, wd.T @ g)
            else:
                if _needs(weight):
                    _accum(weight, g.T @ xd)
                if _needs(bias):
                    _accum(bias, g.sum(axis=0))
                if _needs(x):
                    _accum(x, g @ wd)
        _record(t, out, bwd)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean over all pixels: [C,H,W] -> [C], [B,C,H,W] -> [B,C]."""
    xd, squeezed = _lift4(x, "global_avg_pool")
    hw = xd.shape[2] * xd.shape[3]
    od = xd.mean(axis=(2, 3))
    out = Tensor(od[0] if squeezed else od)
    t = _tape()
    if t is not None and _needs(x):
        shape = xd.shape
        def bwd():
            g = out.grad
            if g is None:
                return
            g2 = g[None] if squeezed else g
            gx = np.broadcast_to((g2 / hw)[:, :, None, None], shape)
            _accum(x, gx[0] if squeezed else gx)
        _record(t, out, bwd)
    return out


def center_pixel(x: Tensor) -> Tensor:
    """Center-cell channel vectors: [B,C,H,W] -> [B,C] (H, W odd)."""
    xd, squeezed = _lift4(x, "center_pixel")
    ci, cj = xd.shape[2] // 2, xd.shape[3] // 2
    od = xd[:, :, ci, cj].copy()
    out = Tensor(od[0] if squeezed else od)
    t = _tape()
    if t is not None and _needs(x):
        def bwd():
            g = out.grad
            if g is None:
                return
            g2 = g[None] if squeezed else g
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            xg = x.grad[None] if squeezed else x.grad
            xg[:, :, ci, cj] += g2
        _record(t, out, bwd)
    return out


class LstmParams:
    """One LSTM layer's gate parameters (input/forget/output/candidate)."""

    GATES = ("i", "f", "o", "c")

    def __init__(self, prefix: str, input_size: int, hidden_size: int, rng: Rng):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.w = {}
        self.u = {}
        self.b = {}
        for gate in self.GATES:
            self.w[gate] = Parameter(
                f"{prefix}.w_{gate}",
                glorot_uniform(rng, (hidden_size, input_size)),
            )
            self.u[gate] = Parameter(
                f"{prefix}.u_{gate}",
                glorot_uniform(rng, (hidden_size, hidden_size)),
            )
            bias = np.zeros(hidden_size)
            if gate == "f":
                bias += 1.0  # forget-gate bias starts open
            self.b[gate] = Parameter(f"{prefix}.b_{gate}", bias)

    def parameters(self) -> list[Parameter]:
        out = []
        for gate in self.GATES:
            out.extend([self.w[gate], self.u[gate], self.b[gate]])
        return out


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor,
              params: LstmParams) -> tuple[Tensor, Tensor]:
    """One gated recurrent update.

    i = sigmoid(W_i x + U_i h + b_i), f and o likewise,
    c = f * c_prev + i * tanh(W_c x + U_c h + b_c), h = tanh(c) * o.
    """
    d_in, d_h = params.input_size, params.hidden_size
    if x.data.shape != (d_in,):
        raise ValueError(f"lstm_step: x shape {x.data.shape} != ({d_in},)")
    if h_prev.data.shape != (d_h,) or c_prev.data.shape != (d_h,):
        raise ValueError(
            f"lstm_step: state shapes {h_prev.data.shape}/{c_prev.data.shape} "
            f"!= ({d_h},)"
        )

    xd, hd, cd = x.data, h_prev.data, c_prev.data
    pre = {
        g: params.w[g].data @ xd + params.u[g].data @ hd + params.b[g].data
        for g in params.GATES
    }
    gi = _sigmoid(pre["i"])
    gf = _sigmoid(pre["f"])
    go = _sigmoid(pre["o"])
    gc = np.tanh(pre["c"])
    c_new = gf * cd + gi * gc
    tc = np.tanh(c_new)
    h_new = tc * go

    h_out = Tensor(h_new)
    c_out = Tensor(c_new)
    t = _tape()
    tracked = (
        _needs(x) or _needs(h_prev) or _needs(c_prev)
        or any(_needs(p.tensor) for p in params.parameters())
    )
    if t is not None and tracked:
        def bwd():
            gh = h_out.grad
            gcell = c_out.grad
            if gh is None and gcell is None:
                return
            if gh is None:
                gh = np.zeros(d_h)
            dc = (np.zeros(d_h) if gcell is None else gcell.copy())
            d_o = gh * tc
            dc += gh * go * (1.0 - tc * tc)
            d_i = dc * gc
            d_g = dc * gi
            d_f = dc * cd
            d_cprev = dc * gf
            pre_grads = {
                "i": d_i * gi * (1.0 - gi),
                "f": d_f * gf * (1.0 - gf),
                "o": d_o * go * (1.0 - go),
                "c": d_g * (1.0 - gc * gc),
            }
            gx = np.zeros(d_in)
            ghp = np.zeros(d_h)
            for g in params.GATES:
                dpre = pre_grads[g]
                wt, ut, bt = params.w[g].tensor, params.u[g].tensor, params.b[g].tensor
                if _needs(wt):
                    _accum(wt, np.outer(dpre, xd))
                if _needs(ut):
                    _accum(ut, np.outer(dpre, hd))
                if _needs(bt):
                    _accum(bt, dpre)
                gx += params.w[g].data.T @ dpre
                ghp += params.u[g].data.T @ dpre
            if _needs(x):
                _accum(x, gx)
            if _needs(h_prev):
                _accum(h_prev, ghp)
            if _needs(c_prev):
                _accum(c_prev, d_cprev)
        h_out._rec = True
        c_out._rec = True
        t.nodes.append(((h_out, c_out), bwd))
    return h_out, c_out


def squared_error(pred: Tensor, target: np.ndarray, reduction: str = "sum") -> Tensor:
    """Squared-error loss against a constant target (sum or mean over elements)."""
    from .tensor import mean_all, mul, sub, sum_all
    tgt = Tensor(np.asarray(target, dtype=np.float64).reshape(pred.data.shape))
    d = sub(pred, tgt)
    q = mul(d, d)
    if reduction == "sum":
        return sum_all(q)
    if reduction == "mean":
        return mean_all(q)
    raise ValueError(f"squared_error: unknown reduction {reduction!r}")


def sgd_step(params: Iterable[Parameter], learning_rate: float) -> None:
    """Plain SGD: p <- p - lr * grad, then grads are zeroed."""
    params = list(params)
    for p in params:
        if p.tensor.grad is None:
            raise ValueError(f"sgd_step: parameter {p.name!r} has no gradient")
    for p in params:
        p.tensor.data -= learning_rate * p.tensor.grad
        p.tensor.grad = None


def glorot_uniform(rng: Rng, shape: tuple, fan_in: Optional[int] = None,
                   fan_out: Optional[int] = None) -> np.ndarray:
    """Uniform draw in +-sqrt(6/(fan_in+fan_out)).

    Default fans: [out,in] for 2D weights, [C_out,C_in,k,k] for conv kernels
    (fan counts include the receptive field).
    """
    if fan_in is None or fan_out is None:
        if len(shape) == 2:
            fan_out_d, fan_in_d = shape
        elif len(shape) == 4:
            rf = shape[2] * shape[3]
            fan_out_d, fan_in_d = shape[0] * rf, shape[1] * rf
        else:
            raise ValueError(f"glorot_uniform: cannot infer fans for shape {shape}")
        fan_in = fan_in if fan_in is not None else fan_in_d
        fan_out = fan_out if fan_out is not None else fan_out_d
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)
