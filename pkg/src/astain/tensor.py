"""Dense float64 layer kernels with explicit forward/backward pairs.

Tensors are plain ``numpy.ndarray`` objects in (batch, channel, row, column)
order. Every forward function returns ``(output, cache)``; the matching
``*_backward`` consumes the upstream gradient and the cache.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when tensor extents do not match what an operation expects."""


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    momentum_buffer: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.momentum_buffer = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad.fill(0.0)


@dataclass
class OptimizerState:
    """SGD hyperparameters plus the iteration counter driving the step decay."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iteration: int = 0
    decay: float = 0.9
    decay_interval: int = 5000

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def lr_at(self, iteration: int | None = None) -> float:
        t = self.iteration if iteration is None else iteration
        return self.learning_rate * self.decay ** (t // self.decay_interval)


def sgd_step(params: Iterable[Parameter], state: OptimizerState) -> None:
    """Momentum SGD with L2 weight decay; zeroes gradients and advances the counter."""
    lr = state.lr_at()
    for p in params:
        g = p.grad + state.weight_decay * p.value if state.weight_decay else p.grad
        p.momentum_buffer *= state.momentum
        p.momentum_buffer += g
        p.value -= lr * p.momentum_buffer
        p.zero_grad()
    state.iteration += 1


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray):
    """Valid (unpadded) stride-1 cross-correlation via im2col + GEMM."""
    _expect(x.ndim == 4, f"conv2d input must be 4-D [B,C,H,W], got shape {x.shape}")
    _expect(kernel.ndim == 4, f"conv2d kernel must be 4-D [Cout,Cin,kh,kw], got {kernel.shape}")
    b, c, h, w = x.shape
    cout, cin, kh, kw = kernel.shape
    _expect(c == cin, f"conv2d channel mismatch: input has {c}, kernel expects {cin}")
    _expect(h >= kh and w >= kw, f"conv2d input {h}x{w} smaller than kernel {kh}x{kw}")
    _expect(bias.shape == (cout,), f"conv2d bias must have shape ({cout},), got {bias.shape}")
    ho, wo = h - kh + 1, w - kw + 1
    cols = sliding_window_view(x, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = np.ascontiguousarray(cols).reshape(b * ho * wo, cin * kh * kw)
    out = cols @ kernel.reshape(cout, -1).T
    out += bias
    out = np.ascontiguousarray(out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))
    return out, (cols, kernel, x.shape)


def conv2d_backward(grad: np.ndarray, cache, input_grad: bool = True):
    """Returns ``(dx, dkernel, dbias)``; ``dx`` is None when ``input_grad`` is False."""
    cols, kernel, xshape = cache
    b, c, h, w = xshape
    cout, cin, kh, kw = kernel.shape
    ho, wo = grad.shape[2], grad.shape[3]
    gm = grad.transpose(0, 2, 3, 1).reshape(-1, cout)
    dk = (gm.T @ cols).reshape(kernel.shape)
    db = gm.sum(axis=0)
    if not input_grad:
        return None, dk, db
    dcols = (gm @ kernel.reshape(cout, -1)).reshape(b, ho, wo, cin, kh, kw)
    dx = np.zeros(xshape)
    for u in range(kh):
        for v in range(kw):
            dx[:, :, u:u + ho, v:v + wo] += dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    return dx, dk, db


# --------------------------------------------------------------------------
# pooling / activation
# --------------------------------------------------------------------------

def maxpool2x2(x: np.ndarray):
    _expect(x.ndim == 4, f"maxpool2x2 input must be 4-D, got shape {x.shape}")
    h, w = x.shape[2], x.shape[3]
    _expect(h % 2 == 0 and w % 2 == 0, f"maxpool2x2 needs even extents, got {h}x{w}")
    # row-major block order; strict '>' keeps the first position on ties
    quads = (x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])
    out = quads[0].copy()
    arg = np.zeros(out.shape, dtype=np.int8)
    for k in (1, 2, 3):
        better = quads[k] > out
        np.copyto(out, quads[k], where=better)
        arg[better] = k
    return out, (arg, x.shape)


def maxpool2x2_backward(grad: np.ndarray, cache):
    arg, xshape = cache
    dx = np.zeros(xshape)
    dx[:, :, 0::2, 0::2] = np.where(arg == 0, grad, 0.0)
    dx[:, :, 0::2, 1::2] = np.where(arg == 1, grad, 0.0)
    dx[:, :, 1::2, 0::2] = np.where(arg == 2, grad, 0.0)
    dx[:, :, 1::2, 1::2] = np.where(arg == 3, grad, 0.0)
    return dx


def relu(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(grad: np.ndarray, mask: np.ndarray):
    return np.where(mask, grad, 0.0)


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

@dataclass
class RunningStats:
    """Per-channel running mean/variance; ``None`` until the first train-mode batch."""

    channels: int
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    momentum: float = BN_MOMENTUM

    @property
    def initialized(self) -> bool:
        return self.mean is not None

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        if self.mean is None:
            self.mean = np.zeros(self.channels)
            self.var = np.ones(self.channels)
        self.mean = self.momentum * self.mean + (1 - self.momentum) * mean
        self.var = self.momentum * self.var + (1 - self.momentum) * var

    def reset(self) -> None:
        self.mean = None
        self.var = None


def _bn_axes(x: np.ndarray):
    return (0,) + tuple(range(2, x.ndim))


def _bn_shape(x: np.ndarray):
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def batchnorm(x, gamma, beta, mode="train", running: RunningStats | None = None,
              update_running: bool = True):
    """Per-channel batch normalization over every axis except axis 1.

    In ``train`` mode the batch statistics normalize ``x`` and, if
    ``update_running``, are folded into ``running``. In ``infer`` mode the
    running statistics are used and must already exist.
    """
    _expect(x.ndim >= 2 and x.shape[1] == gamma.shape[0] == beta.shape[0],
            f"batchnorm channel mismatch: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    shp = _bn_shape(x)
    if mode == "train":
        axes = _bn_axes(x)
        n = x.size // x.shape[1]
        if n < 2:
            raise ShapeError("batchnorm in train mode needs at least 2 values per channel")
        mean = x.mean(axis=axes)
        xc = x - mean.reshape(shp)
        var = np.mean(xc * xc, axis=axes)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv_std.reshape(shp)
        if running is not None and update_running:
            running.update(mean, var)
    elif mode == "infer":
        if running is None or not running.initialized:
            raise RuntimeError("batchnorm infer mode requires initialized running statistics")
        inv_std = 1.0 / np.sqrt(running.var + BN_EPS)
        xhat = (x - running.mean.reshape(shp)) * inv_std.reshape(shp)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    out = xhat * gamma.reshape(shp) + beta.reshape(shp)
    return out, (mode, xhat, inv_std, gamma)


def batchnorm_backward(grad, cache):
    """Returns ``(dx, dgamma, dbeta)``; train mode differentiates through the batch statistics."""
    mode, xhat, inv_std, gamma = cache
    shp = _bn_shape(grad)
    axes = _bn_axes(grad)
    dgamma = np.sum(grad * xhat, axis=axes)
    dbeta = grad.sum(axis=axes)
    scale = (gamma * inv_std).reshape(shp)
    if mode == "infer":
        return grad * scale, dgamma, dbeta
    n = grad.size // grad.shape[1]
    dx = scale * (grad - (dbeta / n).reshape(shp) - xhat * (dgamma / n).reshape(shp))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# dense layers and loss
# --------------------------------------------------------------------------

def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    _expect(x.ndim == 2, f"fully_connected input must be 2-D [B,N], got {x.shape}")
    _expect(weight.ndim == 2 and weight.shape[1] == x.shape[1],
            f"fully_connected weight {weight.shape} does not accept input width {x.shape[1]}")
    _expect(bias.shape == (weight.shape[0],),
            f"fully_connected bias must have shape ({weight.shape[0]},), got {bias.shape}")
    return x @ weight.T + bias, (x, weight)


def fully_connected_backward(grad: np.ndarray, cache):
    x, weight = cache
    return grad @ weight, grad.T @ x, grad.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels):
    """Mean cross-entropy over the batch; returns ``(loss, probabilities)``."""
    labels = np.asarray(labels)
    _expect(logits.ndim == 2 and labels.shape == (logits.shape[0],),
            f"logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.mean(logsum - z[rows, labels]))
    return loss, np.exp(z - logsum[:, None])


def softmax_cross_entropy_backward(probabilities: np.ndarray, labels) -> np.ndarray:
    g = probabilities.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


# --------------------------------------------------------------------------
# finite-difference verification
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_relative_error: float
    per_array: dict
    probes: int
    excluded: int

    def passed(self, tolerance: float) -> bool:
        return self.max_relative_error < tolerance


def gradient_check(loss_fn: Callable[[], float], arrays: dict, analytic: dict, *,
                   h: float = 1e-5, max_probes: int | None = 30, seed: int = 0,
                   floor: float = 1e-5, kink_tol: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients against central differences of ``loss_fn``.

    ``arrays`` maps names to the live arrays ``loss_fn`` reads (perturbed in
    place and restored); ``analytic`` holds the matching gradients. Up to
    ``max_probes`` random entries per array are probed. A probe whose one-sided
    slopes disagree beyond ``kink_tol`` straddles a ReLU/max-pool kink and is
    excluded rather than scored.
    """
    rng = np.random.default_rng(seed)
    per_array = {}
    probes = excluded = 0
    worst = 0.0
    f0 = loss_fn()
    for name, arr in arrays.items():
        grad = analytic[name]
        if not arr.flags.c_contiguous:
            raise ValueError(f"array {name!r} must be C-contiguous for in-place probing")
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = rng.choice(flat.size, size=max_probes, replace=False)
        err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), floor) and abs(fwd - bwd) > 1e-7:
                excluded += 1
                continue
            num = (fp - fm) / (2 * h)
            a = grad.reshape(-1)[i]
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            err = max(err, rel)
            probes += 1
        per_array[name] = err
        worst = max(worst, err)
    return GradCheckReport(worst, per_array, probes, excluded)
