"""Layer kernels with forward and backward rules registered on the tape.

Convolution is cross-correlation (no kernel flip) over NCHW, implemented as
im2col + per-group matmul. Same-zero padding keeps H, W at stride 1 for any
dilation and yields ceil(in/stride) otherwise, with the extra pad on the
bottom/right side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, _make, dense as _dense_op


class ConfigError(ValueError):
    """A layer was parameterized outside its supported configuration space."""


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


# -- convolution -----------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Full parameterization of a square 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    padding: str = "same"  # {"same", "valid"}, same is zero-filled
    bias: bool = True

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"channels ({self.in_channels} in, {self.out_channels} out) "
                f"must divide by groups={self.groups}")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"unknown padding mode '{self.padding}'")
        if self.padding == "same" and self.kernel % 2 == 0:
            raise ConfigError(
                f"even kernel ({self.kernel}) unsupported with same-zero padding")
        if min(self.kernel, self.stride, self.dilation, self.groups) < 1:
            raise ConfigError("kernel/stride/dilation/groups must be >= 1")

    @property
    def weight_dims(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups,
                self.kernel, self.kernel)


def _pad_amounts(extent: int, k: int, stride: int, dilation: int,
                 padding: str) -> tuple:
    """(pad_begin, pad_end, out_extent) along one spatial axis."""
    span = dilation * (k - 1) + 1
    if padding == "same":
        out = -(-extent // stride)
        total = max((out - 1) * stride + span - extent, 0)
        return total // 2, total - total // 2, out
    out = (extent - span) // stride + 1
    if out < 1:
        raise ShapeError(
            f"valid padding leaves no output: extent {extent} < effective kernel {span}")
    return 0, 0, out


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int,
            oh: int, ow: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> contiguous (N, C*k*k, oh*ow) patch matrix."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp, (n, c, k, k, oh, ow),
        (sn, sc, dilation * sh, dilation * sw, stride * sh, stride * sw))
    return view.reshape(n, c * k * k, oh * ow)


def conv2d(x: Tensor, spec: ConvSpec, weights: Tensor,
           bias: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d needs rank-4 input, got {x.dims}")
    n, cin, h, w = x.dims
    if cin != spec.in_channels:
        raise ShapeError(
            f"channel mismatch: input has {cin} channels, spec expects {spec.in_channels}")
    if weights.dims != spec.weight_dims:
        raise ShapeError(
            f"weight dims {weights.dims} do not match spec {spec.weight_dims}")
    if bias is not None and bias.dims != (spec.out_channels,):
        raise ShapeError(f"bias dims {bias.dims} != ({spec.out_channels},)")

    k, s, d, g = spec.kernel, spec.stride, spec.dilation, spec.groups
    cout = spec.out_channels
    pt, pb, oh = _pad_amounts(h, k, s, d, spec.padding)
    pl, pr, ow = _pad_amounts(w, k, s, d, spec.padding)
    if pt or pb or pl or pr:
        xp = np.zeros((n, cin, h + pt + pb, w + pl + pr), dtype=np.float32)
        xp[:, :, pt:pt + h, pl:pl + w] = x.data
    else:
        xp = x.data
    if k == 1 and s == 1:
        cols = xp.reshape(n, cin, oh * ow)  # 1x1 needs no patch extraction
    else:
        cols = _im2col(xp, k, s, d, oh, ow)

    cig, cog = cin // g, cout // g
    ckk = cig * k * k
    wm = weights.data.reshape(cout, ckk)
    p = oh * ow
    if g == 1:
        out = np.matmul(wm, cols)
    else:
        out = np.empty((n, cout, p), dtype=np.float32)
        for gi in range(g):
            out[:, gi * cog:(gi + 1) * cog] = np.matmul(
                wm[gi * cog:(gi + 1) * cog], cols[:, gi * ckk:(gi + 1) * ckk])
    out = out.reshape(n, cout, oh, ow)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(grad):
        go = grad.reshape(n, cout, p)
        gw = np.empty_like(wm)
        gcols = np.empty_like(cols)
        for gi in range(g):
            rows = slice(gi * cog, (gi + 1) * cog)
            band = slice(gi * ckk, (gi + 1) * ckk)
            gw[rows] = np.matmul(go[:, rows], cols[:, band].transpose(0, 2, 1)).sum(0)
            gcols[:, band] = np.matmul(wm[rows].T, go[:, rows])
        # scatter columns back onto the padded input, tap by tap
        gxp = np.zeros_like(xp)
        gc = gcols.reshape(n, cin, k, k, oh, ow)
        for i in range(k):
            hi = slice(i * d, i * d + oh * s, s)
            for j in range(k):
                gxp[:, :, hi, j * d:j * d + ow * s:s] += gc[:, :, i, j]
        gx = gxp[:, :, pt:pt + h, pl:pl + w]
        grads = [gx, gw.reshape(weights.dims)]
        if bias is not None:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weights) if bias is None else (x, weights, bias)
    return _make(out, "conv2d", parents, backward)


class Conv2d:
    """Owns the weight/bias tensors for one ConvSpec."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel ** 2
        self.weight = Tensor(he_normal(rng, spec.weight_dims, fan_in),
                             requires_grad=True)
        self.bias = (Tensor(np.zeros(spec.out_channels, dtype=np.float32),
                            requires_grad=True) if spec.bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.spec, self.weight, self.bias)

    def parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out


# -- batch normalization -----------------------------------------------------

class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Train mode normalizes by the biased batch variance and folds the batch
    statistics into the running ones as (1 - momentum) * batch + momentum *
    running; eval mode reads the running statistics and mutates nothing.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        if eps <= 0:
            raise ConfigError("eps must be positive")
        self.channels = channels
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean,
                          self.running_var, self.momentum, self.eps, train)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean),
                ("running_var", self.running_var)]


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               momentum: float, eps: float, train: bool) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm needs rank-4 input, got {x.dims}")
    n, c, h, w = x.dims
    if c != gamma.size:
        raise ShapeError(f"channel mismatch: input has {c}, gamma has {gamma.size}")
    gam = gamma.data[None, :, None, None]

    if train:
        m = n * h * w
        if m < 2:
            raise ShapeError(f"train-mode batch_norm needs N*H*W >= 2, got {m}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased
        ivar = 1.0 / np.sqrt(var + np.float32(eps))
        xhat = (x.data - mean[None, :, None, None]) * ivar[None, :, None, None]
        running_mean[:] = (1.0 - momentum) * mean + momentum * running_mean
        running_var[:] = (1.0 - momentum) * var + momentum * running_var

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            gs = g.sum(axis=(0, 2, 3), keepdims=True)
            gxs = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (gam * ivar[None, :, None, None] / np.float32(m)) * (
                np.float32(m) * g - gs - xhat * gxs)
            return dx.astype(np.float32), dgamma, dbeta
    else:
        ivar = 1.0 / np.sqrt(running_var + np.float32(eps))
        xhat = (x.data - running_mean[None, :, None, None]) * ivar[None, :, None, None]

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            return (g * gam * ivar[None, :, None, None]).astype(np.float32), dgamma, dbeta

    out = (gam * xhat + beta.data[None, :, None, None]).astype(np.float32)
    return _make(out, "batch_norm", (x, gamma, beta), backward)


# -- pooling / regularization / loss ----------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """N x C x H x W -> N x C per-channel spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool needs rank-4 input, got {x.dims}")
    n, c, h, w = x.dims
    inv = np.float32(1.0 / (h * w))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None], (n, c, h, w)) * inv,)

    # float64 accumulation keeps the mean independent of spatial ordering
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(np.float32)
    return _make(out, "gap", (x,), backward)


def dropout(x: Tensor, rate: float, train: bool,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    keep = (rng.random(x.dims) >= rate).astype(np.float32) / np.float32(1.0 - rate)
    return _make(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-subtracted."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy needs rank-2 logits, got {logits.dims}")
    n, k = logits.dims
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (n,):
        raise ShapeError(f"labels length {lab.shape} != batch {n}")
    if lab.min() < 0 or lab.max() >= k:
        raise ShapeError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sm = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    loss = np.float32(-logp[np.arange(n), lab].mean())

    def backward(g):
        d = sm.copy()
        d[np.arange(n), lab] -= 1.0
        return (d * (g.reshape(()) / np.float32(n)),)

    return _make(loss.reshape(1), "softmax_xent", (logits,), backward)


class Dense:
    """Fully connected layer owning an (in, out) weight matrix and a bias."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(he_normal(rng, (in_features, out_features), in_features),
                             requires_grad=True)
        self.bias = (Tensor(np.zeros(out_features, dtype=np.float32),
                            requires_grad=True) if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        return _dense_op(x, self.weight, self.bias)

    def parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out
