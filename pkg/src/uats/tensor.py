"""Differentiable numpy building blocks for a small 2D U-Net.

Every op works on float64 arrays laid out as (batch, channel, row, column)
and comes as a ``*_forward`` / ``*_backward`` pair.  Forward returns the
output together with a cache; backward takes the upstream gradient and the
cache and returns gradients for the inputs and parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConfigurationError(ValueError):
    """Raised for inconsistent shapes or invalid layer settings."""


class TrainingError(RuntimeError):
    """Raised when optimisation produces non-finite values."""


def as_grid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ConfigurationError(f"expected a 4-axis grid (B, C, H, W), got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d_forward(x, weight, bias):
    """Same-padded cross-correlation with stride 1.

    ``weight`` has shape (out_c, in_c, kh, kw) with odd kernel extents.
    """
    x = as_grid(x)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    out_c, in_c, kh, kw = weight.shape
    if x.shape[1] != in_c:
        raise ConfigurationError(
            f"input shape {x.shape} has {x.shape[1]} channels but kernel shape "
            f"{weight.shape} expects {in_c}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"kernel extents must be odd, got kernel shape {weight.shape}")
    if bias.shape != (out_c,):
        raise ConfigurationError(f"bias shape {bias.shape} does not match kernel shape {weight.shape}")
    b, _, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    if kh == 1 and kw == 1:
        cols = x.transpose(0, 2, 3, 1).reshape(b * h * w, in_c)
    else:
        # channels-last gather, one contiguous copy per kernel offset
        xp = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        cols = np.empty((b, h, w, kh, kw, in_c))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
        cols = cols.reshape(b * h * w, kh * kw * in_c)
    wmat = weight.transpose(0, 2, 3, 1).reshape(out_c, -1)
    out = cols @ wmat.T + bias
    out = out.reshape(b, h, w, out_c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, weight)


def conv2d_backward(dout, cache):
    x_shape, cols, weight = cache
    b, in_c, h, w = x_shape
    out_c, _, kh, kw = weight.shape
    dflat = dout.transpose(0, 2, 3, 1).reshape(b * h * w, out_c)
    dweight = np.ascontiguousarray((dflat.T @ cols).reshape(out_c, kh, kw, in_c).transpose(0, 3, 1, 2))
    dbias = dflat.sum(axis=0)
    if kh == 1 and kw == 1:
        dcols = dflat @ weight.reshape(out_c, -1)
        dx = dcols.reshape(b, h, w, in_c).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), dweight, dbias
    if in_c >= 4:
        # input gradient = same-padded correlation with the flipped, transposed kernel
        flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx, _ = conv2d_forward(dout, flipped, np.zeros(in_c))
        return dx, dweight, dbias
    dcols = dflat @ weight.transpose(0, 2, 3, 1).reshape(out_c, -1)
    ph, pw = kh // 2, kw // 2
    dcols = dcols.reshape(b, h, w, kh, kw, in_c)
    dxp = np.zeros((b, h + 2 * ph, w + 2 * pw, in_c))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
    return np.ascontiguousarray(dxp[:, ph:ph + h, pw:pw + w, :].transpose(0, 3, 1, 2)), dweight, dbias


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm2d_forward(x, gamma, beta, running: RunningStats, train: bool,
                         momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalisation over (batch, row, column).

    In train mode the batch statistics are used and ``running`` is updated in
    place as ``(1 - momentum) * running + momentum * batch``.
    """
    x = as_grid(x)
    c = x.shape[1]
    if np.shape(gamma) != (c,) or np.shape(beta) != (c,):
        raise ConfigurationError(
            f"gamma/beta shapes {np.shape(gamma)}, {np.shape(beta)} do not match {c} channels"
        )
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    if x.shape[0] == 0:
        raise ConfigurationError("batch norm needs a non-empty batch")
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * m / max(m - 1, 1)
        running.mean *= 1.0 - momentum
        running.mean += momentum * mean
        running.var *= 1.0 - momentum
        running.var += momentum * unbiased
    else:
        mean, var = running.mean, running.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, train)


def batch_norm2d_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if not train:
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    dx = (
        dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True) / m
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True) / m
    ) * inv_std[None, :, None, None]
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# pointwise and resampling ops
# ---------------------------------------------------------------------------

def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dout, mask):
    return np.where(mask, dout, 0.0)


def max_pool2d_forward(x):
    """2x2 max pooling with stride 2."""
    x = as_grid(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"max pooling needs even spatial extents, got {h}x{w}")
    # window elements in row-major order: (0,0), (0,1), (1,0), (1,1)
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)  # first maximum on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def max_pool2d_backward(dout, cache):
    shape, arg = cache
    b, c, h, w = shape
    dwin = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dx = dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
    return dx


def upsample2d_forward(x):
    """Nearest-neighbour upsampling by a factor of two."""
    x = as_grid(x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2d_backward(dout):
    b, c, h, w = dout.shape
    return dout.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def dropout_forward(x, rate: float, rng: np.random.Generator | int | None, train: bool):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` so eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not train or rate == 0.0:
        return x, None
    rng = np.random.default_rng(rng)
    keep = rng.random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return x * scale, scale


def dropout_backward(dout, scale):
    if scale is None:
        return dout
    return dout * scale


def softmax_channelwise(logits):
    """Channel-axis softmax in max-shifted form."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(dprob, prob):
    """Vector-Jacobian product of the channel softmax given its output."""
    return prob * (dprob - (dprob * prob).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in (0, 1)")


def adam_update(state: AdamState, params: dict, grads: dict) -> None:
    """One bias-corrected Adam step, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if params[name].shape != g.shape:
            raise ConfigurationError(
                f"gradient shape {g.shape} does not match parameter {name!r} shape {params[name].shape}"
            )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def check_gradients(fn, x, h: float = 1e-5, floor: float = 1e-3) -> float:
    """Compare an analytic gradient against central finite differences.

    ``fn(x)`` must return ``(value, grad)`` with ``grad`` shaped like ``x``.
    Every coordinate is perturbed by ``+-h``.  The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor * max|a|)`` so coordinates
    whose true gradient is negligible are judged against the gradient scale.
    Returns the maximum over coordinates.
    """
    x = np.array(x, dtype=np.float64)
    _, analytic = fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ConfigurationError(f"gradient shape {analytic.shape} != input shape {x.shape}")
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x.copy())[0]
        flat[i] = orig - h
        fm = fn(x.copy())[0]
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
    denom = np.where(denom == 0.0, 1.0, denom)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))
