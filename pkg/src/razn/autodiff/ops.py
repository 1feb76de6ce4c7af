"""Differentiable operations.

Every op takes and returns :class:`Tensor` and preserves the input dtype.
Layouts are NCHW throughout. Convolution is im2col + GEMM; the backward pass
scatters column gradients back with one strided add per kernel tap.
"""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, DegenerateBatchError, ValidationError
from .tensor import Tensor, as_tensor, make_result

# MAC tally used to cross-check the analytic FLOP counter against real forwards.
_mac_log: list[tuple[str, int]] | None = None


@contextlib.contextmanager
def record_macs() -> Iterator[list[tuple[str, int]]]:
    """Collect ``(kind, macs)`` for every op executed inside the block."""
    global _mac_log
    prev = _mac_log
    _mac_log = []
    try:
        yield _mac_log
    finally:
        _mac_log = prev


def _tally(kind: str, macs: int) -> None:
    if _mac_log is not None:
        _mac_log.append((kind, int(macs)))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor):
        b = _lift(b, a)
    else:
        a = _lift(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return make_result(out, (x,), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_result(out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.sum() / n, dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward)


def _expit(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _expit(np.asarray(x.data))
    s = np.asarray(s, dtype=x.dtype)

    def backward(g):
        return (g * s * (1 - s),)

    return make_result(s, (x,), backward)


# ------------------------------------------------------------------- conv


def conv_output_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``weight[K,C,kh,kw]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    N, C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ConfigError(f"conv2d channel mismatch: input has {C}, kernel expects {Cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d kernel must be odd-sized, got {kh}x{kw}")
    if dilation < 1 or stride < 1:
        raise ConfigError("conv2d stride and dilation must be >= 1")
    Ho = conv_output_size(H, kh, stride, pad, dilation)
    Wo = conv_output_size(W, kw, stride, pad, dilation)
    if Ho < 1 or Wo < 1:
        raise ConfigError(f"conv2d output would be empty for input {H}x{W}")

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, :, ::stride, ::stride][:, :, :Ho, :Wo].transpose(0, 2, 3, 1))
        cols = cols.reshape(N * Ho * Wo, C)
    else:
        ekh, ekw = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
        win = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :Ho, :Wo]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(K, -1)
    # one GEMM per image keeps each image's result independent of its batch position
    out = np.matmul(cols.reshape(N, Ho * Wo, -1), wmat.T)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, K).transpose(0, 3, 1, 2))
    _tally("conv", N * K * C * kh * kw * Ho * Wo)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, K)
        dw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(N, Ho, Wo, C, kh, kw)
            dxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i in range(kh):
                hs = i * dilation
                for j in range(kw):
                    ws = j * dilation
                    dxp[:, :, hs : hs + stride * (Ho - 1) + 1 : stride, ws : ws + stride * (Wo - 1) + 1 : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    return make_result(out, parents, backward)


# -------------------------------------------------------------- batchnorm


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place as ``momentum * old + (1 - momentum) * new``.
    """
    N, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ConfigError(f"batchnorm2d affine params must have shape ({C},)")
    xd = x.data
    dt = xd.dtype
    g4 = gamma.data.reshape(1, C, 1, 1)
    _tally("bn", N * C * H * W)
    if training:
        M = N * H * W
        if M == 1:
            raise DegenerateBatchError("batchnorm2d in training mode needs more than one value per channel")
        mu = xd.mean(axis=(0, 2, 3), dtype=dt)
        xc = xd - mu.reshape(1, C, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3), dtype=dt)
        inv = (1.0 / np.sqrt(var + eps)).astype(dt)
        xhat = xc * inv.reshape(1, C, 1, 1)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (M / (M - 1))
        out = xhat * g4 + beta.data.reshape(1, C, 1, 1)

        def backward(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dx = None
            if x.requires_grad:
                dxhat = g * g4
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
                dx = (inv.reshape(1, C, 1, 1) / M) * (M * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta

    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(dt)
        xhat = (xd - running_mean.reshape(1, C, 1, 1).astype(dt)) * inv.reshape(1, C, 1, 1)
        out = xhat * g4 + beta.data.reshape(1, C, 1, 1)

        def backward(g):
            dx = g * (g4 * inv.reshape(1, C, 1, 1)) if x.requires_grad else None
            return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(out.astype(dt, copy=False), (x, gamma, beta), backward)


# ------------------------------------------------------------------ pooling


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    N, C, H, W = x.shape
    Ho = conv_output_size(H, kernel, stride, pad, 1)
    Wo = conv_output_size(W, kernel, stride, pad, 1)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(N, C, Ho, Wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kernel):
            for j in range(kernel):
                hit = idx == i * kernel + j
                dxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += g * hit
        return (dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp,)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    N, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to((g / (H * W)).reshape(N, C, 1, 1), x.shape).astype(x.dtype),)

    return make_result(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[N,C] @ weight[K,C].T + bias[K]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ConfigError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = np.matmul(x.data[:, None, :], weight.data.T)[:, 0]
    if bias is not None:
        out = out + bias.data
    _tally("linear", x.shape[0] * weight.shape[0] * weight.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        dx = g @ weight.data
        dw = g.T @ x.data
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    return make_result(out, parents, backward)


# ------------------------------------------------------------------ resize


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` matrix for half-pixel linear resampling.

    Source coordinate for output index ``i`` is ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped to ``[0, n_in - 1]``.
    """
    A = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    rows = np.arange(n_out)
    np.add.at(A, (rows, i0), 1.0 - w1)
    np.add.at(A, (rows, i1), w1)
    return A.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ConfigError("bilinear_resize target size must be positive")
    N, C, H, W = x.shape
    if (H, W) == (out_h, out_w):
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    Ah = interp_matrix(H, out_h, x.dtype)
    Aw = interp_matrix(W, out_w, x.dtype)
    out = Ah @ (x.data @ Aw.T)
    _tally("resize", 4 * N * C * out_h * out_w)

    def backward(g):
        return ((Ah.T @ g) @ Aw,)

    return make_result(np.ascontiguousarray(out), (x,), backward)


# -------------------------------------------------------------------- loss


def one_hot(mask: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``[N,H,W]`` integer mask to ``[N,C,H,W]`` one-hot."""
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise ValidationError(f"label indices must lie in [0, {num_classes})")
    oh = np.zeros((mask.shape[0], num_classes) + mask.shape[1:], dtype=dtype)
    np.put_along_axis(oh, mask[:, None].astype(np.int64), 1, axis=1)
    return oh


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_one_hot(labels: np.ndarray) -> None:
    binary = (labels == 0) | (labels == 1)
    if not binary.all() or not (labels.sum(axis=1) == 1).all():
        raise ValidationError("labels must be one-hot along the class axis")


def softmax_cross_entropy_map(logits: Tensor, labels, weights=None) -> Tensor:
    """Pixel-averaged softmax cross-entropy.

    ``labels`` is one-hot ``[N,C,H,W]``. Each image contributes its mean loss
    over ``H*W`` pixels; images are combined with ``weights`` (default ``1/N``).
    """
    labels = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if labels.shape != logits.shape:
        raise ValidationError(f"labels shape {labels.shape} != logits shape {logits.shape}")
    _check_one_hot(labels)
    N, C, H, W = logits.shape
    dt = logits.dtype
    w = np.full(N, 1.0 / N) if weights is None else np.asarray(weights, dtype=np.float64)
    logp = _log_softmax(logits.data)
    per_image = -(labels * logp).sum(axis=(1, 2, 3)) / (H * W)
    out = np.asarray((w * per_image).sum(), dtype=dt)

    def backward(g):
        scale = (g * w / (H * W)).astype(dt).reshape(N, 1, 1, 1)
        return ((np.exp(logp) - labels) * scale,)

    return make_result(out, (logits,), backward)


def cross_entropy_per_image(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-image pixel-mean cross-entropy from raw arrays (no graph)."""
    logp = _log_softmax(np.asarray(logits, dtype=np.float64))
    picked = np.take_along_axis(logp, np.asarray(mask)[:, None].astype(np.int64), axis=1)[:, 0]
    return -picked.mean(axis=(1, 2))
