"""Fused layer kernels with hand-written backward passes.

Layouts: images are NHWC (batch, height, width, channels); sequences are
(batch, time, features).  Everything is float64.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError
from . import ops
from .ops import _sigmoid
from .tensor import Tensor, as_tensor


def _expect(cond: bool, layer: str, detail: str) -> None:
    if not cond:
        raise DimensionError(f"{layer}: {detail}")


def linear(x, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    x = as_tensor(x)
    _expect(x.ndim >= 1 and x.shape[-1] == weight.shape[0], "linear",
            f"input axis -1 has {x.shape[-1] if x.ndim else None}, weight axis 0 has {weight.shape[0]}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return Tensor._from_op(out, parents, backward, "linear")


def embedding(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    V = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise DimensionError(f"embedding: index out of range [0, {V}) on axis 0 of the table")

    def backward(g):
        out = np.zeros(table.shape)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)
    return Tensor._from_op(table.data[idx], (table,), backward, "embedding")


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Padded (N, H+kh-1, W+kw-1, C) -> (N*H*W, kh*kw*C) patch matrix, patch order (i, j, c)."""
    N, C = xp.shape[0], xp.shape[3]
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (N, H, W, C, kh, kw)
    H, W = windows.shape[1], windows.shape[2]
    return np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(N * H * W, kh * kw * C)


def conv2d(x, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 'same' convolution.  x: (N, H, W, Cin); weight: (kh, kw, Cin, Cout)."""
    x = as_tensor(x)
    _expect(x.ndim == 4, "conv2d", f"expected 4 input axes (N, H, W, C), got shape {x.shape}")
    kh, kw, cin, cout = weight.shape
    _expect(x.shape[3] == cin, "conv2d", f"input axis 3 has {x.shape[3]} channels, kernel axis 2 has {cin}")
    _expect(kh % 2 == 1 and kw % 2 == 1, "conv2d", "kernel axes 0/1 must be odd")
    N, H, W, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = _im2col(xp, kh, kw)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(N * H * W, cout)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            # transposed convolution = correlation of the padded gradient with the flipped kernel
            gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            gcols = _im2col(gp, kh, kw)
            wflip = weight.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            gx = (gcols @ wflip).reshape(N, H, W, cin)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return Tensor._from_op(out.reshape(N, H, W, cout), parents, backward, "conv2d")


def max_pool2x2(x) -> Tensor:
    """2x2 max pool with stride 2 over axes 1, 2 of NHWC input; odd trailing rows/cols dropped.

    Ties pick the first element of the window in row-major order.
    """
    x = as_tensor(x)
    _expect(x.ndim == 4, "max_pool2x2", f"expected 4 input axes (N, H, W, C), got shape {x.shape}")
    N, H, W, C = x.shape
    Ho, Wo = H // 2, W // 2
    _expect(Ho > 0 and Wo > 0, "max_pool2x2", f"axes 1/2 must be >= 2, got {H}x{W}")
    win = (x.data[:, :2 * Ho, :2 * Wo, :].reshape(N, Ho, 2, Wo, 2, C)
           .transpose(0, 1, 3, 5, 2, 4).reshape(N, Ho, Wo, C, 4))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)
    nondiff = bool(x.requires_grad and np.any((win == out).sum(axis=-1) > 1))

    def backward(g):
        gwin = np.zeros(win.shape)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros((N, H, W, C))
        gx[:, :2 * Ho, :2 * Wo, :] = (gwin.reshape(N, Ho, Wo, C, 2, 2)
                                      .transpose(0, 1, 4, 2, 5, 3).reshape(N, 2 * Ho, 2 * Wo, C))
        return (gx,)
    return Tensor._from_op(out[..., 0], (x,), backward, "max_pool2x2", nondiff)


def _channel_view(xd: np.ndarray) -> tuple:
    """Wide 2-D view of channel-last data plus the tiling factor for per-channel vectors.

    Broadcasting a short per-channel vector against (..., C) makes numpy loop
    over C-length rows; folding the last spatial axis into the row is far faster.
    """
    C = xd.shape[-1]
    reps = xd.shape[-2] if xd.ndim >= 3 else 1
    return xd.reshape(-1, reps * C), reps


def _per_channel(row_sums: np.ndarray, C: int) -> np.ndarray:
    return row_sums.reshape(-1, C).sum(axis=0)


def batch_norm(x, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Normalise over every axis except the last (channel) one.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    x = as_tensor(x)
    C = gamma.shape[0]
    _expect(x.shape[-1] == C, "batch_norm", f"input axis -1 has {x.shape[-1]}, expected {C}")
    xd = x.data
    view, reps = _channel_view(xd)
    m = xd.size // C
    if training:
        _expect(m > 1, "batch_norm", "training mode needs more than one value per channel")
        mu = _per_channel(view.sum(axis=0), C) / m
        centered = view - np.tile(mu, reps)
        var = _per_channel((centered * centered).sum(axis=0), C) / m
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * m / (m - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
        centered = view - np.tile(mu, reps)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * np.tile(inv_std, reps)
    out = (xhat * np.tile(gamma.data, reps) + np.tile(beta.data, reps)).reshape(xd.shape)

    def backward(g):
        gv = g.reshape(view.shape)
        ggamma = _per_channel((gv * xhat).sum(axis=0), C)
        gbeta = _per_channel(gv.sum(axis=0), C)
        scale = np.tile(gamma.data * inv_std, reps)
        if training:
            proj = np.tile(ggamma / m, reps)
            shift = np.tile(gbeta / m, reps)
            gx = scale * (gv - shift - xhat * proj)
        else:
            gx = gv * scale
        return gx.reshape(xd.shape), ggamma, gbeta
    return Tensor._from_op(out, (x, gamma, beta), backward, "batch_norm")


def layer_norm(x, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    D = gamma.shape[0]
    _expect(x.shape[-1] == D, "layer_norm", f"input axis -1 has {x.shape[-1]}, expected {D}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        lead = tuple(range(xd.ndim - 1))
        dxhat = g * gamma.data
        gx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return Tensor._from_op(out, (x, gamma, beta), backward, "layer_norm")


def gru_cell(x, h, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU step with gate order (reset, update, candidate).

        r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
        z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
        n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h
    """
    x, h = as_tensor(x), as_tensor(h)
    H = w_hh.shape[0]
    _expect(x.shape[-1] == w_ih.shape[0], "gru_cell",
            f"input axis -1 has {x.shape[-1]}, W_ih axis 0 has {w_ih.shape[0]}")
    _expect(h.shape[-1] == H, "gru_cell", f"hidden axis -1 has {h.shape[-1]}, expected {H}")
    xd, hd = x.data, h.data
    gi = xd @ w_ih.data + b_ih.data
    gh = hd @ w_hh.data + b_hh.data
    r = _sigmoid(gi[:, :H] + gh[:, :H])
    z = _sigmoid(gi[:, H:2 * H] + gh[:, H:2 * H])
    ghn = gh[:, 2 * H:]
    n = np.tanh(gi[:, 2 * H:] + r * ghn)
    out = (1.0 - z) * n + z * hd

    def backward(g):
        dn_pre = g * (1.0 - z) * (1.0 - n * n)
        dz_pre = g * (hd - n) * z * (1.0 - z)
        dr_pre = dn_pre * ghn * r * (1.0 - r)
        dgi = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        gx = dgi @ w_ih.data.T if x.requires_grad else None
        gh_prev = dgh @ w_hh.data.T + g * z if h.requires_grad else None
        return (gx, gh_prev, xd.T @ dgi, hd.T @ dgh, dgi.sum(axis=0), dgh.sum(axis=0))
    return Tensor._from_op(out, (x, h, w_ih, w_hh, b_ih, b_hh), backward, "gru_cell")


def cross_entropy(logits, targets, ignore_index: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits) on the last axis."""
    logits = as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    V = logits.shape[-1]
    flat = ops.reshape(logits, (-1, V))
    _expect(flat.shape[0] == tgt.size, "cross_entropy",
            f"{flat.shape[0]} logit rows vs {tgt.size} targets")
    keep = np.ones(tgt.size, dtype=bool) if ignore_index is None else tgt != ignore_index
    rows = np.nonzero(keep)[0]
    logp = ops.log_softmax(flat, axis=-1)
    picked = ops.getitem(logp, (rows, tgt[rows]))
    return -ops.mean(picked)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 ``targets``."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    _expect(y.shape == logits.shape, "bce_with_logits", f"targets {y.shape} vs logits {logits.shape}")
    xd = logits.data
    loss = np.maximum(xd, 0.0) - xd * y + np.log1p(np.exp(-np.abs(xd)))
    n = xd.size
    return Tensor._from_op(np.asarray(loss.mean()), (logits,),
                           lambda g: (g * (_sigmoid(xd) - y) / n,), "bce_with_logits")


relu = ops.relu
log_softmax = ops.log_softmax
softmax = ops.softmax


def global_mean_pool(x, axes=(1, 2)) -> Tensor:
    return ops.mean(x, axes)


def global_max_pool(x, axes=(1, 2)) -> Tensor:
    return ops.amax(x, axes)
