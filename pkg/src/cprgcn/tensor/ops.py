"""Differentiable layers built on the engine: 3D conv, max-pool, LSTM cell, loss."""

from __future__ import annotations

import numpy as np

from . import kernels
from .engine import DimensionError, Tensor, _as_tensor

__all__ = [
    "UnsupportedConfigurationError",
    "InvalidLabelError",
    "conv3d",
    "maxpool3d",
    "lstm_cell",
    "softmax_cross_entropy",
    "log_softmax",
]


class UnsupportedConfigurationError(ValueError):
    pass


class InvalidLabelError(ValueError):
    pass


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x.data[None], True
    if x.ndim == 5:
        return x.data, False
    raise DimensionError(f"expected (C,D,H,W) or (N,C,D,H,W) input, got {x.shape}")


def conv3d(x: Tensor, kernels_: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 3x3x3 cross-correlation.

    ``x`` is (C_in, D, H, W) or batched (N, C_in, D, H, W); ``kernels_`` is
    (C_out, C_in, 3, 3, 3) and ``bias`` is (C_out,).
    """
    x, kernels_, bias = _as_tensor(x), _as_tensor(kernels_), _as_tensor(bias)
    if kernels_.ndim != 5 or kernels_.shape[2:] != (3, 3, 3):
        raise UnsupportedConfigurationError(
            f"only 3x3x3 kernels are supported, got kernel shape {kernels_.shape}")
    xb, squeeze = _batched(x)
    if xb.shape[1] != kernels_.shape[1]:
        raise DimensionError(
            f"conv3d: input channels {xb.shape[1]} do not match kernels {kernels_.shape}")
    if bias.shape != (kernels_.shape[0],):
        raise DimensionError(f"conv3d: bias shape {bias.shape} for kernels {kernels_.shape}")
    if min(xb.shape[2:]) < 1:
        raise DimensionError(f"conv3d: spatial extents must be positive, got {xb.shape[2:]}")
    xb = np.ascontiguousarray(xb)
    w = np.ascontiguousarray(kernels_.data)
    out = kernels.backend.conv3d_forward(xb, w, np.ascontiguousarray(bias.data))

    def backward(g):
        gb5 = np.ascontiguousarray(g[None] if squeeze else g)
        gx, gw, gbias = kernels.backend.conv3d_backward(xb, w, gb5, x.requires_grad)
        if x.requires_grad:
            x._accumulate(gx[0] if squeeze else gx)
        kernels_._accumulate(gw)
        bias._accumulate(gbias)

    return Tensor._make(out[0] if squeeze else out, (x, kernels_, bias), "conv3d", backward)


def maxpool3d(x: Tensor) -> Tensor:
    """Non-overlapping 2x2x2 max-pool; ties route the gradient to the first voxel in scan order."""
    x = _as_tensor(x)
    xb, squeeze = _batched(x)
    if any(e % 2 for e in xb.shape[2:]):
        raise DimensionError(f"maxpool3d: spatial extents must be even, got {xb.shape[2:]}")
    xb = np.ascontiguousarray(xb)
    out, arg = kernels.backend.maxpool3d_forward(xb)
    shape = xb.shape

    def backward(g):
        gb5 = np.ascontiguousarray(g[None] if squeeze else g)
        gx = kernels.backend.maxpool3d_backward(gb5, arg, shape)
        x._accumulate(gx[0] if squeeze else gx)

    return Tensor._make(out[0] if squeeze else out, (x,), "maxpool3d", backward)


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w_ih: Tensor, w_hh: Tensor,
              b: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate order (input, forget, cell, output).

    Shapes: ``x`` (B, d) or (d,), states (B, k) or (k,), ``w_ih`` (d, 4k),
    ``w_hh`` (k, 4k), ``b`` (4k,).  Rows where the boolean ``mask`` is False
    keep their previous state unchanged (used for padded time steps).
    """
    x, h_prev, c_prev = _as_tensor(x), _as_tensor(h_prev), _as_tensor(c_prev)
    w_ih, w_hh, b = _as_tensor(w_ih), _as_tensor(w_hh), _as_tensor(b)
    vector = x.ndim == 1
    xd = x.data[None] if vector else x.data
    hd = h_prev.data[None] if vector else h_prev.data
    cd = c_prev.data[None] if vector else c_prev.data
    k = hd.shape[-1]
    if (w_ih.shape != (xd.shape[-1], 4 * k) or w_hh.shape != (k, 4 * k) or b.shape != (4 * k,)
            or cd.shape != hd.shape or xd.shape[0] != hd.shape[0]):
        raise DimensionError(
            f"lstm_cell: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}, "
            f"w_ih {w_ih.shape}, w_hh {w_hh.shape}, b {b.shape}")

    z = xd @ w_ih.data + hd @ w_hh.data + b.data
    i = _sigmoid(z[:, :k])
    f = _sigmoid(z[:, k:2 * k])
    gg = np.tanh(z[:, 2 * k:3 * k])
    o = _sigmoid(z[:, 3 * k:])
    c = f * cd + i * gg
    tc = np.tanh(c)
    h = o * tc
    if mask is not None:
        m = np.asarray(mask, dtype=bool).reshape(-1, 1)
        h = np.where(m, h, hd)
        c = np.where(m, c, cd)
    else:
        m = None
    hc = np.concatenate([h, c], axis=1)

    def backward(g):
        gh, gc = g[:, :k], g[:, k:]
        if m is not None:
            gh_new, gc_new = gh * m, gc * m
            gh_keep, gc_keep = gh * ~m, gc * ~m
        else:
            gh_new, gc_new = gh, gc
            gh_keep = gc_keep = 0.0
        gc_total = gc_new + gh_new * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gc_total * gg * i * (1.0 - i),
            gc_total * cd * f * (1.0 - f),
            gc_total * i * (1.0 - gg * gg),
            gh_new * tc * o * (1.0 - o),
        ], axis=1)
        if x.requires_grad:
            gx = dz @ w_ih.data.T
            x._accumulate(gx[0] if vector else gx)
        if h_prev.requires_grad:
            ghp = dz @ w_hh.data.T + gh_keep
            h_prev._accumulate(ghp[0] if vector else ghp)
        if c_prev.requires_grad:
            gcp = gc_total * f + gc_keep
            c_prev._accumulate(gcp[0] if vector else gcp)
        w_ih._accumulate(xd.T @ dz)
        w_hh._accumulate(hd.T @ dz)
        b._accumulate(dz.sum(axis=0))

    hc_t = Tensor._make(hc[0] if vector else hc, (x, h_prev, c_prev, w_ih, w_hh, b),
                        "lstm_cell", backward)
    if vector:
        return hc_t[:k], hc_t[k:]
    return hc_t[:, :k], hc_t[:, k:]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax of ``logits``.

    ``weights`` optionally gives a per-row weight; the result is then the
    weighted mean.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects (n, C) logits, got {logits.shape}")
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"{n} logit rows but {labels.shape} labels")
    if not np.issubdtype(labels.dtype, np.integer) or n and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidLabelError(f"labels must be integers in [0, {n_classes})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -(w * logp[rows, labels]).sum() / total

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        logits._accumulate(g * p * (w / total)[:, None])

    return Tensor._make(np.asarray(loss), (logits,), "cross_entropy", backward)
