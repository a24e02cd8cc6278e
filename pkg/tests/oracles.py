"""Shared independent oracles: finite differences and naive reference math.

Everything here is deliberately dumb and slow; tests compare the package's
fast paths against these.
"""

from __future__ import annotations

import numpy as np

from gesturelab import tensor as gt


def fd_gradcheck(build, tensors, h=1e-3, tol=1e-3):
    """Central finite differences against the tape's analytic gradients.

    `build()` must construct the scalar loss from `tensors` (float64 leaves
    with requires_grad) from scratch on every call. Returns the worst
    relative error over all checked tensors.
    """
    loss = build()
    gt.backward(loss)
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, g in zip(tensors, analytic):
        fd = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(build().data)
            flat[i] = orig - h
            dn = float(build().data)
            flat[i] = orig
            fd_flat[i] = (up - dn) / (2 * h)
        scale = max(np.abs(fd).max(), np.abs(g).max(), 1e-8)
        worst = max(worst, np.abs(g - fd).max() / scale)
        t.zero_grad()
    return worst


def naive_attention(x, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Per-position softmax(Q Kᵀ / sqrt(d_h)) V, one head at a time."""
    T, d = x.shape
    dh = d // heads
    q = x @ wq.T + bq
    k = x @ wk.T + bk
    v = x @ wv.T + bv
    out = np.zeros_like(x)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        w = e / e.sum(axis=-1, keepdims=True)
        out[:, sl] = w @ v[:, sl]
    return out @ wo.T + bo


def naive_layernorm(x, gain, offset, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + offset


def naive_conv1d(x, kernel, bias, stride=1, padding=0):
    """Direct sliding-window cross-correlation, x (c_in, L)."""
    c_out, c_in, k = kernel.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding)))
    L = x.shape[1]
    L_out = (L - k) // stride + 1
    y = np.zeros((c_out, L_out))
    for co in range(c_out):
        for i in range(L_out):
            y[co, i] = (x[:, i * stride:i * stride + k] * kernel[co]).sum() + bias[co]
    return y


def naive_positional_encoding(T, d):
    pe = np.zeros((T, d))
    for t in range(T):
        for i in range(d):
            angle = t / 10000 ** (2 * (i // 2) / d)
            pe[t, i] = np.sin(angle) if i % 2 == 0 else np.cos(angle)
    return pe
