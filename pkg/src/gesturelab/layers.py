"""Layer primitives: linear, layer-norm, 1-D convolution, multi-head
self-attention blocks and sinusoidal position/timestep tables.

Layers are plain objects holding parameter Tensors; calling them runs the
forward pass on the autodiff tape. ``parameters()`` yields (name, tensor)
pairs for the optimizer and the checkpoint writer. Parameter shapes are
fixed at construction.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor, concat

LEAKY_SLOPE = 0.2  # negative slope for every LeakyReLU in the stack


class ConfigError(ValueError):
    """Layer hyperparameters are inconsistent."""


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal parameter container with named traversal."""

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield key, val
            elif isinstance(val, Module):
                for sub, t in val.parameters():
                    yield f"{key}.{sub}", t
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for sub, t in item.parameters():
                            yield f"{key}.{i}.{sub}", t

    def param_tensors(self) -> list[Tensor]:
        return [t for _, t in self.parameters()]

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = Tensor(_uniform(rng, (d_out, d_in), bound, dtype), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (d_out,), bound, dtype), requires_grad=True)
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear expected last dim {self.d_in}, got {x.shape}")
        lead = x.shape[:-1]
        flat = x.reshape((-1, self.d_in)) if x.ndim != 2 else x
        y = flat @ self.weight.transpose() + self.bias
        return y.reshape(lead + (self.d_out,)) if x.ndim != 2 else y


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.offset = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.eps = eps
        self.d = d

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = (var + self.eps) ** -0.5
        return centered * inv * self.gain + self.offset


class Conv1d(Module):
    """Cross-correlation over the last axis; input (c_in, L) or (B, c_in, L)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dtype=np.float32):
        bound = 1.0 / math.sqrt(c_in * kernel)
        self.weight = Tensor(_uniform(rng, (c_out, c_in, kernel), bound, dtype), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (c_out,), bound, dtype), requires_grad=True)
        self.stride, self.padding = stride, padding
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel

    def out_len(self, length: int) -> int:
        return (length + 2 * self.padding - self.kernel) // self.stride + 1

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape((1,) + x.shape)
        if x.shape[1] != self.c_in:
            raise ShapeError(f"conv1d expected {self.c_in} channels, got {x.shape}")
        B, _, L = x.shape
        L_out = self.out_len(L)
        if L_out < 1:
            raise ShapeError(f"conv1d output length {L_out} < 1 for input length {L}")
        y = _conv1d_op(x, self.weight, self.bias, self.stride, self.padding, L_out)
        return y.reshape(y.shape[1:]) if squeeze else y


def _conv1d_op(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int, L_out: int) -> Tensor:
    B, c_in, L = x.data.shape
    c_out, _, k = w.data.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    # (B, c_in, L_out, k) windows, strided view then gathered into a GEMM
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    cols = win.transpose(0, 2, 1, 3).reshape(B * L_out, c_in * k)
    wmat = w.data.reshape(c_out, c_in * k)
    out = (cols @ wmat.T + b.data).reshape(B, L_out, c_out).transpose(0, 2, 1)

    def bw(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * L_out, c_out)
        if w.requires_grad:
            w._accum((gflat.T @ cols).reshape(c_out, c_in, k))
        if b.requires_grad:
            b._accum(gflat.sum(axis=0))
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(B, L_out, c_in, k)
            gxp = np.zeros_like(xp)
            for j in range(k):
                # per-j slices are disjoint (stride between windows), so += is safe
                gxp[:, :, j:j + stride * L_out:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
            x._accum(gxp[:, :, padding:padding + L] if padding else gxp)

    return Tensor._from_op(np.ascontiguousarray(out), (x, w, b), bw, "conv1d")


def positional_encoding(T: int, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal table: even channels sin, odd channels cos."""
    if T < 1 or d < 1:
        raise ConfigError("positional encoding needs T >= 1 and d >= 1")
    pos = np.arange(T, dtype=np.float64)[:, None]
    idx = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (idx // 2) / d)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def timestep_embedding(t: np.ndarray, d: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of integer diffusion steps, shape (len(t), d)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if d % 2 == 1:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb.astype(dtype)


class MultiHeadSelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if d % heads != 0:
            raise ConfigError(f"model dim {d} not divisible by {heads} heads")
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.out = Linear(d, d, rng, dtype)
        self.d, self.heads = d, heads

    def __call__(self, x: Tensor, return_weights: bool = False):
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape((1,) + x.shape)
        B, T, d = x.shape
        h, dh = self.heads, d // self.heads

        def split(t: Tensor) -> Tensor:
            return t.reshape((B, T, h, dh)).transpose((0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        attn = scores.softmax(axis=-1)
        ctx = (attn @ v).transpose((0, 2, 1, 3)).reshape((B, T, d))
        y = self.out(ctx)
        if squeeze:
            y = y.reshape((T, d))
        if return_weights:
            w = attn.data.reshape(attn.shape[1:]) if squeeze else attn.data
            return y, w
        return y


class FeedForward(Module):
    def __init__(self, d: int, d_hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.lin1 = Linear(d, d_hidden, rng, dtype)
        self.lin2 = Linear(d_hidden, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(self.lin1(x).relu())


class TransformerBlock(Module):
    """Pre-norm self-attention + feed-forward, both with residual connections."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator, dtype=np.float32):
        self.norm1 = LayerNorm(d, dtype)
        self.attn = MultiHeadSelfAttention(d, heads, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, d_ff, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class ResidualLinearBlock(Module):
    """Linear,LN,Linear,LN with a skip; the skip is projected when widths differ."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.lin1 = Linear(d_in, d_out, rng, dtype)
        self.norm1 = LayerNorm(d_out, dtype)
        self.lin2 = Linear(d_out, d_out, rng, dtype)
        self.norm2 = LayerNorm(d_out, dtype)
        self.skip = Linear(d_in, d_out, rng, dtype) if d_in != d_out else None

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm2(self.lin2(self.norm1(self.lin1(x)).leaky_relu(LEAKY_SLOPE)))
        s = self.skip(x) if self.skip is not None else x
        return (h + s).leaky_relu(LEAKY_SLOPE)


class LinearNormAct(Module):
    """Linear,LN,LeakyReLU triple (the LIN rows of the architecture tables)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.lin = Linear(d_in, d_out, rng, dtype)
        self.norm = LayerNorm(d_out, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(self.lin(x)).leaky_relu(LEAKY_SLOPE)


class PlainResidualBlock(Module):
    """Residual MLP block without normalization.

    Layer norm cancels the input's overall magnitude; paths whose whole job
    is to carry a scale signal (the speaker embedding reads bone lengths
    off a reference frame) must not normalize it away.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.lin1 = Linear(d_in, d_out, rng, dtype)
        self.lin2 = Linear(d_out, d_out, rng, dtype)
        self.skip = Linear(d_in, d_out, rng, dtype) if d_in != d_out else None

    def __call__(self, x: Tensor) -> Tensor:
        h = self.lin2(self.lin1(x).leaky_relu(LEAKY_SLOPE))
        s = self.skip(x) if self.skip is not None else x
        return (h + s).leaky_relu(LEAKY_SLOPE)


class ModuleList(Module):
    def __init__(self, items):
        self.items = list(items)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


def unit_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors along `axis` to unit Euclidean norm."""
    sq = (x * x).sum(axis=axis, keepdims=True)
    return x * ((sq + eps) ** -0.5)


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return (d * d).mean()
