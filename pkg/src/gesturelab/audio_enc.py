"""Raw-waveform encoder: four strided 1-D convolutions, one row per frame.

The layer geometry is fixed so a 34-frame clip's audio (36267 samples at
16 kHz) lands on exactly 34 feature rows:

    (1, 36267) -k15 s5 p1600-> (c1, 7891) -k15 s6-> (c2, 1313)
              -k15 s6-> (c3, 217) -k15 s6-> (c4, 34)

Each conv is followed by layer norm over channels and a LeakyReLU, except
the last, which stays linear so downstream consumers see an unsquashed
feature scale.
"""

from __future__ import annotations

import numpy as np

from . import tensor as gt
from .config import RunConfig
from .layers import LEAKY_SLOPE, Conv1d, LayerNorm, Module, ModuleList
from .tensor import ShapeError, Tensor

# (kernel, stride, padding) per layer; realizes the shape ladder above
CONV_GEOMETRY = ((15, 5, 1600), (15, 6, 0), (15, 6, 0), (15, 6, 0))


def frames_to_samples(frames: int, fps: int = 15, sample_rate: int = 16000) -> int:
    return int(round(frames * sample_rate / fps))


def output_length(n_samples: int) -> int:
    L = n_samples
    for (k, s, p) in CONV_GEOMETRY:
        L = (L + 2 * p - k) // s + 1
        if L < 1:
            raise ShapeError(f"waveform too short for the conv stack ({n_samples})")
    return L


def receptive_field() -> tuple[int, int]:
    """(span in samples, stride in samples) of one output feature."""
    span, jump = 1, 1
    for (k, s, _p) in CONV_GEOMETRY:
        span += (k - 1) * jump
        jump *= s
    return span, jump


class AudioEncoder(Module):
    def __init__(self, config: RunConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(config.seed + 7)
        chans = (1,) + tuple(config.audio_channels)
        self.convs = ModuleList([
            Conv1d(chans[i], chans[i + 1], CONV_GEOMETRY[i][0], rng,
                   stride=CONV_GEOMETRY[i][1], padding=CONV_GEOMETRY[i][2],
                   dtype=dtype)
            for i in range(4)])
        self.norms = ModuleList([LayerNorm(chans[i + 1], dtype) for i in range(3)])
        self.out_dim = chans[-1]
        self.config = config
        self.dtype = dtype

    def __call__(self, wave: Tensor | np.ndarray, frames: int | None = None) -> Tensor:
        """Waveform (B, n) or (n,) -> per-frame features (B, T, d_a).

        When `frames` is given, the waveform length must match it within
        one hop (sample_rate / fps samples).
        """
        if not isinstance(wave, Tensor):
            wave = Tensor(np.asarray(wave, dtype=self.dtype))
        squeeze = wave.ndim == 1
        if squeeze:
            wave = wave.reshape(1, wave.shape[0])
        n = wave.shape[-1]
        if frames is not None:
            hop = self.config.sample_rate / self.config.fps
            want = frames_to_samples(frames, self.config.fps, self.config.sample_rate)
            if abs(n - want) > hop:
                raise ShapeError(
                    f"waveform of {n} samples does not match {frames} frames "
                    f"(expected {want} within one hop of {hop:.0f})")
        h = wave.reshape(wave.shape[0], 1, n)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < 3:
                # layer norm over channels, per time step
                h = self.norms[i](h.swapaxes(1, 2)).swapaxes(1, 2)
                h = h.leaky_relu(LEAKY_SLOPE)
        out = h.swapaxes(1, 2)         # (B, T, d_a)
        if frames is not None and out.shape[1] != frames:
            raise ShapeError(
                f"conv stack produced {out.shape[1]} rows for {frames} frames")
        return out.reshape(out.shape[1:]) if squeeze else out

    def state(self, prefix: str = "audio.") -> dict[str, np.ndarray]:
        return {prefix + n: p.data.astype(np.float32) for n, p in self.parameters()}

    def load_state(self, params: dict[str, np.ndarray], prefix: str = "audio.") -> None:
        for n, p in self.parameters():
            p.data = params[prefix + n].astype(self.dtype)
