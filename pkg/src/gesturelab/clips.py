"""Clip containers and fixed-window segmentation.

Sequences are cut into overlapping windows of `frames` poses (default 34 at
15 fps) with a fixed stride (default 10), each paired with the aligned span
of 16 kHz mono audio.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FPS = 15
SAMPLE_RATE = 16000
CLIP_FRAMES = 34
CLIP_STRIDE = 10


def audio_samples_for_frames(frames: int, fps: int = FPS,
                             sample_rate: int = SAMPLE_RATE) -> int:
    return int(round(frames * sample_rate / fps))


@dataclass
class GestureClip:
    clip_id: str
    speaker: str
    unit_dirs: np.ndarray    # (T, J-1, 3) float32, unit norm per bone
    real_dirs: np.ndarray    # (T, J-1, 3) float32, bone lengths kept
    root: np.ndarray         # (T, 3) float32 root trajectory
    fps: int = FPS

    @property
    def frames(self) -> int:
        return self.unit_dirs.shape[0]

    @property
    def feature_width(self) -> int:
        return self.unit_dirs.shape[1] * 3

    def features(self) -> np.ndarray:
        """Model-facing features: flattened unit directions, (T, 3*(J-1))."""
        return self.unit_dirs.reshape(self.frames, -1)

    def real_features(self) -> np.ndarray:
        return self.real_dirs.reshape(self.frames, -1)


@dataclass
class AudioClip:
    clip_id: str
    samples: np.ndarray      # (n,) float32 in [-1, 1]
    beat_times: np.ndarray   # seconds from clip start, float64
    sample_rate: int = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def segment_clips(unit_dirs: np.ndarray, real_dirs: np.ndarray,
                  root: np.ndarray, audio: np.ndarray,
                  beat_times: np.ndarray, speaker: str,
                  frames: int = CLIP_FRAMES, stride: int = CLIP_STRIDE,
                  fps: int = FPS, sample_rate: int = SAMPLE_RATE,
                  id_prefix: str = "") -> tuple[list[GestureClip], list[AudioClip]]:
    """Cut one sequence into aligned (gesture, audio) clip pairs."""
    total = unit_dirs.shape[0]
    if total < frames:
        return [], []
    n_samp = audio_samples_for_frames(frames, fps, sample_rate)
    gestures, audios = [], []
    k = 0
    for start in range(0, total - frames + 1, stride):
        clip_id = f"{id_prefix}{k:04d}"
        sl = slice(start, start + frames)
        a0 = int(round(start * sample_rate / fps))
        seg = audio[a0:a0 + n_samp]
        if len(seg) < n_samp:
            seg = np.concatenate([seg, np.zeros(n_samp - len(seg), dtype=seg.dtype)])
        t0, t1 = start / fps, (start + frames) / fps
        # keep only beats whose +-1-frame neighbourhood lies inside the clip
        keep = (beat_times >= t0 + 1.0 / fps) & (beat_times < t1 - 2.0 / fps)
        local_beats = beat_times[keep] - t0
        gestures.append(GestureClip(
            clip_id=clip_id, speaker=speaker,
            unit_dirs=unit_dirs[sl].astype(np.float32),
            real_dirs=real_dirs[sl].astype(np.float32),
            root=root[sl].astype(np.float32), fps=fps))
        audios.append(AudioClip(
            clip_id=clip_id, samples=seg.astype(np.float32),
            beat_times=local_beats.astype(np.float64), sample_rate=sample_rate))
        k += 1
    return gestures, audios
