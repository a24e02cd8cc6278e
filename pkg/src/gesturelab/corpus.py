"""Synthetic gesture corpus: beat-locked motion, click-track audio, disk IO.

Each speaker gets a scaled copy of the canonical skeleton and a set of
sequences whose joint-angle oscillations peak exactly at annotated beat
times; the paired audio carries a click at every beat over a band-limited
noise bed. Everything is deterministic in the corpus seed.

Disk layout: <root>/manifest.json, <root>/clips/<id>.bin (float32 LE:
unit dirs, real dirs, root trajectory), <root>/audio/<id>.pcm (signed
16-bit LE mono at 16 kHz).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .clips import (AudioClip, GestureClip, CLIP_FRAMES, CLIP_STRIDE, FPS,
                    SAMPLE_RATE, audio_samples_for_frames, segment_clips)
from .skeleton import Skeleton, base_skeleton

MANIFEST_VERSION = 1


class CorpusFormatError(ValueError):
    """Manifest or binary payload does not match the expected layout."""


@dataclass
class CorpusConfig:
    mode: str = "gesture"            # "gesture" (J=10) or "expressive" (J=43)
    speakers: int = 2
    clips_per_speaker: int = 40
    frames: int = CLIP_FRAMES
    stride: int = CLIP_STRIDE
    fps: int = FPS
    sample_rate: int = SAMPLE_RATE
    seed: int = 0
    tempo_range: tuple[float, float] = (1.6, 2.6)   # beats per second
    scale_range: tuple[float, float] = (0.9, 1.4)   # per-speaker bone scale
    speaker_scales: tuple[float, ...] | None = None  # overrides scale_range

    def scales(self) -> np.ndarray:
        if self.speaker_scales is not None:
            if len(self.speaker_scales) != self.speakers:
                raise ValueError("speaker_scales must list one scale per speaker")
            return np.asarray(self.speaker_scales, dtype=np.float64)
        lo, hi = self.scale_range
        if self.speakers == 1:
            return np.array([0.5 * (lo + hi)])
        return np.linspace(lo, hi, self.speakers)


@dataclass
class Corpus:
    config: CorpusConfig
    skeletons: dict[str, Skeleton]
    clips: list[GestureClip]
    audio: list[AudioClip]

    def features(self) -> np.ndarray:
        """All clips' model features stacked to (N, T, 3*(J-1)) float32."""
        return np.stack([c.features() for c in self.clips])

    def real_features(self) -> np.ndarray:
        return np.stack([c.real_features() for c in self.clips])

    def speaker_ids(self) -> list[str]:
        return [c.speaker for c in self.clips]

    def by_id(self, clip_id: str) -> tuple[GestureClip, AudioClip]:
        for g, a in zip(self.clips, self.audio):
            if g.clip_id == clip_id:
                return g, a
        raise KeyError(clip_id)


# ---------------------------------------------------------------------------
# motion synthesis

_GESTURE_REST = {
    # bone index -> (rest direction, amplitude range in radians)
    0: ((0.0, 1.0, 0.0), (0.01, 0.03)),     # spine
    1: ((0.0, 1.0, 0.0), (0.01, 0.04)),     # neck
    2: ((0.05, 1.0, 0.05), (0.02, 0.06)),   # head
    3: ((-0.97, 0.24, 0.0), (0.02, 0.06)),  # L clavicle
    4: ((-0.25, -0.93, 0.27), (0.25, 0.60)),  # L upper arm
    5: ((-0.10, -0.60, 0.79), (0.35, 0.80)),  # L forearm
    6: ((0.97, 0.24, 0.0), (0.02, 0.06)),
    7: ((0.25, -0.93, 0.27), (0.25, 0.60)),
    8: ((0.10, -0.60, 0.79), (0.35, 0.80)),
}


def _rest_directions(mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Rest unit direction and amplitude range per bone, for either tree."""
    if mode == "gesture":
        n = 9
        rest = np.zeros((n, 3))
        amp = np.zeros((n, 2))
        for j, (d, a) in _GESTURE_REST.items():
            rest[j] = d
            amp[j] = a
    elif mode == "expressive":
        skel = base_skeleton("expressive")
        n = skel.joint_count - 1
        rest = np.zeros((n, 3))
        amp = np.zeros((n, 2))
        body = {0: ((0, 1, 0), (0.01, 0.03)), 1: ((0, 1, 0), (0.01, 0.03)),
                2: ((0, 1, 0), (0.01, 0.04)), 3: ((0.05, 1, 0.05), (0.02, 0.06)),
                4: ((-0.9, 0.4, 0), (0.01, 0.04)), 5: ((-0.9, -0.3, 0.1), (0.02, 0.06)),
                6: ((-0.25, -0.93, 0.27), (0.25, 0.6)), 7: ((-0.1, -0.6, 0.79), (0.35, 0.8)),
                8: ((0.9, 0.4, 0), (0.01, 0.04)), 9: ((0.9, -0.3, 0.1), (0.02, 0.06)),
                10: ((0.25, -0.93, 0.27), (0.25, 0.6)), 11: ((0.1, -0.6, 0.79), (0.35, 0.8))}
        for j, (d, a) in body.items():
            rest[j] = d
            amp[j] = a
        # fingers fan out from each wrist, small oscillation amplitudes
        k = 12
        for side in (-1.0, 1.0):
            for f in range(5):
                spread = (f - 2) * 0.18
                tip = np.array([side * (0.3 + 0.1 * abs(spread)), -0.5 + spread, 0.8])
                for seg in range(3):
                    rest[k] = tip
                    amp[k] = (0.04, 0.20)
                    k += 1
    else:
        raise ValueError(f"unknown skeleton mode {mode!r}")
    rest /= np.linalg.norm(rest, axis=1, keepdims=True)
    return rest, amp


def synthesize_motion(rng: np.random.Generator, frames: int, mode: str,
                      fps: int = FPS,
                      tempo_range: tuple[float, float] = (1.6, 2.6),
                      ) -> tuple[np.ndarray, np.ndarray]:
    """One sequence of unit direction vectors plus its beat times.

    Every bone rotates away from its rest direction by A_j * sin(phi(t))
    inside a fixed per-bone plane, with one phase phi shared across bones.
    The mean absolute angle change between frames then peaks exactly where
    |cos(phi)| does, i.e. at phi = k*pi, and those instants are returned as
    the beat annotations. Bone lengths never enter, so two skeletons that
    share the tree produce identical unit vectors for the same draw.
    """
    rest, amp_range = _rest_directions(mode)
    n_bones = len(rest)
    tempo = rng.uniform(*tempo_range)          # beats per second
    f_osc = tempo / 2.0                        # two beats per oscillation
    phi0 = rng.uniform(0.0, 2.0 * np.pi)
    amps = rng.uniform(amp_range[:, 0], amp_range[:, 1])
    # per-bone rotation plane: random direction orthogonalized against rest
    w = rng.normal(size=(n_bones, 3))
    w -= (w * rest).sum(axis=1, keepdims=True) * rest
    u = w / np.linalg.norm(w, axis=1, keepdims=True)

    t = np.arange(frames) / fps
    phi = 2.0 * np.pi * f_osc * t + phi0
    theta = amps[None, :] * np.sin(phi)[:, None]           # (T, bones)
    dirs = (np.cos(theta)[:, :, None] * rest[None, :, :]
            + np.sin(theta)[:, :, None] * u[None, :, :])

    duration = frames / fps
    k0 = int(np.ceil(phi0 / np.pi))
    beats = []
    k = k0
    while True:
        tk = (k * np.pi - phi0) / (2.0 * np.pi * f_osc)
        if tk >= duration - 0.5 / fps:
            break
        if tk >= 0.5 / fps:
            beats.append(tk)
        k += 1
    return dirs.astype(np.float64), np.asarray(beats, dtype=np.float64)


# ---------------------------------------------------------------------------
# audio synthesis

def _fir_lowpass(x: np.ndarray, cutoff_hz: float, sample_rate: int,
                 taps: int = 63) -> np.ndarray:
    n = np.arange(taps) - (taps - 1) / 2
    h = np.sinc(2 * cutoff_hz / sample_rate * n) * np.hanning(taps)
    h /= h.sum()
    return np.convolve(x, h, mode="same")


def synthesize_audio(rng: np.random.Generator, duration: float,
                     beat_times: np.ndarray,
                     sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Click at every beat over a gently modulated noise bed, float32."""
    n = int(round(duration * sample_rate)) + 4
    audio = np.zeros(n, dtype=np.float64)

    noise = rng.normal(size=n)
    noise = _fir_lowpass(noise, 1800.0, sample_rate)
    noise /= max(noise.std(), 1e-9)
    t = np.arange(n) / sample_rate
    envelope = 0.05 + 0.05 * (0.5 + 0.5 * np.sin(2 * np.pi * 2.7 * t + rng.uniform(0, 2 * np.pi)))
    audio += noise * envelope

    n_click = int(0.020 * sample_rate)
    tau = np.arange(n_click) / sample_rate
    click = 0.7 * np.sin(2 * np.pi * 1000.0 * tau) * np.exp(-tau / 0.006)
    for tb in beat_times:
        i0 = int(round(tb * sample_rate))
        i1 = min(i0 + n_click, n)
        if i0 < n:
            audio[i0:i1] += click[: i1 - i0]

    return np.clip(audio, -0.99, 0.99).astype(np.float32)


# ---------------------------------------------------------------------------
# corpus assembly

def synthesize_corpus(config: CorpusConfig) -> Corpus:
    skel0 = base_skeleton(config.mode)
    scales = config.scales()
    root_seq = np.random.SeedSequence(config.seed)
    speaker_seqs = root_seq.spawn(config.speakers)

    skeletons: dict[str, Skeleton] = {}
    clips: list[GestureClip] = []
    audio: list[AudioClip] = []
    seq_frames = config.frames + (config.clips_per_speaker - 1) * config.stride
    duration = seq_frames / config.fps

    for s in range(config.speakers):
        speaker = f"s{s:02d}"
        skeletons[speaker] = skel0.scaled(float(scales[s]), name=speaker)
        motion_rng = np.random.Generator(np.random.PCG64(speaker_seqs[s].spawn(1)[0]))
        audio_rng = np.random.Generator(np.random.PCG64(speaker_seqs[s].spawn(2)[1]))

        unit_dirs, beat_times = synthesize_motion(
            motion_rng, seq_frames, config.mode, config.fps, config.tempo_range)
        real_dirs = unit_dirs * skeletons[speaker].bone_lengths[None, :, None]
        root = np.zeros((seq_frames, 3))
        samples = synthesize_audio(audio_rng, duration, beat_times, config.sample_rate)

        g, a = segment_clips(unit_dirs, real_dirs, root, samples, beat_times,
                             speaker, config.frames, config.stride, config.fps,
                             config.sample_rate, id_prefix=f"{speaker}_")
        clips.extend(g)
        audio.extend(a)

    return Corpus(config, skeletons, clips, audio)


def train_eval_split(corpus: Corpus, holdout_every: int = 8
                     ) -> tuple[list[int], list[int]]:
    """Deterministic index split; every k-th clip per speaker is held out."""
    train, held = [], []
    for i in range(len(corpus.clips)):
        (held if i % holdout_every == holdout_every - 1 else train).append(i)
    return train, held


# ---------------------------------------------------------------------------
# persistence

def save_corpus(corpus: Corpus, root: str | Path) -> Path:
    root = Path(root)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    (root / "audio").mkdir(parents=True, exist_ok=True)

    entries = []
    for g, a in zip(corpus.clips, corpus.audio):
        clip_file = f"clips/{g.clip_id}.bin"
        audio_file = f"audio/{g.clip_id}.pcm"
        payload = np.concatenate([
            g.unit_dirs.astype("<f4").ravel(),
            g.real_dirs.astype("<f4").ravel(),
            g.root.astype("<f4").ravel()])
        (root / clip_file).write_bytes(payload.tobytes())
        pcm = np.clip(a.samples, -1.0, 1.0)
        (root / audio_file).write_bytes((pcm * 32767.0).astype("<i2").tobytes())
        entries.append({
            "id": g.clip_id, "speaker": g.speaker, "frames": int(g.frames),
            "beat_times": [float(b) for b in a.beat_times],
            "clip_file": clip_file, "audio_file": audio_file})

    manifest = {
        "format_version": MANIFEST_VERSION,
        "mode": corpus.config.mode,
        "fps": corpus.config.fps,
        "sample_rate": corpus.config.sample_rate,
        "frames": corpus.config.frames,
        "joint_count": base_skeleton(corpus.config.mode).joint_count,
        "config": asdict(corpus.config),
        "skeletons": {
            name: {"parents": sk.parents.tolist(),
                   "bone_lengths": sk.bone_lengths.tolist()}
            for name, sk in corpus.skeletons.items()},
        "clips": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise CorpusFormatError(f"no manifest.json under {root}")
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"manifest.json is not valid JSON: {e}")
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise CorpusFormatError(
            f"unsupported corpus format version {manifest.get('format_version')!r}")

    raw = dict(manifest["config"])
    for key in ("tempo_range", "scale_range"):
        raw[key] = tuple(raw[key])
    if raw.get("speaker_scales") is not None:
        raw["speaker_scales"] = tuple(raw["speaker_scales"])
    config = CorpusConfig(**raw)

    skeletons = {
        name: Skeleton(np.array(d["parents"]), np.array(d["bone_lengths"]), name)
        for name, d in manifest["skeletons"].items()}

    n_bones = manifest["joint_count"] - 1
    clips, audio = [], []
    for entry in manifest["clips"]:
        T = entry["frames"]
        blob = np.frombuffer((root / entry["clip_file"]).read_bytes(), dtype="<f4")
        expect = T * n_bones * 3 * 2 + T * 3
        if blob.size != expect:
            raise CorpusFormatError(
                f"clip {entry['id']}: expected {expect} floats, found {blob.size}")
        unit = blob[: T * n_bones * 3].reshape(T, n_bones, 3)
        real = blob[T * n_bones * 3: 2 * T * n_bones * 3].reshape(T, n_bones, 3)
        rt = blob[2 * T * n_bones * 3:].reshape(T, 3)
        pcm = np.frombuffer((root / entry["audio_file"]).read_bytes(), dtype="<i2")
        clips.append(GestureClip(entry["id"], entry["speaker"], unit.copy(),
                                 real.copy(), rt.copy(), manifest["fps"]))
        audio.append(AudioClip(entry["id"],
                               (pcm.astype(np.float32) / 32767.0),
                               np.asarray(entry["beat_times"], dtype=np.float64),
                               manifest["sample_rate"]))
    return Corpus(config, skeletons, clips, audio)
