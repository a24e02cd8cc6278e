"""Masked repaint sampling for gesture editing.

A trained denoiser is reused at sampling time only. Per reverse step the
known rows are drawn from the forward marginal of the conditioning latents,
the unknown rows from the model posterior, and the two are blended by a
per-frame mask. After the final step the known rows are overwritten with the
conditioning latents exactly, so pinned frames survive verbatim. No
parameters are read from or written to disk here; the caller passes a
trained predictor.

Masks are per frame and broadcast across latent channels. The textual mask
syntax is ``known:0-3,24-33`` with inclusive frame ranges.
"""

from __future__ import annotations

import numpy as np

from . import tensor as gt
from .audio_enc import AudioEncoder, frames_to_samples
from .config import RunConfig
from .diffusion import (DiffusionSchedule, NoisePredictor, build_schedule,
                        condition_channels, reverse_step, sample)
from .tensor import ShapeError, Tensor
from .vqvae import VqvaeModel

# Unknown rows immediately before a pinned block that a second masked pass
# regenerates; earlier free rows keep their ordinary sampled content.
TRANSITION_FRAMES = 6


class MaskError(ValueError):
    """Raised for malformed mask specs or mask arrays."""


class InfeasibleLayoutError(ValueError):
    """Raised when pinned blocks and transitions cannot fit the clip."""


# ---------------------------------------------------------------------------
# masks


def parse_mask(spec: str, frames: int) -> np.ndarray:
    """Parse ``known:0-3,24-33`` into a boolean (frames,) array, True=known.

    Ranges are inclusive and may overlap; single indices are allowed. An
    empty list after ``known:`` marks every frame unknown.
    """
    text = spec.strip()
    if not text.startswith("known:"):
        raise MaskError(f"mask spec must start with 'known:', got {spec!r}")
    mask = np.zeros(frames, dtype=bool)
    body = text[len("known:"):].strip()
    if not body:
        return mask
    for part in body.split(","):
        part = part.strip()
        if not part:
            raise MaskError(f"empty range in mask spec {spec!r}")
        lo, _, hi = part.partition("-")
        try:
            a = int(lo)
            b = int(hi) if hi else a
        except ValueError:
            raise MaskError(f"bad range {part!r} in mask spec {spec!r}")
        if a > b:
            raise MaskError(f"descending range {part!r} in mask spec {spec!r}")
        if a < 0 or b >= frames:
            raise MaskError(
                f"range {part!r} outside a {frames}-frame clip")
        mask[a:b + 1] = True
    return mask


def _as_mask(mask, frames: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 2 and m.shape[1] == 1:
        m = m[:, 0]
    if m.shape != (frames,):
        raise MaskError(f"mask shape {np.shape(mask)} != ({frames},)")
    if m.dtype != bool:
        vals = np.unique(m)
        if not np.isin(vals, (0, 1)).all():
            raise MaskError(f"mask values must be 0/1, got {vals}")
        m = m.astype(bool)
    return m


# ---------------------------------------------------------------------------
# masked reverse steps


def repaint_step(predict, z_t: np.ndarray, t: int, cond: np.ndarray | None,
                 known_latents: np.ndarray, mask, schedule: DiffusionSchedule,
                 rng: np.random.Generator, *, w: float = 0.0,
                 s_thr: float) -> np.ndarray:
    """One masked reverse step z_t -> z_{t-1}.

    Known rows are drawn from the forward marginal
    N(sqrt(alpha_bar_t) * known_latents, (1 - alpha_bar_t) I), unknown rows
    from a model posterior step, and the mask blends the two. The model step
    consumes its rng draws first and the known-row draw happens only when the
    mask selects at least one row, so an all-unknown mask reproduces
    reverse_step on the same rng stream bit for bit.
    """
    m = _as_mask(mask, z_t.shape[0])
    z_unknown = reverse_step(predict, z_t, t, cond, schedule, rng,
                             w=w, s_thr=s_thr)
    if not m.any():
        return z_unknown
    if known_latents.shape != z_t.shape:
        raise ShapeError(
            f"known latents {known_latents.shape} != state {z_t.shape}")
    ab_t = schedule.alpha_bar[t - 1]
    noise = rng.standard_normal(known_latents.shape)
    z_known = np.sqrt(ab_t) * known_latents + np.sqrt(1.0 - ab_t) * noise
    # where() rather than arithmetic blending so ignored rows may hold any
    # value, non-finite included
    return np.where(m[:, None], z_known, z_unknown)


def repaint_sample(predict, cond: np.ndarray | None,
                   known_latents: np.ndarray, mask,
                   schedule: DiffusionSchedule, rng: np.random.Generator, *,
                   w: float = 0.0, s_thr: float) -> np.ndarray:
    """Full reverse loop with per-step masked blending.

    After the loop the known rows are overwritten with known_latents exactly,
    removing the residual step-1 variance, so pinned latents are reproduced
    verbatim. An all-known mask returns the conditioning latents directly.
    """
    kl = np.asarray(known_latents, dtype=np.float64)
    if kl.ndim != 2:
        raise ShapeError(f"known latents must be (frames, dim), got {kl.shape}")
    m = _as_mask(mask, kl.shape[0])
    if not np.isfinite(kl[m]).all():
        raise ValueError("known rows of the conditioning latents must be finite")
    if m.all():
        return kl.copy()
    z = rng.standard_normal(kl.shape)
    for t in range(schedule.steps, 0, -1):
        z = repaint_step(predict, z, t, cond, kl, m, schedule, rng,
                         w=w, s_thr=s_thr)
    z[m] = kl[m]
    return z


# ---------------------------------------------------------------------------
# editing operations


def _decode_latents(vqvae: VqvaeModel, z: np.ndarray) -> np.ndarray:
    with gt.no_grad():
        quantized, _ = vqvae.quantize(Tensor(z.astype(np.float32)[None]))
        return vqvae.decode(quantized).data[0]


def inbetween(predictor: NoisePredictor, audio_enc: AudioEncoder,
              vqvae: VqvaeModel, first_frames: np.ndarray,
              last_frames: np.ndarray, audio: np.ndarray, config: RunConfig,
              rng: np.random.Generator, *,
              schedule: DiffusionSchedule | None = None,
              w: float | None = None, s_thr: float) -> dict:
    """Fill the middle of a clip given its first N and last M frames.

    The free rows come from an ordinary conditional draw seeded by the first
    frames. A second masked pass then regenerates only the TRANSITION_FRAMES
    rows immediately before the post block while pinning everything else, so
    the early free rows keep their sampled content and the clip meets the
    post block smoothly. Layout per clip: N seed + free + transition + M post.
    Returns {"features": (frames, width), "latents": (frames, d_C)}.
    """
    if schedule is None:
        schedule = build_schedule(config.diffusion_steps, config.beta_start,
                                  config.beta_end)
    if w is None:
        w = config.guidance
    T, N, d_c = config.frames, config.seed_frames, config.code_dim
    first_frames = np.asarray(first_frames, dtype=np.float32)
    last_frames = np.asarray(last_frames, dtype=np.float32)
    if first_frames.shape != (N, config.feature_width):
        raise ShapeError(
            f"first frames {first_frames.shape} != ({N}, {config.feature_width})")
    if last_frames.ndim != 2 or last_frames.shape[1] != config.feature_width \
            or last_frames.shape[0] < 1:
        raise ShapeError(
            f"last frames must be (M, {config.feature_width}) with M >= 1, "
            f"got {last_frames.shape}")
    post = last_frames.shape[0]
    if N + TRANSITION_FRAMES + post > T:
        raise InfeasibleLayoutError(
            f"{N} seed + {TRANSITION_FRAMES} transition + {post} post frames "
            f"exceed the {T}-frame clip")

    with gt.no_grad():
        seed_lat = vqvae.encode(first_frames[None]).data[0]
        post_lat = vqvae.encode(last_frames[None]).data[0]
        a_feat = audio_enc(audio, frames=T).data
    cond = condition_channels(seed_lat, a_feat, T, d_c, predictor.audio_dim)

    draft = sample(predictor.predict, cond, schedule, (T, d_c), rng,
                   w=w, s_thr=s_thr)
    pinned = draft.copy()
    pinned[:N] = seed_lat
    pinned[T - post:] = post_lat
    mask = np.ones(T, dtype=bool)
    mask[T - post - TRANSITION_FRAMES:T - post] = False
    z = repaint_sample(predictor.predict, cond, pinned, mask, schedule, rng,
                       w=w, s_thr=s_thr)
    return {"features": _decode_latents(vqvae, z),
            "latents": z.astype(np.float32)}


def _edit_window(interval: tuple[int, int], margin: int, total: int,
                 frames: int) -> int:
    """Start of the frames-long window covering the interval plus margins."""
    a, b = interval
    if total < frames:
        raise InfeasibleLayoutError(
            f"clip of {total} frames is shorter than one {frames}-frame window")
    if a - margin < 0 or b + margin > total:
        raise InfeasibleLayoutError(
            f"interval [{a}, {b}) needs {margin} context frames inside the clip")
    if (b + margin) - (a - margin) > frames:
        raise InfeasibleLayoutError(
            f"interval [{a}, {b}) plus {margin}-frame margins exceeds one "
            f"{frames}-frame window")
    start = (a + b) // 2 - frames // 2
    start = max(0, min(start, total - frames))
    start = min(start, a - margin)
    start = max(start, b + margin - frames)
    return start


def edit_interval(predictor: NoisePredictor, audio_enc: AudioEncoder,
                  vqvae: VqvaeModel, clip_feats: np.ndarray,
                  interval: tuple[int, int], replacement: np.ndarray | None,
                  audio: np.ndarray, config: RunConfig,
                  rng: np.random.Generator, *,
                  schedule: DiffusionSchedule | None = None,
                  w: float | None = None, s_thr: float) -> np.ndarray:
    """Regenerate a frame interval of a long clip and splice it back.

    One window of config.frames frames around the half-open interval is
    re-encoded, masked, repainted, decoded, and written back; rows outside
    the window are returned untouched. Without replacement features the
    interval rows themselves are regenerated against their pinned context.
    With replacement features the interval rows are pinned to the
    replacement's latents and only the TRANSITION_FRAMES rows on each side
    are regenerated, blending the inserted motion into the clip.
    """
    if schedule is None:
        schedule = build_schedule(config.diffusion_steps, config.beta_start,
                                  config.beta_end)
    if w is None:
        w = config.guidance
    clip_feats = np.asarray(clip_feats, dtype=np.float32)
    if clip_feats.ndim != 2 or clip_feats.shape[1] != config.feature_width:
        raise ShapeError(
            f"clip features {clip_feats.shape} != (F, {config.feature_width})")
    a, b = interval
    total = clip_feats.shape[0]
    if not (0 <= a <= b <= total):
        raise ShapeError(f"interval [{a}, {b}) outside a {total}-frame clip")
    if a == b:
        return clip_feats.copy()

    T, N = config.frames, config.seed_frames
    margin = TRANSITION_FRAMES if replacement is not None else 1
    start = _edit_window((a, b), margin, total, T)
    window = clip_feats[start:start + T]
    with gt.no_grad():
        pinned = vqvae.encode(window[None]).data[0].astype(np.float64)
    mask = np.ones(T, dtype=bool)
    if replacement is None:
        mask[a - start:b - start] = False
    else:
        replacement = np.asarray(replacement, dtype=np.float32)
        if replacement.shape != (b - a, config.feature_width):
            raise ShapeError(
                f"replacement {replacement.shape} != "
                f"({b - a}, {config.feature_width})")
        with gt.no_grad():
            pinned[a - start:b - start] = vqvae.encode(replacement[None]).data[0]
        mask[a - start - TRANSITION_FRAMES:a - start] = False
        mask[b - start:b - start + TRANSITION_FRAMES] = False

    base = frames_to_samples(T, config.fps, config.sample_rate)
    wave = np.asarray(audio, dtype=np.float32).reshape(-1)
    offset = int(round(start * config.sample_rate / config.fps))
    chunk = wave[offset:offset + base]
    if len(chunk) < base:
        chunk = np.pad(chunk, (0, base - len(chunk)))
    with gt.no_grad():
        a_feat = audio_enc(chunk, frames=T).data
    cond = condition_channels(pinned[:N].astype(np.float32), a_feat, T,
                              config.code_dim, predictor.audio_dim)

    z = repaint_sample(predictor.predict, cond, pinned, mask, schedule, rng,
                       w=w, s_thr=s_thr)
    out = clip_feats.copy()
    out[start:start + T] = _decode_latents(vqvae, z)
    return out
