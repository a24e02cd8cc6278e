"""Latent denoising diffusion over VQ encoder outputs.

The generator never sees skeletons: it corrupts and denoises the continuous
per-frame latent sequences produced by the frozen VQ encoder, conditioned on
seed-frame latents and per-frame audio features. Sampled latents are snapped
through the quantizer and decoded back to direction vectors.

Conventions:
  - diffusion time t runs 1..steps; schedule arrays index t-1.
  - the condition enters as extra feature channels: a T-row block whose
    first N rows hold the seed latents (zeros elsewhere), concatenated with
    the audio feature rows. The null condition zeroes the whole block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as gt
from .audio_enc import AudioEncoder, frames_to_samples
from .config import RunConfig
from .layers import (ConfigError, Linear, LinearNormAct, Module, ModuleList,
                     TransformerBlock, mse, positional_encoding,
                     timestep_embedding)
from .optim import Adam
from .tensor import ShapeError, Tensor
from .vqvae import TrainingDivergedError, VqvaeModel

# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class DiffusionSchedule:
    steps: int
    beta: np.ndarray       # (steps,) float64, beta[t-1] is the step-t variance
    alpha: np.ndarray      # 1 - beta
    alpha_bar: np.ndarray  # running product of alpha

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ConfigError(f"diffusion step {t} outside 1..{self.steps}")


def build_schedule(steps: int = 500, beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> DiffusionSchedule:
    if steps < 2:
        raise ConfigError("schedule needs at least 2 steps")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ConfigError(
            f"variance range ({beta_start}, {beta_end}) must satisfy "
            "0 < start < end < 1")
    beta = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alpha = 1.0 - beta
    return DiffusionSchedule(steps, beta, alpha, np.cumprod(alpha))


def forward_sample(z0: np.ndarray, t: int, eps: np.ndarray,
                   schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form corruption: z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    schedule.check_t(t)
    ab = schedule.alpha_bar[t - 1]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# condition channels


def condition_channels(seed_latents: np.ndarray | None,
                       audio_features: np.ndarray | None,
                       frames: int, code_dim: int, audio_dim: int
                       ) -> np.ndarray:
    """(frames, code_dim + audio_dim) channel block; None fields are zeros."""
    out = np.zeros((frames, code_dim + audio_dim), dtype=np.float32)
    if seed_latents is not None:
        n = len(seed_latents)
        if n > frames or seed_latents.shape[-1] != code_dim:
            raise ShapeError(
                f"seed latents {seed_latents.shape} do not fit "
                f"({frames}, {code_dim})")
        out[:n, :code_dim] = seed_latents
    if audio_features is not None:
        if audio_features.shape != (frames, audio_dim):
            raise ShapeError(
                f"audio features {audio_features.shape} != "
                f"({frames}, {audio_dim})")
        out[:, code_dim:] = audio_features
    return out


# ---------------------------------------------------------------------------
# noise predictor


class NoisePredictor(Module):
    """Transformer denoiser over [z_t | condition channels].

    Input projection to the hidden width, sinusoidal position and timestep
    embeddings added, a transformer stack, then a norm-act projection to the
    code width followed by a plain linear head.
    """

    def __init__(self, config: RunConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(config.seed + 11)
        d_c = config.code_dim
        d_a = config.audio_channels[-1]
        h = config.hidden
        self.inp = LinearNormAct(2 * d_c + d_a, h, rng, dtype=dtype)
        self.blocks = ModuleList([
            TransformerBlock(h, config.attention_heads,
                             h * config.ffn_multiplier, rng, dtype)
            for _ in range(config.denoiser_transformer_layers)])
        self.out1 = LinearNormAct(h, d_c, rng, dtype=dtype)
        self.out2 = Linear(d_c, d_c, rng, dtype=dtype)
        self.code_dim, self.audio_dim, self.hidden = d_c, d_a, h
        self.dtype = dtype

    def __call__(self, z_t: Tensor | np.ndarray, t, cond: Tensor | np.ndarray
                 ) -> Tensor:
        """z_t (B, T, d_C) or (T, d_C); t scalar or (B,); cond matches z_t."""
        if not isinstance(z_t, Tensor):
            z_t = Tensor(np.asarray(z_t, dtype=self.dtype))
        if not isinstance(cond, Tensor):
            cond = Tensor(np.asarray(cond, dtype=self.dtype))
        squeeze = z_t.ndim == 2
        if squeeze:
            z_t = z_t.reshape(1, *z_t.shape)
            cond = cond.reshape(1, *cond.shape)
        B, T = z_t.shape[0], z_t.shape[1]
        if cond.shape != (B, T, self.code_dim + self.audio_dim):
            raise ShapeError(
                f"condition shape {cond.shape} does not match latents "
                f"{z_t.shape} with {self.audio_dim} audio channels")
        temb = timestep_embedding(np.broadcast_to(np.asarray(t), (B,)),
                                  self.hidden, self.dtype)
        h = self.inp(gt.concat([z_t, cond], axis=-1))
        h = h + positional_encoding(T, self.hidden, self.dtype)
        h = h + temb.reshape(B, 1, self.hidden)
        for blk in self.blocks:
            h = blk(h)
        out = self.out2(self.out1(h))
        return out.reshape(out.shape[1:]) if squeeze else out

    def predict(self, z_t: np.ndarray, t, cond: np.ndarray | None) -> np.ndarray:
        """Inference-path wrapper: numpy in, numpy out, null cond for None."""
        if cond is None:
            cond = np.zeros(z_t.shape[:-1] + (self.code_dim + self.audio_dim,),
                            dtype=self.dtype)
        with gt.no_grad():
            return self(z_t, t, cond).data

    def state(self, prefix: str = "denoiser.") -> dict[str, np.ndarray]:
        return {prefix + n: p.data.astype(np.float32) for n, p in self.parameters()}

    def load_state(self, params: dict[str, np.ndarray],
                   prefix: str = "denoiser.") -> None:
        for n, p in self.parameters():
            p.data = params[prefix + n].astype(self.dtype)


# ---------------------------------------------------------------------------
# training


def diffusion_training_step(predict_fn, z0: np.ndarray, cond: np.ndarray,
                            schedule: DiffusionSchedule,
                            rng: np.random.Generator, p_uncond: float = 0.1,
                            t=None, eps: np.ndarray | None = None) -> Tensor:
    """One epsilon-prediction objective evaluation over a latent batch.

    Draws per-sample steps and noise unless given, corrupts z0 in closed
    form, and with probability p_uncond replaces each sample's condition by
    the null (all-zero) variant. predict_fn(z_t, t, cond) -> Tensor.
    """
    z0 = np.asarray(z0, dtype=np.float32)
    B = z0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.steps + 1, size=B)
    t = np.broadcast_to(np.asarray(t), (B,))
    if eps is None:
        eps = rng.standard_normal(z0.shape).astype(np.float32)
    ab = schedule.alpha_bar[t - 1].astype(np.float32)[:, None, None]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    keep = (rng.random(B) >= p_uncond).astype(np.float32)[:, None, None]
    cond = np.asarray(cond, dtype=np.float32) * keep
    return mse(predict_fn(z_t, t, cond), Tensor(eps))


def train_diffusion(corpus, vqvae: VqvaeModel, config: RunConfig,
                    train_idx: list[int] | None = None, log=None
                    ) -> tuple[NoisePredictor, AudioEncoder, list[dict], float]:
    """Fit the denoiser and audio encoder over frozen VQ encoder latents.

    The seed-frame condition channel alternates per sample between the
    clip's first N rows of the full-clip encoding and the same N frames
    encoded as a standalone input. Generation meets both regimes: a cold
    start only has N frames to encode on their own, while autoregressive
    continuation hands over latent rows that saw a full window of context.
    Returns the predictor, the jointly trained audio encoder, the epoch
    history, and the empirical latent std used for thresholding.
    """
    rng = np.random.default_rng(config.seed + 5)
    predictor = NoisePredictor(config, np.random.default_rng(config.seed + 6))
    audio_enc = AudioEncoder(config, np.random.default_rng(config.seed + 7))
    schedule = build_schedule(config.diffusion_steps, config.beta_start,
                              config.beta_end)
    feats = corpus.features().astype(np.float32)
    idx_all = np.arange(len(feats)) if train_idx is None else np.asarray(train_idx)
    N = config.seed_frames

    with gt.no_grad():
        cached, cached_seed = [], []
        for b0 in range(0, len(idx_all), config.batch_size):
            sel = idx_all[b0:b0 + config.batch_size]
            cached.append(vqvae.encode(feats[sel]).data)
            cached_seed.append(vqvae.encode(feats[sel][:, :N]).data)
    z_all = np.concatenate(cached)
    seed_all = np.concatenate(cached_seed)
    latent_std = float(z_all.std())
    waves = np.stack([corpus.audio[i].samples for i in idx_all]).astype(np.float32)

    n, T = len(z_all), z_all.shape[1]
    opt = Adam(list(predictor.parameters()) + list(audio_enc.parameters()),
               lr=config.diffusion_lr or config.lr)
    history: list[dict] = []
    step = 0
    for epoch in range(config.diffusion_epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for b0 in range(0, n, config.batch_size):
            sel = order[b0:b0 + config.batch_size]
            B = len(sel)
            z0 = z_all[sel]
            t = rng.integers(1, schedule.steps + 1, size=B)
            eps = rng.standard_normal(z0.shape).astype(np.float32)
            ab = schedule.alpha_bar[t - 1].astype(np.float32)[:, None, None]
            z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
            seed_chan = np.zeros((B, T, config.code_dim), dtype=np.float32)
            cold = rng.random(B) < 0.5
            seed_chan[:, :N] = np.where(cold[:, None, None],
                                        seed_all[sel], z0[:, :N])
            keep = (rng.random(B) >= config.p_uncond
                    ).astype(np.float32)[:, None, None]
            try:
                a_feat = audio_enc(waves[sel], frames=T)
                cond = gt.concat([Tensor(seed_chan * keep),
                                  a_feat * Tensor(keep)], axis=-1)
                pred = predictor(Tensor(z_t), t, cond)
                loss = mse(pred, Tensor(eps))
                gt.backward(loss)
            except (gt.NonFiniteError, FloatingPointError) as e:
                raise TrainingDivergedError(step, str(e))
            opt.step()
            total += float(loss.data)
            batches += 1
            step += 1
        history.append({"epoch": epoch, "loss": total / batches})
        if log:
            log(f"diffusion epoch {epoch}: eps-mse {total / batches:.5f}")
    return predictor, audio_enc, history, latent_std


# ---------------------------------------------------------------------------
# sampling


def guided_noise(predict, z_t: np.ndarray, t: int,
                 cond: np.ndarray | None, w: float) -> np.ndarray:
    """Classifier-free combination (1+w) eps_cond - w eps_null."""
    eps_c = predict(z_t, t, cond)
    if w == 0.0:
        return eps_c
    eps_u = predict(z_t, t, None)
    return (1.0 + w) * eps_c - w * eps_u


def reverse_step(predict, z_t: np.ndarray, t: int, cond: np.ndarray | None,
                 schedule: DiffusionSchedule, rng: np.random.Generator, *,
                 w: float = 0.0, s_thr: float, eta: np.ndarray | None = None
                 ) -> np.ndarray:
    """One posterior step z_t -> z_{t-1} with thresholding and guidance.

    The z0 estimate inverted from the predicted noise is clamped to
    [-s_thr, s_thr] before forming the posterior mean; noise sqrt(beta_t) eta
    is added for t > 1 and omitted at t = 1.
    """
    schedule.check_t(t)
    eps_hat = guided_noise(predict, z_t, t, cond, w)
    ab_t = schedule.alpha_bar[t - 1]
    ab_prev = schedule.alpha_bar[t - 2] if t > 1 else 1.0
    beta_t = schedule.beta[t - 1]
    alpha_t = schedule.alpha[t - 1]
    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    z0_hat = np.clip(z0_hat, -s_thr, s_thr)
    mu = (np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)) * z0_hat \
        + (np.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)) * z_t
    if t == 1:
        return mu
    if eta is None:
        eta = rng.standard_normal(z_t.shape)
    return mu + np.sqrt(beta_t) * eta


def sample(predict, cond: np.ndarray | None, schedule: DiffusionSchedule,
           shape: tuple[int, ...], rng: np.random.Generator, *,
           w: float = 0.0, s_thr: float) -> np.ndarray:
    """Full reverse loop from z_T ~ N(0, I); deterministic given rng state."""
    z = rng.standard_normal(shape)
    for t in range(schedule.steps, 0, -1):
        z = reverse_step(predict, z, t, cond, schedule, rng, w=w, s_thr=s_thr)
    return z


# ---------------------------------------------------------------------------
# long-form generation


def _window_count(n_samples: int, frames: int, overlap: int,
                  fps: int, sample_rate: int) -> tuple[int, int]:
    """(window count, per-window hop in samples) for a long waveform."""
    base = frames_to_samples(frames, fps, sample_rate)
    hop_w = frames_to_samples(frames - overlap, fps, sample_rate)
    hop = sample_rate / fps
    k = max(1, int(round((n_samples - base) / hop_w)) + 1)
    want = base + (k - 1) * hop_w
    if abs(n_samples - want) > hop:
        raise ShapeError(
            f"audio of {n_samples} samples does not align with {k} windows "
            f"of {frames} frames at a {frames - overlap}-frame hop "
            f"(expected {want})")
    return k, hop_w


def generate_long(predictor: NoisePredictor, audio_enc: AudioEncoder,
                  vqvae: VqvaeModel, audio: np.ndarray,
                  seed_frames: np.ndarray, config: RunConfig,
                  rng: np.random.Generator, *,
                  schedule: DiffusionSchedule | None = None,
                  w: float | None = None, s_thr: float) -> dict:
    """Autoregressive long-form generation seeded by N frames of motion.

    Each window conditions on the previous window's last N latent rows plus
    its own audio slice. Consecutive windows share their overlap noise draws
    and are blended by a linear crossfade over the N overlap rows, in latent
    space and again after decoding.
    Returns {"features": (F_total, width), "latents": (F_total, d_C)}.
    """
    if schedule is None:
        schedule = build_schedule(config.diffusion_steps, config.beta_start,
                                  config.beta_end)
    if w is None:
        w = config.guidance
    T, N, d_c = config.frames, config.seed_frames, config.code_dim
    audio = np.asarray(audio, dtype=np.float32).reshape(-1)
    k, hop_w = _window_count(len(audio), T, N, config.fps, config.sample_rate)
    base = frames_to_samples(T, config.fps, config.sample_rate)

    seed_frames = np.asarray(seed_frames, dtype=np.float32)
    if seed_frames.shape != (N, config.feature_width):
        raise ShapeError(
            f"seed frames {seed_frames.shape} != ({N}, {config.feature_width})")
    with gt.no_grad():
        seed_lat = vqvae.encode(seed_frames).data

    total = T + (k - 1) * (T - N)
    lat = np.zeros((total, d_c), dtype=np.float64)
    ramp = (np.arange(N, dtype=np.float64)[:, None] + 1.0) / (N + 1.0)

    tail_init = None
    tail_eta: dict[int, np.ndarray] = {}
    for i in range(k):
        chunk = audio[i * hop_w: i * hop_w + base]
        if len(chunk) < base:
            chunk = np.pad(chunk, (0, base - len(chunk)))
        with gt.no_grad():
            a_feat = audio_enc(chunk, frames=T).data
        cond = condition_channels(seed_lat, a_feat, T, d_c,
                                  predictor.audio_dim)

        z = rng.standard_normal((T, d_c))
        if tail_init is not None:
            z[:N] = tail_init
        next_init = z[T - N:].copy()
        next_eta: dict[int, np.ndarray] = {}
        for t in range(schedule.steps, 0, -1):
            eta = None
            if t > 1:
                eta = rng.standard_normal((T, d_c))
                if i > 0:
                    eta[:N] = tail_eta[t]
                next_eta[t] = eta[T - N:].copy()
            z = reverse_step(predictor.predict, z, t, cond, schedule, rng,
                             w=w, s_thr=s_thr, eta=eta)
        start = i * (T - N)
        if i == 0:
            lat[:T] = z
        else:
            lat[start:start + N] = (1.0 - ramp) * lat[start:start + N] \
                + ramp * z[:N]
            lat[start + N:start + T] = z[N:]
        seed_lat = z[T - N:].astype(np.float32)
        tail_init, tail_eta = next_init, next_eta

    feats = np.zeros((total, config.feature_width), dtype=np.float32)
    framp = ramp.astype(np.float32)
    for i in range(k):
        start = i * (T - N)
        window = lat[start:start + T].astype(np.float32)[None]
        with gt.no_grad():
            st, _ = vqvae.quantize(Tensor(window))
            dec = vqvae.decode(st).data[0]
        if i == 0:
            feats[:T] = dec
        else:
            blend = (1.0 - framp) * feats[start:start + N] + framp * dec[:N]
            # crossfading unit vectors shortens them; restore per-bone norms
            bones = blend.reshape(N, config.bone_count, 3)
            bones = bones / np.linalg.norm(bones, axis=-1, keepdims=True)
            feats[start:start + N] = bones.reshape(N, -1)
            feats[start + N:start + T] = dec[N:]
    return {"features": feats, "latents": lat.astype(np.float32)}
