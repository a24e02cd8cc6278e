"""Temporal-aware VQ-VAE over gesture clips, plus the speaker-related decoder.

The encoder runs a per-frame residual MLP stack, adds positional encoding,
and lets transformer layers mix information across frames before projecting
to the code dimension. Codes live in an EMA-updated codebook with an
inactive-code reset; the straight-through estimator carries decoder
gradients past the quantizer. The main decoder mirrors the encoder and
renormalizes every output bone to unit length. The speaker-related decoder
consumes the same codes plus a 64-dim embedding of one real-length
reference frame and emits real-length vectors instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as gt
from .config import RunConfig
from .layers import (LEAKY_SLOPE, LinearNormAct, Linear, Module, ModuleList,
                     PlainResidualBlock, ResidualLinearBlock, TransformerBlock,
                     positional_encoding, unit_normalize, mse)
from .optim import Adam
from .tensor import ShapeError, Tensor


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


# ---------------------------------------------------------------------------
# codebook

class Codebook:
    """EMA-maintained code table with inactive-code resets."""

    def __init__(self, size: int, dim: int, rng: np.random.Generator,
                 decay: float = 0.9, epsilon: float = 1e-5,
                 reset_patience: int = 1, dtype=np.float32):
        self.codes = (rng.normal(size=(size, dim)) * 0.5).astype(dtype)
        self.ema_cluster_size = np.zeros(size, dtype=np.float64)
        self.ema_cluster_sum = np.zeros((size, dim), dtype=np.float64)
        self.usage_count = np.zeros(size, dtype=np.int64)
        self.epochs_unused = np.zeros(size, dtype=np.int64)
        self.decay = decay
        self.epsilon = epsilon
        self.reset_patience = reset_patience

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def nearest(self, z: np.ndarray) -> np.ndarray:
        """Index of the closest code per row; ties go to the lowest index."""
        if self.size == 0:
            raise ValueError("empty codebook")
        d2 = ((z * z).sum(axis=1, keepdims=True)
              - 2.0 * z @ self.codes.T
              + (self.codes * self.codes).sum(axis=1))
        return np.argmin(d2, axis=1)

    def ema_update(self, z: np.ndarray, assignments: np.ndarray) -> None:
        counts = np.bincount(assignments, minlength=self.size).astype(np.float64)
        sums = np.zeros_like(self.ema_cluster_sum)
        np.add.at(sums, assignments, z.astype(np.float64))
        mu = self.decay
        self.ema_cluster_size = mu * self.ema_cluster_size + (1 - mu) * counts
        self.ema_cluster_sum = mu * self.ema_cluster_sum + (1 - mu) * sums
        self.usage_count += np.bincount(assignments, minlength=self.size)
        # codes with no assignments in this batch keep their value bit-exactly
        touched = counts > 0
        new = self.ema_cluster_sum[touched] / (
            self.ema_cluster_size[touched, None] + self.epsilon)
        self.codes[touched] = new.astype(self.codes.dtype)
        if not np.all(np.isfinite(self.codes)):
            raise FloatingPointError("codebook became non-finite")

    def end_epoch(self, sample_pool: np.ndarray,
                  rng: np.random.Generator) -> int:
        """Reset codes unused for `reset_patience` consecutive epochs.

        `sample_pool` holds encoder outputs from the finished epoch; stale
        codes are reseeded from uniformly drawn rows. Returns reset count.
        """
        unused = self.usage_count == 0
        self.epochs_unused[unused] += 1
        self.epochs_unused[~unused] = 0
        stale = np.flatnonzero(self.epochs_unused >= self.reset_patience)
        if len(stale) and len(sample_pool):
            picks = rng.integers(0, len(sample_pool), size=len(stale))
            fresh = sample_pool[picks].astype(self.codes.dtype)
            self.codes[stale] = fresh
            self.ema_cluster_sum[stale] = fresh.astype(np.float64)
            self.ema_cluster_size[stale] = 1.0
            self.epochs_unused[stale] = 0
        self.usage_count[:] = 0
        return len(stale)

    def perplexity(self, assignments: np.ndarray) -> float:
        p = np.bincount(assignments, minlength=self.size) / max(len(assignments), 1)
        nz = p[p > 0]
        return float(np.exp(-(nz * np.log(nz)).sum()))

    def state(self, prefix: str = "codebook.") -> dict[str, np.ndarray]:
        return {
            prefix + "codes": self.codes.astype(np.float32),
            prefix + "ema_cluster_size": self.ema_cluster_size.astype(np.float32),
            prefix + "ema_cluster_sum": self.ema_cluster_sum.astype(np.float32),
        }

    def load_state(self, params: dict[str, np.ndarray], prefix: str = "codebook.") -> None:
        self.codes = params[prefix + "codes"].astype(self.codes.dtype)
        self.ema_cluster_size = params[prefix + "ema_cluster_size"].astype(np.float64)
        self.ema_cluster_sum = params[prefix + "ema_cluster_sum"].astype(np.float64)
        self.usage_count = np.zeros(self.size, dtype=np.int64)
        self.epochs_unused = np.zeros(self.size, dtype=np.int64)


# ---------------------------------------------------------------------------
# encoder / decoder bodies

class FrameStack(Module):
    """Per-frame residual MLP followed by cross-frame transformer layers."""

    def __init__(self, d_in: int, hidden: int, d_out: int, res_blocks: int,
                 transformer_layers: int, heads: int, ffn_mult: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.inp = LinearNormAct(d_in, hidden, rng, dtype=dtype)
        self.res = ModuleList([ResidualLinearBlock(hidden, hidden, rng, dtype=dtype)
                               for _ in range(res_blocks)])
        self.blocks = ModuleList([
            TransformerBlock(hidden, heads, ffn_mult * hidden, rng, dtype=dtype)
            for _ in range(transformer_layers)])
        self.out = Linear(hidden, d_out, rng, dtype=dtype)
        self.hidden = hidden
        self.dtype = dtype

    def __call__(self, x: Tensor, pos_offset: int = 0) -> Tensor:
        h = self.inp(x)
        for blk in self.res:
            h = blk(h)
        T = h.shape[-2]
        pe = positional_encoding(pos_offset + T, self.hidden, dtype=self.dtype)[pos_offset:]
        h = h + Tensor(pe)
        for blk in self.blocks:
            h = blk(h)
        return self.out(h)


class VqvaeModel(Module):
    def __init__(self, config: RunConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(config.seed)
        c = config
        self.config = c
        self.encoder = FrameStack(c.feature_width, c.hidden, c.code_dim,
                                  c.encoder_res_blocks, c.encoder_transformer_layers,
                                  c.attention_heads, c.ffn_multiplier, rng, dtype)
        self.decoder = FrameStack(c.code_dim, c.hidden, c.feature_width,
                                  c.encoder_res_blocks, c.decoder_transformer_layers,
                                  c.attention_heads, c.ffn_multiplier, rng, dtype)
        self.codebook = Codebook(c.codebook_size, c.code_dim, rng,
                                 c.ema_decay, c.ema_epsilon, c.reset_patience,
                                 dtype)
        self.dtype = dtype

    # -- infrastructure ----------------------------------------------------
    def _check_width(self, x) -> None:
        if x.shape[-1] != self.config.feature_width:
            raise ShapeError(
                f"feature width {x.shape[-1]} does not match mode "
                f"{self.config.mode!r} ({self.config.feature_width})")

    def state(self) -> dict[str, np.ndarray]:
        out = {name: p.data.astype(np.float32) for name, p in self.parameters()}
        out.update(self.codebook.state())
        return out

    def load_state(self, params: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters():
            p.data = params[name].astype(self.dtype)
        self.codebook.load_state(params)

    # -- core ops ------------------------------------------------------------
    def encode(self, x, pos_offset: int = 0) -> Tensor:
        """unit_dirs features (B, T, F) -> latents (B, T, d_C)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        self._check_width(x)
        return self.encoder(x, pos_offset=pos_offset)

    def quantize(self, z: Tensor) -> tuple[Tensor, np.ndarray]:
        """Nearest codes with a straight-through gradient path.

        Returns (codes as Tensor on the gradient tape, indices array).
        """
        flat = z.data.reshape(-1, self.codebook.dim)
        idx = self.codebook.nearest(flat)
        codes = self.codebook.codes[idx].reshape(z.shape).astype(z.data.dtype)
        offset = Tensor(codes - z.data)      # constant: no grad through it
        return z + offset, idx.reshape(z.shape[:-1])

    def decode(self, codes: Tensor | np.ndarray, pos_offset: int = 0) -> Tensor:
        """Codes (B, T, d_C) -> unit_dirs features (B, T, F), unit per bone."""
        if not isinstance(codes, Tensor):
            codes = Tensor(np.asarray(codes, dtype=self.dtype))
        y = self.decoder(codes, pos_offset=pos_offset)
        B, T = y.shape[0], y.shape[1]
        bones = self.config.bone_count
        y = unit_normalize(y.reshape(B, T, bones, 3), axis=-1)
        return y.reshape(B, T, bones * 3)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor, np.ndarray]:
        z = self.encode(x)
        st, idx = self.quantize(z)
        recon = self.decode(st)
        return recon, z, st, idx

    def reconstruct(self, feats: np.ndarray) -> np.ndarray:
        with gt.no_grad():
            recon, _, _, _ = self.forward(Tensor(feats.astype(self.dtype)))
        return recon.data


def vqvae_loss(x: Tensor, recon: Tensor, z: Tensor, idx: np.ndarray,
               codebook: Codebook, beta: float) -> Tensor:
    """Reconstruction MSE plus beta-weighted commitment to the frozen codes."""
    codes = Tensor(codebook.codes[idx.reshape(-1)]
                   .reshape(z.shape).astype(z.data.dtype))
    return mse(recon, x) + beta * mse(z, codes)


# ---------------------------------------------------------------------------
# training

def train_vqvae(corpus, config: RunConfig, train_idx: list[int] | None = None,
                log=None, quantizer_enabled: bool = True,
                ema_enabled: bool = True, reset_enabled: bool = True
                ) -> tuple[VqvaeModel, list[dict]]:
    """Fit the VQ-VAE on corpus unit-direction features.

    The ablation switches keep the training loop identical while disabling
    codebook adaptation (`ema_enabled`) or the inactive-code reset
    (`reset_enabled`); with both off the model must fit through a frozen
    random codebook.
    """
    rng = np.random.default_rng(config.seed)
    model = VqvaeModel(config, np.random.default_rng(config.seed + 1))
    feats = corpus.features().astype(np.float32)
    if train_idx is not None:
        feats = feats[train_idx]
    n = len(feats)
    opt = Adam(model.parameters(), lr=config.lr)
    history: list[dict] = []
    step = 0
    for epoch in range(config.vqvae_epochs):
        order = rng.permutation(n)
        epoch_loss, epoch_sq, batches = 0.0, 0.0, 0
        pool = []
        all_idx = []
        for b0 in range(0, n, config.batch_size):
            batch = Tensor(feats[order[b0:b0 + config.batch_size]])
            try:
                z = model.encode(batch)
                if quantizer_enabled:
                    st, idx = model.quantize(z)
                else:
                    st, idx = z, model.codebook.nearest(
                        z.data.reshape(-1, model.codebook.dim)).reshape(z.shape[:-1])
                recon = model.decode(st)
                loss = vqvae_loss(batch, recon, z, idx, model.codebook,
                                  config.commitment_beta)
                gt.backward(loss)
            except (gt.NonFiniteError, FloatingPointError) as e:
                raise TrainingDivergedError(step, str(e))
            opt.step()
            flat = z.data.reshape(-1, model.codebook.dim)
            if ema_enabled:
                model.codebook.ema_update(flat, idx.reshape(-1))
            else:
                model.codebook.usage_count += np.bincount(
                    idx.reshape(-1), minlength=model.codebook.size)
            pool.append(flat)
            all_idx.append(idx.reshape(-1))
            epoch_loss += float(loss.data)
            epoch_sq += float(((recon.data - batch.data) ** 2).mean())
            batches += 1
            step += 1
        resets = 0
        if reset_enabled and ema_enabled:
            resets = model.codebook.end_epoch(np.concatenate(pool), rng)
        else:
            model.codebook.usage_count[:] = 0
        record = {
            "epoch": epoch,
            "loss": epoch_loss / batches,
            "recon_mse": epoch_sq / batches,
            "perplexity": model.codebook.perplexity(np.concatenate(all_idx)),
            "resets": resets,
        }
        history.append(record)
        if log:
            log(f"vqvae epoch {epoch}: loss {record['loss']:.5f} "
                f"mse {record['recon_mse']:.5f} "
                f"perplexity {record['perplexity']:.1f} resets {resets}")
    return model, history


# ---------------------------------------------------------------------------
# speaker-related decoder

class SpeakerDecoder(Module):
    """Decodes latent codes to real-length vectors for a reference speaker."""

    def __init__(self, config: RunConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(config.seed + 2)
        c = config
        self.config = c
        # no normalization on this path: the embedding must keep the
        # reference frame's absolute scale (bone lengths)
        self.speaker_inp = Linear(c.feature_width, c.speaker_embed_dim, rng, dtype=dtype)
        self.speaker_res = ModuleList([
            PlainResidualBlock(c.speaker_embed_dim, c.speaker_embed_dim, rng, dtype=dtype)
            for _ in range(c.speaker_res_blocks)])
        self.body = FrameStack(c.code_dim + c.speaker_embed_dim, c.hidden,
                               c.feature_width, c.encoder_res_blocks,
                               c.decoder_transformer_layers, c.attention_heads,
                               c.ffn_multiplier, rng, dtype)
        self.dtype = dtype

    def embed_speaker(self, ref_frame) -> Tensor:
        """One real-length frame (B, F) -> speaker embedding (B, 64)."""
        if not isinstance(ref_frame, Tensor):
            ref_frame = Tensor(np.asarray(ref_frame, dtype=self.dtype))
        if ref_frame.shape[-1] != self.config.feature_width:
            raise ShapeError(
                f"reference frame width {ref_frame.shape[-1]}, "
                f"expected {self.config.feature_width}")
        h = self.speaker_inp(ref_frame).leaky_relu(LEAKY_SLOPE)
        for blk in self.speaker_res:
            h = blk(h)
        return h

    def __call__(self, codes: Tensor | np.ndarray, ref_frame) -> Tensor:
        if not isinstance(codes, Tensor):
            codes = Tensor(np.asarray(codes, dtype=self.dtype))
        B, T, _ = codes.shape
        emb = self.embed_speaker(ref_frame)                        # (B, 64)
        tiled = (emb.reshape(B, 1, self.config.speaker_embed_dim)
                 + Tensor(np.zeros((B, T, self.config.speaker_embed_dim),
                                   dtype=self.dtype)))
        return self.body(gt.concat([codes, tiled], axis=-1))

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.astype(np.float32) for name, p in self.parameters()}

    def load_state(self, params: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters():
            p.data = params[name].astype(self.dtype)


def srd_decode(srd: SpeakerDecoder, codes: np.ndarray,
               ref_frame: np.ndarray) -> np.ndarray:
    """Real-length vectors (B, T, F) for codes + one reference frame."""
    with gt.no_grad():
        out = srd(codes, ref_frame)
    return out.data


def train_srd(corpus, vqvae: VqvaeModel, config: RunConfig,
              train_idx: list[int] | None = None, log=None
              ) -> tuple[SpeakerDecoder, list[dict]]:
    """Fit the speaker decoder; the encoder and codebook stay frozen.

    Each training pair combines the latent codes of one clip with a
    reference frame drawn from a uniformly random speaker and a random
    other clip; the target is the clip's motion re-rendered with that
    speaker's bone lengths. With few speakers the codes alone would give
    away the identity, and this pairing keeps the reference frame the only
    reliable path to the target's scale.
    """
    rng = np.random.default_rng(config.seed + 3)
    srd = SpeakerDecoder(config, np.random.default_rng(config.seed + 4))
    unit = corpus.features().astype(np.float32)
    real = corpus.real_features().astype(np.float32)
    speakers = np.asarray(corpus.speaker_ids())
    idx_all = np.arange(len(unit)) if train_idx is None else np.asarray(train_idx)

    # frozen encoder: cache the quantized latents once
    with gt.no_grad():
        latents = []
        for b0 in range(0, len(idx_all), config.batch_size):
            sel = idx_all[b0:b0 + config.batch_size]
            st, _ = vqvae.quantize(vqvae.encode(unit[sel]))
            latents.append(st.data)
    latents = np.concatenate(latents)
    unit_tr = unit[idx_all]
    spk_tr = speakers[idx_all]
    names = sorted(corpus.skeletons)
    lengths = {s: corpus.skeletons[s].bone_lengths.astype(np.float32)
               for s in names}
    by_speaker = {s: np.flatnonzero(spk_tr == s) for s in names}
    bones = config.bone_count
    T = unit.shape[1]

    opt = Adam(srd.parameters(), lr=config.srd_lr or config.lr)
    history = []
    n = len(latents)
    for epoch in range(config.srd_epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for b0 in range(0, n, config.batch_size):
            sel = order[b0:b0 + config.batch_size]
            refs, targets = [], []
            for i in sel:
                s = names[rng.integers(len(names))]
                peers = by_speaker[s]
                j = int(peers[rng.integers(len(peers))])
                refs.append(real[idx_all[j]][rng.integers(T)])
                scaled = (unit_tr[i].reshape(T, bones, 3)
                          * lengths[s][None, :, None])
                targets.append(scaled.reshape(T, bones * 3))
            out = srd(latents[sel], np.stack(refs))
            loss = mse(out, Tensor(np.stack(targets)))
            gt.backward(loss)
            opt.step()
            total += float(loss.data)
            batches += 1
        history.append({"epoch": epoch, "loss": total / batches})
        if log:
            log(f"srd epoch {epoch}: mse {total / batches:.5f}")
    return srd, history
