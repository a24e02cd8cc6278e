"""Run configuration: every hyperparameter in one serializable dataclass.

Defaults follow the reference training recipe for the gesture-mode corpus;
`toy()` shrinks the stack for minute-scale CPU runs used by the test suite.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace


@dataclass
class RunConfig:
    # data
    mode: str = "gesture"            # "gesture" (J=10) or "expressive" (J=43)
    frames: int = 34
    stride: int = 10
    fps: int = 15
    sample_rate: int = 16000
    seed_frames: int = 4             # N pre-condition frames

    # vq-vae
    codebook_size: int = 1024        # N_C
    code_dim: int = 64               # d_C; 128 for expressive mode
    hidden: int = 256
    encoder_res_blocks: int = 8
    encoder_transformer_layers: int = 4
    decoder_transformer_layers: int = 2
    attention_heads: int = 4
    ffn_multiplier: int = 4
    commitment_beta: float = 0.25
    ema_decay: float = 0.9
    ema_epsilon: float = 1e-5
    reset_patience: int = 1          # epochs without use before reseeding

    # speaker-related decoder
    speaker_embed_dim: int = 64
    speaker_res_blocks: int = 3

    # diffusion
    diffusion_steps: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    denoiser_transformer_layers: int = 8
    p_uncond: float = 0.1
    guidance: float = 1.0
    threshold_scale: float = 3.0     # clamp z0 estimates at this many latent stds

    # audio encoder (strided conv ladder down to one row per frame)
    audio_channels: tuple[int, ...] = (16, 32, 64, 32)

    # metric feature extractor (clip autoencoder)
    fe_dim: int = 32
    fe_hidden: int = 256
    fe_epochs: int = 40

    # optimization
    lr: float = 5e-4
    srd_lr: float | None = None        # falls back to lr
    diffusion_lr: float | None = None  # falls back to lr
    batch_size: int = 32
    vqvae_epochs: int = 50
    srd_epochs: int = 40
    diffusion_epochs: int = 120
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("gesture", "expressive"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.frames <= self.seed_frames:
            raise ValueError("clip length must exceed the seed frame count")

    @property
    def feature_width(self) -> int:
        return 27 if self.mode == "gesture" else 126

    @property
    def bone_count(self) -> int:
        return self.feature_width // 3

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "audio_channels" in d:
            d["audio_channels"] = tuple(d["audio_channels"])
        return cls(**d)

    @classmethod
    def expressive(cls, **overrides) -> "RunConfig":
        base = dict(mode="expressive", code_dim=128, lr=3e-4)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Desk-scale stack: same shape of pipeline, minutes not hours."""
        base = dict(
            codebook_size=64, code_dim=16, hidden=64,
            encoder_res_blocks=2, encoder_transformer_layers=2,
            decoder_transformer_layers=1, attention_heads=4,
            denoiser_transformer_layers=3, diffusion_steps=500,
            audio_channels=(8, 16, 16, 8),
            batch_size=32, vqvae_epochs=30, srd_epochs=100,
            diffusion_epochs=60, lr=1e-3, srd_lr=2e-3)
        base.update(overrides)
        return cls(**base)
