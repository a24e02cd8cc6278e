"""Evaluation metrics: Frechet gesture distance, beat consistency, diversity.

All three run over a frozen clip autoencoder's feature space (FGD and
diversity) or directly on motion kinematics (beat consistency). The
extractor is trained once per corpus and persisted; metric reports embed its
checksum so numbers stay comparable across runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as gt
from .config import RunConfig
from .layers import LEAKY_SLOPE, Linear, Module, mse
from .optim import Adam
from .skeleton import bone_angle_change
from .tensor import ShapeError, Tensor
from .vqvae import TrainingDivergedError

log = logging.getLogger(__name__)

BC_SIGMA = 0.1  # seconds; width of the beat-matching kernel


# ---------------------------------------------------------------------------
# feature extractor


class FeatureExtractor(Module):
    """Clip autoencoder whose bottleneck is the metric feature space.

    Frames are flattened in temporal order before the bottleneck, so the
    features are sensitive to frame ordering, not only to pose content.
    """

    def __init__(self, config: RunConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(config.seed + 23)
        d_in = config.frames * config.feature_width
        h, d_f = config.fe_hidden, config.fe_dim
        self.enc1 = Linear(d_in, h, rng, dtype=dtype)
        self.enc2 = Linear(h, d_f, rng, dtype=dtype)
        self.dec1 = Linear(d_f, h, rng, dtype=dtype)
        self.dec2 = Linear(h, d_in, rng, dtype=dtype)
        self.d_in, self.d_f = d_in, d_f
        self.config = config
        self.dtype = dtype

    def _flatten(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 3:
            x = x.reshape(x.shape[0], x.shape[1] * x.shape[2])
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"expected (n, {self.d_in}) clips, got {x.shape}")
        return x

    def encode(self, x) -> Tensor:
        h = self.enc1(self._flatten(x)).leaky_relu(LEAKY_SLOPE)
        return self.enc2(h)

    def decode(self, f: Tensor) -> Tensor:
        h = self.dec1(f).leaky_relu(LEAKY_SLOPE)
        return self.dec2(h)

    def features(self, clips: np.ndarray) -> np.ndarray:
        """Motion features (n, T, F) or (n, T*F) -> metric features (n, d_f)."""
        with gt.no_grad():
            return self.encode(clips).data

    def state(self, prefix: str = "fe.") -> dict[str, np.ndarray]:
        return {prefix + n: p.data.astype(np.float32) for n, p in self.parameters()}

    def load_state(self, params: dict[str, np.ndarray], prefix: str = "fe.") -> None:
        for n, p in self.parameters():
            p.data = params[prefix + n].astype(self.dtype)


def train_feature_extractor(corpus, config: RunConfig,
                            train_idx: list[int] | None = None, log_fn=None
                            ) -> tuple[FeatureExtractor, list[dict]]:
    """Fit the metric autoencoder on corpus unit-direction clips."""
    rng = np.random.default_rng(config.seed + 21)
    fe = FeatureExtractor(config, np.random.default_rng(config.seed + 22))
    feats = corpus.features().astype(np.float32)
    if train_idx is not None:
        feats = feats[train_idx]
    n = len(feats)
    opt = Adam(fe.parameters(), lr=config.lr)
    history: list[dict] = []
    step = 0
    for epoch in range(config.fe_epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for b0 in range(0, n, config.batch_size):
            batch = fe._flatten(feats[order[b0:b0 + config.batch_size]])
            try:
                loss = mse(fe.decode(fe.encode(batch)), batch)
                gt.backward(loss)
            except (gt.NonFiniteError, FloatingPointError) as e:
                raise TrainingDivergedError(step, str(e))
            opt.step()
            total += float(loss.data)
            batches += 1
            step += 1
        history.append({"epoch": epoch, "loss": total / batches})
        if log_fn:
            log_fn(f"fe epoch {epoch}: mse {total / batches:.5f}")
    return fe, history


# ---------------------------------------------------------------------------
# Frechet gesture distance


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        if self.cov.shape != (len(self.mean), len(self.mean)):
            raise ShapeError(
                f"covariance {self.cov.shape} does not match mean "
                f"({len(self.mean)},)")
        if np.abs(self.cov - self.cov.T).max() > 1e-8:
            raise ValueError("covariance not symmetric")

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or len(feats) < 2:
            raise ShapeError("need an (n >= 2, d) feature matrix")
        mean = feats.mean(axis=0)
        centered = feats - mean
        cov = centered.T @ centered / (len(feats) - 1)
        return cls(mean, (cov + cov.T) / 2.0)


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues clipped at zero."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Frechet distance between two Gaussians over the feature space."""
    cov_a, cov_b = a.cov, b.cov
    min_eig = min(np.linalg.eigvalsh(cov_a).min(),
                  np.linalg.eigvalsh(cov_b).min())
    if min_eig < 1e-10:
        log.warning("near-singular covariance (min eigenvalue %.3e); "
                    "regularizing with 1e-6 I", min_eig)
        eye = np.eye(len(a.mean))
        cov_a = cov_a + 1e-6 * eye
        cov_b = cov_b + 1e-6 * eye
    root_b = _sqrt_psd(cov_b)
    inner = root_b @ cov_a @ root_b
    cross = np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0),
                            0.0, None)).sum()
    diff = a.mean - b.mean
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(val, 0.0)


def fgd(set_a: np.ndarray, set_b: np.ndarray, fe: FeatureExtractor) -> float:
    """Frechet distance between two clip sets in the extractor's space."""
    return frechet_distance(GaussianStats.from_features(fe.features(set_a)),
                            GaussianStats.from_features(fe.features(set_b)))


# ---------------------------------------------------------------------------
# beat consistency


def motion_beat_times(unit_dirs: np.ndarray, fps: float) -> np.ndarray:
    """Local maxima (3-frame window) of the mean absolute angle change rate."""
    rate = bone_angle_change(np.asarray(unit_dirs, dtype=np.float64))
    t = np.arange(1, len(rate) - 1)
    # margin keeps float jitter on flat segments from minting peaks
    eps = 1e-8 * max(rate.max(), 1e-30)
    peaks = t[(rate[t] > rate[t - 1] + eps) & (rate[t] > rate[t + 1] + eps)]
    return peaks / fps


def beat_consistency(clip, audio, sigma: float = BC_SIGMA,
                     fps: float | None = None) -> float:
    """Mean Gaussian-kernel match between audio beats and motion beats.

    Accepts a GestureClip or a raw (T, bones, 3) unit-direction array, and
    an AudioClip or a raw beat-time array. Returns a score in [0, 1].
    """
    dirs = clip.unit_dirs if hasattr(clip, "unit_dirs") else np.asarray(clip)
    if fps is None:
        fps = getattr(clip, "fps", 15)
    beats = (audio.beat_times if hasattr(audio, "beat_times")
             else np.asarray(audio, dtype=np.float64))
    if len(beats) == 0:
        log.warning("no audio beats; beat consistency reported as 0")
        return 0.0
    motion = motion_beat_times(dirs, fps)
    if len(motion) == 0:
        log.warning("no motion beats; beat consistency reported as 0")
        return 0.0
    gaps = np.abs(beats[:, None] - motion[None, :]).min(axis=1)
    return float(np.exp(-gaps ** 2 / (2.0 * sigma ** 2)).mean())


# ---------------------------------------------------------------------------
# diversity


def diversity(clip_set: np.ndarray, fe: FeatureExtractor,
              pairs: int = 500, seed: int = 0) -> float:
    """Mean feature distance between the set and a shuffled pairing of it."""
    feats = fe.features(np.asarray(clip_set))
    n = len(feats)
    if n < 2:
        raise ShapeError("diversity needs at least 2 clips")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    take = min(pairs, n)
    rows = rng.permutation(n)[:take]
    return float(np.linalg.norm(feats[rows] - feats[perm[rows]], axis=1).mean())
