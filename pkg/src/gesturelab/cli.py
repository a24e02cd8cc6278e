"""Command-line entry points.

Subcommands: corpus | train-vqvae | train-srd | train-diffusion | generate |
repaint | eval | serve. Every command exits 0 on success and prints a
one-line ``error: <code>: <message>`` to stderr otherwise. Checkpoints
default to ``$GESTURELAB_HOME`` (or ``~/.gesturelab``); every flag mirroring
a RunConfig field overrides the corresponding hyperparameter.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as gt
from .audio_enc import AudioEncoder
from .checkpoint import (CheckpointError, CheckpointKindError,
                         CorruptCheckpointError, file_checksum,
                         load_checkpoint, save_checkpoint)
from .clips import audio_samples_for_frames
from .config import RunConfig
from .corpus import (CorpusConfig, CorpusFormatError, load_corpus,
                     save_corpus, synthesize_corpus, train_eval_split)
from .diffusion import (NoisePredictor, build_schedule, condition_channels,
                        generate_long, train_diffusion)
from .layers import ConfigError
from .metrics import (FeatureExtractor, beat_consistency, diversity, fgd,
                      train_feature_extractor)
from .repaint import (InfeasibleLayoutError, MaskError, parse_mask,
                      repaint_sample)
from .skeleton import base_skeleton, reconstruct_joints
from .tensor import NonFiniteError, ShapeError, Tensor
from .vqvae import SpeakerDecoder, TrainingDivergedError, VqvaeModel, train_vqvae

DEFAULT_HOME = "~/.gesturelab"

_ERROR_CODES = (
    (MaskError, "bad_mask"),
    (InfeasibleLayoutError, "infeasible_layout"),
    (ShapeError, "bad_shape"),
    (CheckpointKindError, "bad_checkpoint_kind"),
    (CorruptCheckpointError, "corrupt_checkpoint"),
    (CheckpointError, "bad_checkpoint"),
    (CorpusFormatError, "bad_corpus"),
    (TrainingDivergedError, "training_diverged"),
    (NonFiniteError, "non_finite"),
    (ConfigError, "bad_config"),
    (FileNotFoundError, "missing_file"),
    (IsADirectoryError, "missing_file"),
    (ValueError, "bad_value"),
)


def home_dir(override: str | None = None) -> Path:
    root = override or os.environ.get("GESTURELAB_HOME") or DEFAULT_HOME
    return Path(root).expanduser()


def default_ckpt(home: Path, kind: str) -> Path:
    return home / f"{kind}.ckpt"


# ---------------------------------------------------------------------------
# config plumbing: one optional flag per RunConfig field


_CONFIG_FIELDS = [f for f in dataclasses.fields(RunConfig)]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("hyperparameters")
    group.add_argument("--toy", action="store_true",
                       help="start from the desk-scale toy configuration")
    for f in _CONFIG_FIELDS:
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("int", "float", "str"):
            group.add_argument(flag, type={"int": int, "float": float,
                                           "str": str}[f.type], default=None)
        elif f.type in ("int | None", "float | None"):
            group.add_argument(flag, type=float, default=None)
        elif f.type == "tuple[int, ...]":
            group.add_argument(flag, type=lambda s: tuple(
                int(x) for x in s.split(",")), default=None)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for f in _CONFIG_FIELDS:
        value = getattr(args, f.name, None)
        if value is None:
            continue
        if f.type == "int":
            value = int(value)
        overrides[f.name] = value
    if getattr(args, "toy", False):
        return RunConfig.toy(**overrides)
    return RunConfig(**overrides)


def _load_model_config(raw: dict) -> RunConfig:
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# artifact helpers


def _load_array(path: str, *, dtype=np.float32) -> np.ndarray:
    arr = np.load(path)
    if isinstance(arr, np.lib.npyio.NpzFile):
        if "features" not in arr:
            raise ShapeError(f"{path} holds no 'features' array")
        arr = arr["features"]
    return np.asarray(arr, dtype=dtype)


def _save_clip(path: str, meta: dict, **arrays: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def _load_stack(args) -> tuple[RunConfig, VqvaeModel, NoisePredictor,
                               AudioEncoder, float, dict]:
    """Load the vqvae + diffusion checkpoints a sampling command needs."""
    home = home_dir(getattr(args, "home", None))
    vq_path = Path(args.vqvae or default_ckpt(home, "vqvae"))
    df_path = Path(args.diffusion or default_ckpt(home, "diffusion"))
    for p in (vq_path, df_path):
        if not p.exists():
            raise CheckpointError(f"missing checkpoint: {p}")
    _, vq_cfg, _, vq_params = load_checkpoint(vq_path, expect_kind="vqvae")
    _, df_cfg, df_meta, df_params = load_checkpoint(df_path,
                                                    expect_kind="diffusion")
    config = _load_model_config(df_cfg)
    if _load_model_config(vq_cfg).config_hash() != config.config_hash():
        raise CheckpointError(
            "vqvae and diffusion checkpoints were trained with different "
            "configurations")
    vq = VqvaeModel(config)
    vq.load_state(vq_params)
    pred = NoisePredictor(config)
    pred.load_state(df_params)
    aud = AudioEncoder(config)
    aud.load_state(df_params)
    checksums = {"vqvae": file_checksum(vq_path),
                 "diffusion": file_checksum(df_path)}
    return config, vq, pred, aud, float(df_meta["latent_std"]), checksums


def _rest_seed(config: RunConfig) -> np.ndarray:
    """Seed frames for generation without motion context: the rest pose."""
    from .corpus import _rest_directions
    unit, _ = _rest_directions(config.mode)
    return np.tile(unit.reshape(1, -1), (config.seed_frames, 1)).astype(np.float32)


# ---------------------------------------------------------------------------
# subcommands


def cmd_corpus(args) -> int:
    cfg = CorpusConfig(mode=args.mode, speakers=args.speakers,
                       clips_per_speaker=args.clips_per_speaker,
                       seed=args.seed)
    corpus = synthesize_corpus(cfg)
    root = save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.clips)} clips to {root}")
    return 0


def cmd_train_vqvae(args) -> int:
    config = _config_from_args(args)
    corpus = load_corpus(args.corpus)
    train_idx, _ = train_eval_split(corpus)
    log = None if args.quiet else _epoch_logger("vqvae")
    model, history = train_vqvae(corpus, config, train_idx, log=log)
    out = Path(args.out or default_ckpt(home_dir(args.home), "vqvae"))
    meta = {"epochs": len(history), "final": history[-1],
            "config_hash": config.config_hash()}
    digest = save_checkpoint(out, "vqvae", config.to_dict(), meta, model.state())
    print(f"saved {out} sha256={digest[:16]} "
          f"recon_mse={history[-1]['recon_mse']:.5f}")
    return 0


def cmd_train_srd(args) -> int:
    config = _config_from_args(args)
    corpus = load_corpus(args.corpus)
    train_idx, _ = train_eval_split(corpus)
    vq = _load_vqvae(args, config)
    log = None if args.quiet else _epoch_logger("srd")
    model, history = _train_srd(corpus, vq, config, train_idx, log)
    out = Path(args.out or default_ckpt(home_dir(args.home), "srd"))
    meta = {"epochs": len(history), "final": history[-1],
            "config_hash": config.config_hash()}
    digest = save_checkpoint(out, "srd", config.to_dict(), meta, model.state())
    print(f"saved {out} sha256={digest[:16]} loss={history[-1]['loss']:.5f}")
    return 0


def _train_srd(corpus, vq, config, train_idx, log):
    from .vqvae import train_srd
    return train_srd(corpus, vq, config, train_idx, log=log)


def _load_vqvae(args, config: RunConfig) -> VqvaeModel:
    path = Path(args.vqvae or default_ckpt(home_dir(args.home), "vqvae"))
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    _, raw_cfg, _, params = load_checkpoint(path, expect_kind="vqvae")
    if _load_model_config(raw_cfg).config_hash() != config.config_hash():
        raise CheckpointError(
            f"{path} was trained with a different configuration")
    model = VqvaeModel(config)
    model.load_state(params)
    return model


def cmd_train_diffusion(args) -> int:
    config = _config_from_args(args)
    corpus = load_corpus(args.corpus)
    train_idx, _ = train_eval_split(corpus)
    vq = _load_vqvae(args, config)
    log = None if args.quiet else _epoch_logger("diffusion")
    pred, aud, history, latent_std = train_diffusion(corpus, vq, config,
                                                     train_idx, log=log)
    out = Path(args.out or default_ckpt(home_dir(args.home), "diffusion"))
    params = dict(pred.state())
    params.update(aud.state())
    meta = {"epochs": len(history), "final": history[-1],
            "latent_std": float(latent_std),
            "config_hash": config.config_hash()}
    digest = save_checkpoint(out, "diffusion", config.to_dict(), meta, params)
    print(f"saved {out} sha256={digest[:16]} loss={history[-1]['loss']:.5f}")
    return 0


def cmd_generate(args) -> int:
    config, vq, pred, aud, latent_std, checksums = _load_stack(args)
    audio = _load_array(args.audio).reshape(-1)
    if args.seed_frames:
        seed = _load_array(args.seed_frames)
    else:
        seed = _rest_seed(config)
    w = config.guidance if args.guidance is None else args.guidance
    rng = np.random.default_rng(args.rng_seed)
    t0 = time.time()
    out = generate_long(pred, aud, vq, audio, seed, config, rng, w=w,
                        s_thr=config.threshold_scale * latent_std)
    arrays = {"features": out["features"], "latents": out["latents"]}
    if args.decoder == "real":
        srd, srd_sum = _load_srd(args, config)
        checksums["srd"] = srd_sum
        ref = _load_array(args.ref_frame).reshape(-1)
        if ref.shape[0] != config.feature_width:
            raise ShapeError(
                f"reference frame has {ref.shape[0]} values, expected "
                f"{config.feature_width}")
        with gt.no_grad():
            arrays["real_features"] = srd(out["latents"][None],
                                          ref[None]).data[0]
    meta = {"config_hash": config.config_hash(), "checkpoints": checksums,
            "rng_seed": args.rng_seed, "guidance": w,
            "decoder": args.decoder, "frames": int(out["features"].shape[0]),
            "seconds": round(time.time() - t0, 3)}
    _save_clip(args.out, meta, **arrays)
    print(f"wrote {args.out} frames={meta['frames']} in {meta['seconds']}s")
    return 0


def _load_srd(args, config: RunConfig) -> tuple[SpeakerDecoder, str]:
    path = Path(getattr(args, "srd", None)
                or default_ckpt(home_dir(args.home), "srd"))
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    _, raw_cfg, _, params = load_checkpoint(path, expect_kind="srd")
    if _load_model_config(raw_cfg).config_hash() != config.config_hash():
        raise CheckpointError(
            f"{path} was trained with a different configuration")
    model = SpeakerDecoder(config)
    model.load_state(params)
    return model, file_checksum(path)


def cmd_repaint(args) -> int:
    config, vq, pred, aud, latent_std, checksums = _load_stack(args)
    clip = _load_array(args.clip)
    if clip.shape != (config.frames, config.feature_width):
        raise ShapeError(
            f"clip {clip.shape} != ({config.frames}, {config.feature_width})")
    mask = parse_mask(args.mask, config.frames)
    audio = _load_array(args.audio).reshape(-1)
    rng = np.random.default_rng(args.rng_seed)
    schedule = build_schedule(config.diffusion_steps, config.beta_start,
                              config.beta_end)
    w = config.guidance if args.guidance is None else args.guidance
    with gt.no_grad():
        pinned = vq.encode(clip[None]).data[0]
        a_feat = aud(audio, frames=config.frames).data
    cond = condition_channels(pinned[:config.seed_frames], a_feat,
                              config.frames, config.code_dim, pred.audio_dim)
    z = repaint_sample(pred.predict, cond, pinned, mask, schedule, rng,
                       w=w, s_thr=config.threshold_scale * latent_std)
    with gt.no_grad():
        quantized, _ = vq.quantize(Tensor(z.astype(np.float32)[None]))
        feats = vq.decode(quantized).data[0]
    meta = {"config_hash": config.config_hash(), "checkpoints": checksums,
            "rng_seed": args.rng_seed, "guidance": w, "mask": args.mask}
    _save_clip(args.out, meta, features=feats,
               latents=z.astype(np.float32))
    print(f"wrote {args.out} regenerated_frames={int((~mask).sum())}")
    return 0


def cmd_eval(args) -> int:
    config = _config_from_args(args)
    corpus = load_corpus(args.corpus)
    train_idx, _ = train_eval_split(corpus)
    reference = corpus.features().astype(np.float32)

    home = home_dir(args.home)
    fe_path = Path(args.fe or default_ckpt(home, "feature-extractor"))
    if fe_path.exists():
        _, raw_cfg, _, params = load_checkpoint(fe_path,
                                                expect_kind="feature-extractor")
        fe = FeatureExtractor(_load_model_config(raw_cfg))
        fe.load_state(params)
    else:
        fe, history = train_feature_extractor(corpus, config, train_idx)
        meta = {"epochs": len(history), "final": history[-1],
                "config_hash": config.config_hash()}
        save_checkpoint(fe_path, "feature-extractor", config.to_dict(), meta,
                        fe.state())

    if args.generated:
        clips = _load_array(args.generated)
        if clips.ndim == 2:
            clips = clips[None]
        label = str(args.generated)
    else:
        clips = reference
        label = "reference"
    if clips.shape[0] != len(corpus.audio):
        if args.generated and clips.shape[1:] == reference.shape[1:]:
            pass  # a subset is fine for fgd/diversity, bc pairs by position
        else:
            raise ShapeError(
                f"clip set {clips.shape} does not match the corpus layout "
                f"{reference.shape}")
    bones = config.bone_count
    bc_scores = [
        beat_consistency(clips[i].reshape(-1, bones, 3),
                         corpus.audio[i].samples, fps=config.fps)
        for i in range(min(len(clips), len(corpus.audio)))]
    report = {
        "clips": label,
        "n_clips": int(clips.shape[0]),
        "fgd": float(fgd(clips, reference, fe)),
        "bc": float(np.mean(bc_scores)),
        "diversity": float(diversity(clips, fe)),
        "extractor_checksum": file_checksum(fe_path),
        "config_hash": config.config_hash(),
        "corpus_seed": corpus.config.seed,
    }
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_app
    app = build_app(home_dir(args.home))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _epoch_logger(tag: str):
    def log(epoch: int, record: dict) -> None:
        parts = " ".join(f"{k}={v:.5f}" for k, v in record.items()
                         if isinstance(v, float))
        print(f"[{tag}] epoch {epoch} {parts}", file=sys.stderr)
    return log


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gesturelab",
        description="gesture generation: corpus, training, sampling, editing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="synthesize a gesture/audio corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="gesture",
                   choices=("gesture", "expressive"))
    p.add_argument("--speakers", type=int, default=2)
    p.add_argument("--clips-per-speaker", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corpus)

    for name, func, needs_vq in (
            ("train-vqvae", cmd_train_vqvae, False),
            ("train-srd", cmd_train_srd, True),
            ("train-diffusion", cmd_train_diffusion, True)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} on a corpus")
        p.add_argument("--corpus", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--home", default=None)
        p.add_argument("--quiet", action="store_true")
        if needs_vq:
            p.add_argument("--vqvae", default=None)
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("generate", help="generate gestures for a waveform")
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed-frames", default=None)
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--rng-seed", type=int, required=True)
    p.add_argument("--decoder", default="unit", choices=("unit", "real"))
    p.add_argument("--ref-frame", default=None)
    p.add_argument("--vqvae", default=None)
    p.add_argument("--diffusion", default=None)
    p.add_argument("--srd", default=None)
    p.add_argument("--home", default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("repaint", help="regenerate the unknown frames of a clip")
    p.add_argument("--clip", required=True)
    p.add_argument("--mask", required=True,
                   help="mask spec, e.g. known:0-3,24-33")
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--rng-seed", type=int, required=True)
    p.add_argument("--vqvae", default=None)
    p.add_argument("--diffusion", default=None)
    p.add_argument("--home", default=None)
    p.set_defaults(func=cmd_repaint)

    p = sub.add_parser("eval", help="metric report for a clip set")
    p.add_argument("--corpus", required=True)
    p.add_argument("--generated", default=None,
                   help="npz/npy clip set; defaults to the reference corpus")
    p.add_argument("--fe", default=None,
                   help="feature-extractor checkpoint; trained when absent")
    p.add_argument("--out", default=None)
    p.add_argument("--home", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP editing service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--home", default=None)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except tuple(cls for cls, _ in _ERROR_CODES) as exc:
        for cls, code in _ERROR_CODES:
            if isinstance(exc, cls):
                print(f"error: {code}: {exc}", file=sys.stderr)
                return 1
        raise  # unreachable


if __name__ == "__main__":
    sys.exit(main())
