"""Command-line entry point.

    epg pretrain|finetune-dm|finetune-cm --config FILE [--resume CKPT] [--seed N] [--out DIR]
    epg sample --checkpoint CKPT [--count N] [--out DIR]
    epg eval   --checkpoint CKPT [--data DIR] [--count N]
    epg diag   --checkpoint CKPT [--data DIR]
    epg make-data --out DIR [--per-class N]

Exit codes: 0 success, 2 usage or invalid input, 3 numerical failure.
The accelerator is selected with ``EPG_DEVICE`` (only ``cpu`` in this build).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .config import STAGES, ConfigError, RunConfig
from .eval import (
    FeatureStats,
    feature_stats,
    frechet_distance,
    per_channel_std,
    plot_curve,
    probe_times,
    write_report,
)
from .nnet import Encoder
from .sampling import SamplerConfig, SamplingError, generate
from .toydata import write_dataset
from .training import (
    CheckpointError,
    NumericalFailure,
    TrainState,
    build_state,
    fit,
    init_from_pretrain,
    load_checkpoint,
    read_checkpoint,
)
from .trajectory import load_dataset, to_bytes

log = logging.getLogger("epg")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def select_device() -> torch.device:
    name = os.environ.get("EPG_DEVICE", "cpu")
    if name != "cpu":
        raise UsageError(f"EPG_DEVICE={name!r}: only 'cpu' is supported by this build")
    return torch.device(name)


def code_version() -> str:
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def write_run_manifest(out: Path, config: RunConfig, command: str, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.yaml")
    manifest = {"command": command, "seed": config.seed, "config_hash": config.config_hash(),
                "code_version": code_version(), "package_version": __version__, "config": config.to_dict(),
                "created": time.strftime("%Y-%m-%dT%H:%M:%S"), **(extra or {})}
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1))


def _config_from_args(args, stage: str) -> RunConfig:
    raw = {}
    if args.config:
        try:
            import yaml

            raw = yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config file must contain a mapping")
    if raw.get("stage", stage) != stage:
        raise UsageError(f"config is for stage {raw['stage']!r} but the command is {stage!r}")
    raw["stage"] = stage
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out:
        raw["out_dir"] = args.out
    if getattr(args, "init", None):
        raw["init_checkpoint"] = args.init
    if getattr(args, "steps", None):
        raw.setdefault("train", {})["total_steps"] = args.steps
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# evaluation helpers shared by training callbacks and commands


def load_feature_encoder(path) -> Encoder:
    """Frozen encoder for FID-proxy features: a checkpoint's ``frozen`` set, else its online encoder."""
    tensors, manifest = read_checkpoint(path)
    config = RunConfig.from_dict(manifest["config"])
    enc = Encoder(config.network, config.diffusion)
    prefix = "frozen." if any(k.startswith("frozen.") for k in tensors) else "online.encoder."
    enc.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    enc.requires_grad_(False)
    return enc.eval()


def reference_images(dataset, count: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(12345)
    idx = torch.randperm(len(dataset), generator=g)[: min(count, len(dataset))]
    return dataset[idx].x0


def _sampler(config: RunConfig, method=None, steps=None, cfg_scale=None) -> SamplerConfig:
    s = config.sampler
    return SamplerConfig(steps=steps or s.steps, method=method or s.method,
                         cfg_scale=cfg_scale if cfg_scale is not None else s.cfg_scale,
                         cfg_interval=tuple(s.cfg_interval), resolution=config.data.resolution,
                         diffusion=config.diffusion)


def _labels(config: RunConfig, count: int):
    if not config.network.conditional:
        return None
    return torch.arange(count) % config.network.num_classes


def sample_fid(net, config: RunConfig, feature_enc: Encoder, ref: FeatureStats, count: int, seed: int,
               method=None, steps=None) -> float:
    sampler = _sampler(config, method, steps)
    images, _ = generate(net, sampler, count, seed, _labels(config, count), config.sampler.batch)
    return frechet_distance(feature_stats(feature_enc, images.clamp(-1, 1)), ref)


class PeriodicEval:
    """FID-proxy of an EMA snapshot every ``every`` steps."""

    def __init__(self, config: RunConfig, dataset, feature_enc: Encoder, path: Path | None):
        self.config = config
        self.every = config.eval.every
        self.enc = feature_enc
        self.ref = feature_stats(feature_enc, reference_images(dataset, config.eval.count))
        self.path = path
        self.results: list[dict] = []

    def __call__(self, state: TrainState, record: dict):
        if not self.every or state.step % self.every:
            return
        snapshot = copy.deepcopy(state.bundle.ema)
        fid = sample_fid(snapshot, self.config, self.enc, self.ref, self.config.eval.count, self.config.seed)
        entry = {"step": state.step, "fid_proxy": fid}
        record["fid_proxy"] = fid
        self.results.append(entry)
        log.info("step %d fid_proxy %.4f", state.step, fid)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")


class PeriodicDiag:
    """Collapse diagnostic of an encoder snapshot every ``every`` steps."""

    def __init__(self, config: RunConfig, dataset, path: Path | None):
        self.config = config
        self.every = config.eval.diag_every
        self.images = reference_images(dataset, config.eval.diag_samples)
        self.times = probe_times(config.diffusion, config.data.resolution, config.eval.diag_probes)
        self.path = path

    def __call__(self, state: TrainState, record: dict):
        if not self.every or state.step % self.every:
            return
        snapshot = copy.deepcopy(state.online.encoder)
        report = per_channel_std(snapshot, self.images, self.times, seed=self.config.seed)
        record["diag_ratio"] = report.ratios()
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps({"step": state.step, **report.to_dict()}) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, stage: str) -> int:
    select_device()
    config = _config_from_args(args, stage)
    out = Path(config.out_dir)
    try:
        dataset = load_dataset(config.data.path, config.data.resolution, config.data.split)
    except RuntimeError as exc:
        raise UsageError(str(exc)) from exc
    if config.network.conditional and dataset.num_classes > config.network.num_classes:
        raise UsageError(f"dataset has {dataset.num_classes} classes but network.num_classes is "
                         f"{config.network.num_classes}")

    if args.resume:
        state = load_checkpoint(args.resume, expected=config, out_dir=out)
        log.info("resumed from %s at step %d", args.resume, state.step)
    else:
        state = build_state(config, out)
        if stage != "pretrain":
            if config.ablation.from_scratch:
                if stage == "finetune-cm" and not config.ablation.no_aux_loss:
                    # no pre-trained encoder to freeze: the auxiliary loss uses the initial encoder
                    log.warning("from-scratch run: auxiliary loss uses the randomly initialized encoder")
            elif config.init_checkpoint:
                init_from_pretrain(state, config.init_checkpoint)
            else:
                raise UsageError("fine-tuning needs init_checkpoint (or ablation.from_scratch: true)")
    write_run_manifest(out, config, " ".join(sys.argv), {"resume": args.resume})

    callbacks = []
    if stage == "pretrain" and config.eval.diag_every:
        callbacks.append(PeriodicDiag(config, dataset, out / "diag.jsonl"))
    if stage != "pretrain" and config.eval.every:
        feat = config.eval.feature_checkpoint or config.init_checkpoint
        if not feat:
            raise UsageError("periodic evaluation needs eval.feature_checkpoint")
        callbacks.append(PeriodicEval(config, dataset, load_feature_encoder(feat), out / "eval.jsonl"))

    fit(state, dataset, callbacks=callbacks)
    log.info("finished %s at step %d; checkpoint %s", stage, state.step, out / "checkpoint.safetensors")
    return EXIT_OK


def save_grid(images: torch.Tensor, path: Path, nrow: int = 8) -> None:
    """8-bit RGB grid of images in [-1, 1]."""
    px = to_bytes(images).permute(0, 2, 3, 1).numpy()
    n, h, w, c = px.shape
    rows = (n + nrow - 1) // nrow
    grid = np.zeros((rows * h, nrow * w, c), dtype=np.uint8)
    for i, im in enumerate(px):
        r, col = divmod(i, nrow)
        grid[r * h : (r + 1) * h, col * w : (col + 1) * w] = im
    Image.fromarray(grid).save(path)


def _sample_state(path) -> TrainState:
    state = load_checkpoint(path)
    if state.stage == "pretrain":
        raise UsageError("sampling needs a fine-tuned checkpoint, not a pre-training one")
    return state


def cmd_sample(args) -> int:
    select_device()
    state = _sample_state(args.checkpoint)
    config = state.config
    try:
        sampler = _sampler(config, args.method, args.steps, args.cfg_scale)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    count = args.count or config.sampler.count
    seed = config.seed if args.seed is None else args.seed
    out = Path(args.out or Path(config.out_dir) / "samples")
    out.mkdir(parents=True, exist_ok=True)
    labels = _labels(config, count)
    images, nfe = generate(state.bundle.ema, sampler, count, seed, labels, config.sampler.batch, args.cm_steps)
    files = []
    for i in range(0, count, 64):
        name = f"grid_{i // 64:04d}.png"
        save_grid(images[i : i + 64], out / name)
        files.append(name)
    manifest = {"checkpoint": str(args.checkpoint), "step": state.step, "seed": seed, "count": count,
                "nfe": nfe, "method": sampler.method, "steps": sampler.steps if sampler.method != "cm_onestep"
                else args.cm_steps, "cfg_scale": sampler.cfg_scale, "cfg_interval": list(sampler.cfg_interval),
                "t_max": sampler.t_max, "weights": "ema", "config_hash": config.config_hash(),
                "code_version": code_version(), "files": files,
                "sha256": {f: hashlib.sha256((out / f).read_bytes()).hexdigest() for f in files}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    print(json.dumps({"out": str(out), "nfe": nfe, "count": count}))
    return EXIT_OK


def _dataset_for(config: RunConfig, data: str | None):
    try:
        return load_dataset(data or config.data.path, config.data.resolution, config.data.split)
    except RuntimeError as exc:
        raise UsageError(str(exc)) from exc


def cmd_eval(args) -> int:
    select_device()
    state = _sample_state(args.checkpoint)
    config = state.config
    dataset = _dataset_for(config, args.data)
    count = args.count or config.eval.count
    feat_path = args.feature_checkpoint or config.eval.feature_checkpoint or config.init_checkpoint
    if not feat_path:
        raise UsageError("eval needs --feature-checkpoint (a pre-training checkpoint)")
    enc = load_feature_encoder(feat_path)
    if count < enc.cfg.dim_enc:
        log.warning("count %d < feature dim %d: covariance estimate is unstable", count, enc.cfg.dim_enc)
    seed = config.seed if args.seed is None else args.seed
    ref = feature_stats(enc, reference_images(dataset, count))
    sampler = _sampler(config, args.method, args.steps)
    images, nfe = generate(state.bundle.ema, sampler, count, seed, _labels(config, count), config.sampler.batch)
    fid = frechet_distance(feature_stats(enc, images.clamp(-1, 1)), ref)
    out = Path(args.out or Path(config.out_dir) / "eval")
    settings = {"method": sampler.method, "steps": sampler.steps, "cfg_scale": sampler.cfg_scale,
                "cfg_interval": list(sampler.cfg_interval), "nfe": nfe, "seed": seed,
                "feature_checkpoint": str(feat_path), "step": state.step}
    write_report(out / "metrics.jsonl", {"fid_proxy": fid}, count, config.config_hash(), {"sampler": settings})
    curve = Path(config.out_dir) / "eval.jsonl"
    if curve.exists():
        rows = [json.loads(line) for line in curve.read_text().splitlines() if line.strip()]
        if rows:
            plot_curve(out / "fid_vs_step.png", [r["step"] for r in rows], [r["fid_proxy"] for r in rows],
                       "step", "FID-proxy")
    print(json.dumps({"fid_proxy": fid, "count": count, **settings}))
    return EXIT_OK


def cmd_diag(args) -> int:
    select_device()
    tensors, manifest = read_checkpoint(args.checkpoint)
    config = RunConfig.from_dict(manifest["config"])
    enc = Encoder(config.network, config.diffusion)
    prefix = "online.encoder."
    enc.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    dataset = _dataset_for(config, args.data)
    images = reference_images(dataset, args.count or config.eval.diag_samples)
    times = probe_times(config.diffusion, config.data.resolution, config.eval.diag_probes)
    report = per_channel_std(enc, images, times, seed=config.seed)
    out = Path(args.out or Path(config.out_dir) / "diag")
    out.mkdir(parents=True, exist_ok=True)
    (out / "diag.json").write_text(json.dumps({"step": manifest["step"], "config_hash": manifest["config_hash"],
                                               **report.to_dict()}, indent=1))
    plot_curve(out / "std_vs_t.png", report.times, report.channel_mean_std, "t", "channel-mean std",
               logx=True, hline=report.reference)
    print(f"{'t':>10} {'std':>10} {'std*sqrt(d)':>12}")
    for t, s, r in zip(report.times, report.channel_mean_std, report.ratios()):
        print(f"{t:10.4f} {s:10.5f} {r:12.3f}")
    return EXIT_OK


def cmd_make_data(args) -> int:
    root = write_dataset(args.out, args.per_class, args.resolution, args.seed)
    print(json.dumps({"out": str(root), "per_class": args.per_class}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        s = sub.add_parser(stage, help=f"run the {stage} stage")
        s.add_argument("--config", help="YAML file of overrides")
        s.add_argument("--resume", help="checkpoint to resume from")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--steps", type=int, help="override train.total_steps")
        if stage != "pretrain":
            s.add_argument("--init", help="pre-training checkpoint to initialize the encoder")

    s = sub.add_parser("sample", help="generate PNG grids from a fine-tuned checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--method", choices=("heun", "euler", "cm_onestep"))
    s.add_argument("--steps", type=int)
    s.add_argument("--cfg-scale", type=float)
    s.add_argument("--cm-steps", type=int, default=1, choices=(1, 2))

    s = sub.add_parser("eval", help="FID-proxy of a fine-tuned checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--feature-checkpoint")
    s.add_argument("--method", choices=("heun", "euler", "cm_onestep"))
    s.add_argument("--steps", type=int)

    s = sub.add_parser("diag", help="per-channel std collapse diagnostic of an encoder")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--count", type=int)
    s.add_argument("--out")

    s = sub.add_parser("make-data", help="write the procedural 10-class dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--per-class", type=int, default=500)
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command in STAGES:
            return cmd_train(args, args.command)
        return {"sample": cmd_sample, "eval": cmd_eval, "diag": cmd_diag, "make-data": cmd_make_data}[
            args.command](args)
    except (UsageError, ConfigError, CheckpointError) as exc:
        print(f"epg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"epg: numerical failure: {exc}; diagnostic dump: {exc.dump_path}", file=sys.stderr)
        return EXIT_NUMERIC
    except SamplingError as exc:
        print(f"epg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
