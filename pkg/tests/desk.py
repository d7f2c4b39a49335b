"""Desk-scale experiment harness for the long acceptance criteria.

Runs go through the command-line entry point. Outputs live under
``$EPG_DESK_DIR`` (default ``runs/acceptance``), so an interrupted session
resumes from the last checkpoint and finished runs are reused.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path

import torch
import yaml

from epg.cli import load_feature_encoder, main, reference_images, sample_fid
from epg.config import RunConfig
from epg.eval import feature_stats, per_channel_std, probe_times
from epg.nnet import Encoder
from epg.toydata import write_dataset
from epg.training import build_state, init_from_pretrain, load_checkpoint, read_checkpoint
from epg.trajectory import load_dataset

SEEDS = (0, 1, 2)
CONFIGS = Path(__file__).parents[1] / "configs"
ROOT = Path(os.environ.get("EPG_DESK_DIR", Path(__file__).parents[1] / "runs" / "acceptance"))
PRETRAIN_STEPS = 10_000
EVAL_COUNT = 5000


def data_dir() -> Path:
    path = ROOT / "data"
    if not (path / "09_blob").exists():
        write_dataset(path, per_class=500, res=32, seed=0)
    return path


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out.get(k, {}), v) if isinstance(v, dict) else v
    return out


def run(stage: str, tag: str, seed: int, over: dict | None = None, init: Path | None = None) -> tuple[int, Path]:
    """Run (or resume, or reuse) one desk-scale stage; returns the exit code and output dir."""
    out = ROOT / tag / f"seed{seed}"
    raw = yaml.safe_load((CONFIGS / f"desk_{stage.replace('-', '_')}.yaml").read_text())
    raw = _merge(raw, {"seed": seed, "out_dir": str(out), "data": {"path": str(data_dir())},
                       "init_checkpoint": str(init) if init else None, "eval": {"every": 0, "diag_every": 0}})
    raw = _merge(raw, over or {})
    if raw["eval"].get("feature_checkpoint") and not Path(raw["eval"]["feature_checkpoint"]).exists():
        raw["eval"]["feature_checkpoint"] = None
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "desk.yaml"
    cfg_path.write_text(yaml.safe_dump(raw))
    config = RunConfig.from_dict(raw)
    ckpt = out / "checkpoint.safetensors"
    failed = list(out.glob("nan_dump_step*.json"))
    if failed:
        return 3, out
    args = [stage, "--config", str(cfg_path)]
    if ckpt.exists():
        step = read_checkpoint(ckpt)[1]["step"]
        if step >= config.train.total_steps:
            return 0, out
        args += ["--resume", str(ckpt)]
    return main(args), out


def losses_finite(out: Path) -> bool:
    lines = [json.loads(s) for s in (out / "log.jsonl").read_text().splitlines() if s.strip()]
    return bool(lines) and all("error" not in r and math.isfinite(r["total"]) for r in lines)


def collapse_ratios(ckpt: Path) -> list[float]:
    """Channel-mean std times sqrt(d) of the online encoder at the 8 probe times."""
    tensors, manifest = read_checkpoint(ckpt)
    config = RunConfig.from_dict(manifest["config"])
    enc = Encoder(config.network, config.diffusion)
    enc.load_state_dict({k[len("online.encoder."):]: v for k, v in tensors.items()
                         if k.startswith("online.encoder.")})
    images = reference_images(load_dataset(config.data.path, config.data.resolution), 1000)
    times = probe_times(config.diffusion, config.data.resolution, 8)
    return per_channel_std(enc, images, times, seed=config.seed).ratios()


class FidProxy:
    """FID-proxy against fixed reference features from one designated feature encoder."""

    def __init__(self, feature_ckpt: Path, count: int = EVAL_COUNT):
        self.enc = load_feature_encoder(feature_ckpt)
        config = RunConfig.from_dict(read_checkpoint(feature_ckpt)[1]["config"])
        data = load_dataset(config.data.path, config.data.resolution)
        self.ref = feature_stats(self.enc, reference_images(data, count))
        self.count = count

    def of_checkpoint(self, ckpt: Path, method: str | None = None) -> float:
        state = load_checkpoint(ckpt)
        return sample_fid(state.bundle.ema, state.config, self.enc, self.ref, self.count, seed=1234, method=method)

    def of_init(self, config: RunConfig, init: Path, method: str | None = None) -> float:
        state = init_from_pretrain(build_state(config), init)
        return sample_fid(state.bundle.ema, config, self.enc, self.ref, self.count, seed=1234, method=method)


def config_of(out: Path) -> RunConfig:
    return RunConfig.load(out / "desk.yaml")


def mean(xs) -> float:
    return float(torch.tensor(xs, dtype=torch.float64).mean())
