"""Training state, the three step functions and checkpoint I/O.

Every random draw of step ``k`` comes from generators seeded by
``(seed, stage, k)``, and the batch of step ``k`` is a pure function of
``(seed, k)``. Restoring parameters and optimizer moments is therefore enough
to resume bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from .config import ConfigError, RunConfig, config_hash
from .losses import LossReport, auxiliary_loss, consistency_loss, diffusion_loss, pretrain_loss
from .nnet import EPGNet, ModelBundle, ema_update, freeze_copy, momentum_copy
from .schedules import (
    DiscretizationSchedule,
    RatioSchedule,
    TemperatureSchedule,
    ect_pair_times,
    icm_steps,
    karras_grid,
    sample_sigma_discrete,
    shift_factor,
    temperature_at,
)
from .trajectory import CleanSample, NULL_LABEL, augment_views, label_dropout, random_hflip, temporal_pair

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "epg-checkpoint/1"
NO_DECAY_KEYS = ("cls_token", "time_embed", "class_embed")


class NumericalFailure(RuntimeError):
    """Raised when a step produces a non-finite loss or gradient."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class CheckpointError(RuntimeError):
    """Unreadable or corrupt checkpoint archive."""


class ConfigMismatchError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# optimizer


def lr_at(step: int, total: int, cfg, batch_size: int) -> float:
    base = cfg.lr * batch_size / cfg.lr_base_batch if cfg.lr_base_batch else cfg.lr
    warmup = int(cfg.warmup_frac * total)
    frac = step / total
    if cfg.schedule == "cosine":
        lr = base * 0.5 * (1 + math.cos(math.pi * frac))
    elif cfg.schedule == "step":
        lr = cfg.step_values[sum(frac >= f for f in cfg.step_fracs)]
        lr *= base / cfg.lr
    else:
        lr = base
    if warmup and step < warmup:
        lr *= (step + 1) / warmup
    return lr


def no_decay(name: str, p: nn.Parameter) -> bool:
    return p.ndim < 2 or any(k in name for k in NO_DECAY_KEYS)


def param_groups(module: nn.Module, weight_decay: float) -> list[dict]:
    decay, plain = [], []
    for name, p in module.named_parameters():
        if p.requires_grad:
            (plain if no_decay(name, p) else decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": plain, "weight_decay": 0.0}]


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    config: RunConfig
    bundle: ModelBundle
    optimizer: torch.optim.Optimizer
    step: int = 0
    out_dir: Path | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def stage(self) -> str:
        return self.config.stage

    @property
    def online(self) -> EPGNet:
        return self.bundle.online

    def generator(self, stream: int = 0) -> torch.Generator:
        stage = ("pretrain", "finetune-dm", "finetune-cm").index(self.stage)
        seed = ((self.config.seed * 7919 + stage) * 1_000_003 + self.step) * 4 + stream
        return torch.Generator().manual_seed(seed % (2**63))

    def trainable(self) -> list[nn.Parameter]:
        return [p for p in self.online.parameters() if p.requires_grad]


def build_state(config: RunConfig, out_dir=None) -> TrainState:
    """Fresh state for ``config.stage`` with randomly initialized parameters."""
    torch.manual_seed(config.seed)
    if config.stage == "pretrain":
        online = EPGNet(config.network, config.diffusion, decoder=False, projector=True)
        bundle = ModelBundle(online, momentum=momentum_copy(online))
    else:
        online = EPGNet(config.network, config.diffusion, decoder=True, projector=False)
        bundle = ModelBundle(online)
        bundle.ema = freeze_copy(online)
        if config.stage == "finetune-cm":
            bundle.frozen = freeze_copy(online.encoder)
    opt = config.optim
    optimizer = torch.optim.AdamW(param_groups(online, opt.weight_decay), lr=opt.lr, betas=tuple(opt.betas))
    return TrainState(config, bundle, optimizer, out_dir=Path(out_dir) if out_dir else None)


def init_from_pretrain(state: TrainState, pretrain_path) -> TrainState:
    """Copy pre-trained encoder weights into a fine-tuning state.

    The decoder keeps its fresh initialization and the projector is dropped.
    EMA and the frozen copy are re-synchronized to the loaded encoder.
    """
    if state.stage == "pretrain":
        raise CheckpointError("cannot initialize a pre-training run from a checkpoint")
    tensors, manifest = read_checkpoint(pretrain_path)
    if manifest["stage"] != "pretrain":
        raise CheckpointError(f"expected a pretrain checkpoint, got stage {manifest['stage']!r}")
    enc = {k[len("online.encoder."):]: v for k, v in tensors.items() if k.startswith("online.encoder.")}
    try:
        state.online.encoder.load_state_dict(enc, strict=True)
    except RuntimeError as exc:
        raise ConfigMismatchError(f"pretrained encoder does not match the network config: {exc}") from exc
    state.bundle.ema = freeze_copy(state.online)
    if state.stage == "finetune-cm":
        state.bundle.frozen = freeze_copy(state.online.encoder)
    return state


# ---------------------------------------------------------------------------
# steps


def clip_gradients(params, max_norm: float | None) -> torch.Tensor:
    """Scale gradients to global norm ``max_norm`` (no-op when None or 0); returns the pre-clip norm."""
    return torch.nn.utils.clip_grad_norm_(list(params), max_norm if max_norm else float("inf"))


def _finish(state: TrainState, report: LossReport, lr: float, clip: float | None, t_start: float) -> dict:
    norm = clip_gradients(state.trainable(), clip)
    if not torch.isfinite(norm):
        raise NumericalFailure(f"non-finite gradient norm at step {state.step}",
                               _dump(state, report.as_dict(), "grad"))
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    record = {"step": state.step, "lr": lr, "grad_norm": float(norm), **report.as_dict(),
              "wall": time.perf_counter() - t_start}
    state.step += 1
    return record


def _compute(state: TrainState, fn):
    try:
        return fn()
    except FloatingPointError as exc:
        raise NumericalFailure(f"{exc} at step {state.step}", _dump(state, {}, "loss")) from exc


def _dump(state: TrainState, info: dict, kind: str) -> str | None:
    if state.out_dir is None:
        return None
    state.out_dir.mkdir(parents=True, exist_ok=True)
    path = state.out_dir / f"nan_dump_step{state.step}.json"
    stats = {}
    for name, p in state.online.named_parameters():
        stats[name] = {"finite": bool(torch.isfinite(p).all()), "absmax": float(p.detach().abs().max())}
    path.write_text(json.dumps({"kind": kind, "step": state.step, "stage": state.stage, "loss": info,
                                "params": stats}, indent=1, default=str))
    return str(path)


def _batch_tensors(batch) -> tuple[torch.Tensor, torch.Tensor | None]:
    if isinstance(batch, CleanSample):
        return batch.x0, batch.label
    if isinstance(batch, (tuple, list)):
        return batch[0], batch[1] if len(batch) > 1 else None
    return batch, None


def temperature_schedule(cfg: RunConfig) -> TemperatureSchedule:
    """Annealed schedule, or the constant ``tau1`` under the ``fixed_tau`` ablation."""
    tc = cfg.train
    tau2 = tc.tau1 if cfg.ablation.fixed_tau else tc.tau2
    return TemperatureSchedule(tc.tau1, tau2, tc.total_steps)


def pretrain_step(state: TrainState, batch) -> tuple[TrainState, LossReport]:
    """One representation-consistency pre-training step."""
    t_start = time.perf_counter()
    cfg, tc = state.config, state.config.train
    x0, _ = _batch_tensors(batch)
    B = x0.shape[0]
    if B < 2:
        raise ValueError("pre-training needs a batch of at least two samples")
    k, K = state.step, tc.total_steps
    g = state.generator()
    torch.manual_seed(int(torch.randint(2**62, (1,), generator=state.generator(1))))

    N = icm_steps(min(k, K - 1), DiscretizationSchedule(tc.n0, tc.n1, K))
    grid = karras_grid(N, cfg.diffusion)
    scale = shift_factor(cfg.data.resolution, cfg.diffusion)
    n = torch.randint(1, N, (B,), generator=g)
    pair = temporal_pair(x0, grid, n, g, scale=scale)
    views = augment_views(x0, g, cfg.augment)
    t0 = grid[0] * scale

    tau = temperature_at(n.to(x0.dtype) / (N - 1), min(k / max(K - 1, 1), 1.0), temperature_schedule(cfg))

    online, momentum = state.online, state.bundle.momentum
    online.train()
    report = _compute(state, lambda: pretrain_loss(online, momentum, views, pair, t0, tc.tau_contrastive, tau,
                                                   use_consistency=not cfg.ablation.no_consistency_term))
    report.total.backward()
    lr = lr_at(k, K, cfg.optim, B)
    record = _finish(state, report, lr, cfg.optim.grad_clip, t_start)
    ema_update(momentum, online, tc.momentum_ema)
    record.update(N=N)
    state.history.append(record)
    return state, report


def _finetune_inputs(state: TrainState, batch, g):
    cfg = state.config
    x0, labels = _batch_tensors(batch)
    x0 = random_hflip(x0, g, cfg.train.hflip)
    if cfg.network.conditional and labels is not None:
        labels = label_dropout(labels, cfg.train.label_dropout, g)
    elif cfg.network.conditional:
        labels = torch.full((x0.shape[0],), NULL_LABEL, dtype=torch.long)
    else:
        labels = None
    return x0, labels


def dm_step(state: TrainState, batch) -> tuple[TrainState, LossReport]:
    """One diffusion fine-tuning step (x-prediction on a fixed discrete grid)."""
    t_start = time.perf_counter()
    cfg, tc = state.config, state.config.train
    g = state.generator()
    torch.manual_seed(int(torch.randint(2**62, (1,), generator=state.generator(1))))
    x0, labels = _finetune_inputs(state, batch, g)
    B = x0.shape[0]
    grid = karras_grid(tc.dm_grid, cfg.diffusion)
    n, t_n = sample_sigma_discrete(grid, g, B, *tc.dm_lognormal)
    scale = shift_factor(cfg.data.resolution, cfg.diffusion)
    t_hi = (t_n * scale).to(x0.dtype)
    t_lo = (grid.as_tensor()[n - 1] * scale).to(x0.dtype)
    eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)

    state.online.train()
    report = _compute(state, lambda: diffusion_loss(state.online, x0, t_hi, t_lo, eps, labels))
    report.total.backward()
    lr = lr_at(state.step, tc.total_steps, cfg.optim, B)
    record = _finish(state, report, lr, cfg.optim.grad_clip, t_start)
    ema_update(state.bundle.ema, state.online, tc.online_ema)
    state.history.append(record)
    return state, report


def cm_step(state: TrainState, batch) -> tuple[TrainState, LossReport]:
    """One consistency fine-tuning step with the auxiliary contrastive loss."""
    t_start = time.perf_counter()
    cfg, tc = state.config, state.config.train
    g = state.generator()
    torch.manual_seed(int(torch.randint(2**62, (1,), generator=state.generator(1))))
    x0, labels = _finetune_inputs(state, batch, g)
    B = x0.shape[0]
    k, K = state.step, tc.total_steps
    t, r = ect_pair_times(min(k, K - 1), RatioSchedule(tc.ratio_stages, K), cfg.diffusion, g, B, *tc.cm_lognormal)
    scale = shift_factor(cfg.data.resolution, cfg.diffusion)
    t, r = (t * scale).to(x0.dtype), (r * scale).to(x0.dtype)
    eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
    # t clamped at sigma_min gives r == t: no consistency signal, drop those samples
    live = t > r
    if not bool(live.all()):
        x0, t, r, eps = x0[live], t[live], r[live], eps[live]
        labels = labels[live] if labels is not None else None
        B = x0.shape[0]
        if B < 2:
            raise ValueError(f"step {k}: fewer than two non-degenerate (t, r) pairs")
    t0 = cfg.diffusion.sigma_min * scale

    online = state.online
    online.train()

    def losses():
        cons, pred = consistency_loss(online, x0, t, r, eps, labels, return_prediction=True)
        if cfg.ablation.no_aux_loss:
            return cons
        aux = auxiliary_loss(state.bundle.frozen, pred, x0, t, t0, tc.tau_aux)
        total = cons.total + tc.w_aux * aux.total
        return LossReport(total, {**cons.components, **aux.components}, B)

    report = _compute(state, losses)
    report.total.backward()
    lr = lr_at(k, K, cfg.optim, B)
    record = _finish(state, report, lr, cfg.optim.grad_clip, t_start)
    ema_update(state.bundle.ema, online, tc.online_ema)
    record.update(ratio=float((r / t).max()))
    state.history.append(record)
    return state, report


STEP_FNS = {"pretrain": pretrain_step, "finetune-dm": dm_step, "finetune-cm": cm_step}


def train_step(state: TrainState, batch):
    return STEP_FNS[state.stage](state, batch)


# ---------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is a single safetensors file (little-endian, named tensors).
# Its metadata holds one JSON manifest:
#   format, stage, step, config, config_hash, rng, param_groups, digest
# ``digest`` is a SHA-256 over all tensor names and raw bytes in sorted order.


def _digest(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.reshape(-1).view(torch.uint8).numpy().tobytes())
    return h.hexdigest()


def state_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = {}
    for set_name, module in state.bundle.parameter_sets().items():
        for k, v in module.state_dict().items():
            tensors[f"{set_name}.{k}"] = v.detach().clone().contiguous()
    opt = state.optimizer.state_dict()
    for idx, entry in opt["state"].items():
        for key, v in entry.items():
            tensors[f"optim.{idx}.{key}"] = torch.as_tensor(v).clone().contiguous()
    tensors["rng.torch"] = torch.get_rng_state()
    return tensors


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = state_tensors(state)
    opt = state.optimizer.state_dict()
    groups = [{k: v for k, v in g.items() if k != "params"} | {"params": g["params"]} for g in opt["param_groups"]]
    cfg = state.config.to_dict()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "stage": state.stage,
        "step": state.step,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "rng": {"seed": state.config.seed, "step": state.step},
        "param_groups": groups,
        "sets": sorted(state.bundle.parameter_sets()),
        "digest": _digest(tensors),
    }
    tmp = path.with_name(path.name + ".tmp")
    save_file(tensors, str(tmp), metadata={"manifest": json.dumps(manifest, default=_jsonable)})
    os.replace(tmp, path)
    return path


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"cannot serialize {type(v)}")


def read_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Tensors and manifest, after integrity and config-hash checks."""
    path = Path(path)
    try:
        tensors = load_file(str(path))
        from safetensors import safe_open

        with safe_open(str(path), "pt") as fh:
            meta = fh.metadata() or {}
        manifest = json.loads(meta["manifest"])
    except (SafetensorError, OSError, KeyError, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    if _digest(tensors) != manifest.get("digest"):
        raise CheckpointError(f"{path}: tensor digest mismatch (corrupt archive)")
    if config_hash(manifest["config"]) != manifest.get("config_hash"):
        raise ConfigMismatchError(f"{path}: manifest config does not match its recorded hash")
    return tensors, manifest


def load_checkpoint(path, expected: RunConfig | None = None, out_dir=None) -> TrainState:
    """Rebuild the full training state stored at ``path``.

    With ``expected`` the stored config hash must equal ``expected``'s.
    """
    tensors, manifest = read_checkpoint(path)
    if expected is not None and expected.config_hash() != manifest["config_hash"]:
        raise ConfigMismatchError(
            f"checkpoint config hash {manifest['config_hash']} differs from run config {expected.config_hash()}"
        )
    try:
        config = RunConfig.from_dict(manifest["config"])
    except ConfigError as exc:
        raise CheckpointError(f"{path}: invalid stored config: {exc}") from exc
    state = build_state(config, out_dir)
    for set_name in manifest["sets"]:
        if set_name not in ("online", "momentum", "frozen", "ema"):
            raise CheckpointError(f"unknown parameter set {set_name!r}")
        if getattr(state.bundle, set_name) is None:
            # a frozen or ema copy that build_state did not create; clone its structure
            src = state.online.encoder if set_name == "frozen" else state.online
            setattr(state.bundle, set_name, freeze_copy(src))
        module = getattr(state.bundle, set_name)
        prefix = set_name + "."
        sd = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        module.load_state_dict(sd, strict=True)

    opt_sd = state.optimizer.state_dict()
    opt_state = {}
    for k, v in tensors.items():
        if k.startswith("optim."):
            _, idx, key = k.split(".", 2)
            opt_state.setdefault(int(idx), {})[key] = v
    groups = manifest["param_groups"]
    for g, stored in zip(opt_sd["param_groups"], groups):
        g.update({k: (tuple(v) if isinstance(v, list) and k != "params" else v) for k, v in stored.items()})
    opt_sd["state"] = opt_state
    state.optimizer.load_state_dict(opt_sd)
    torch.set_rng_state(tensors["rng.torch"])
    state.step = manifest["step"]
    return state


# ---------------------------------------------------------------------------
# loop


def fit(state: TrainState, dataset, steps: int | None = None, callbacks=(), log_path=None) -> TrainState:
    """Run the stage loop until ``total_steps`` (or ``steps`` more steps).

    Writes one JSON record per step to ``log_path``, checkpoints every
    ``ckpt_every`` steps and calls each callback as ``cb(state, record)``
    after every step. A :class:`NumericalFailure` propagates after the log
    line describing it has been flushed; earlier checkpoints stay intact.
    """
    cfg = state.config
    end = cfg.train.total_steps if steps is None else min(cfg.train.total_steps, state.step + steps)
    out = state.out_dir
    log_path = Path(log_path) if log_path else (out / "log.jsonl" if out else None)
    fh = open(log_path, "a") if log_path else None
    try:
        while state.step < end:
            batch = dataset.batch_at(state.step, cfg.train.batch_size, cfg.seed)
            try:
                _, report = train_step(state, batch)
            except NumericalFailure as exc:
                if fh:
                    fh.write(json.dumps({"step": state.step, "error": str(exc), "dump": exc.dump_path}) + "\n")
                raise
            record = state.history[-1]
            if fh:
                fh.write(json.dumps(record) + "\n")
                fh.flush()
            if cfg.log_every and state.step % cfg.log_every == 0:
                log.info("step %d %s", state.step, " ".join(f"{k}={v:.4g}" for k, v in report.as_dict().items()))
            for cb in callbacks:
                cb(state, record)
            if out and cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
                save_checkpoint(state, out / "checkpoint.safetensors")
    finally:
        if fh:
            fh.close()
    if out:
        save_checkpoint(state, out / "checkpoint.safetensors")
    return state
