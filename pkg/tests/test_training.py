import copy
import json

import pytest
import torch
from safetensors.torch import load_file, save_file

from epg.config import RunConfig
from epg.losses import consistency_loss, diffusion_loss
from epg.training import (
    CheckpointError,
    ConfigMismatchError,
    NumericalFailure,
    build_state,
    clip_gradients,
    cm_step,
    dm_step,
    fit,
    init_from_pretrain,
    load_checkpoint,
    lr_at,
    pretrain_step,
    save_checkpoint,
    state_tensors,
    train_step,
)
from epg.trajectory import ImageFolderDataset

from helpers import random_batch, tiny_run


def _fast(stage, **kw):
    return tiny_run(stage, optim={"lr": 1e-3, "lr_base_batch": None, "warmup_frac": 0.0}, **kw)


# --- learning rate and parameter groups --------------------------------------------


def test_cm_step_schedule_values():
    opt = RunConfig.from_dict({"stage": "finetune-cm"}).optim
    K = 600_000
    got = [lr_at(int(f * K), K, opt, 128) for f in (0.3, 0.75, 0.95)]
    assert got == [1e-4, 3e-5, 8e-6]


def test_pretrain_lr_linear_scaling_and_warmup():
    opt = RunConfig.from_dict({"stage": "pretrain"}).optim
    K = 10_000
    assert lr_at(0, K, opt, 1024) == pytest.approx(6e-4 / 200)
    assert lr_at(200, K, opt, 1024) == pytest.approx(6e-4 * 0.5 * (1 + torch.cos(torch.tensor(torch.pi * 0.02)).item()))
    assert lr_at(5000, K, opt, 128) == pytest.approx(6e-4 * 128 / 1024 * 0.5)


def test_weight_decay_census():
    state = build_state(tiny_run("finetune-dm"))
    decay, plain = state.optimizer.param_groups
    assert decay["weight_decay"] == 0.01 and plain["weight_decay"] == 0.0
    names = {id(p): n for n, p in state.online.named_parameters()}
    plain_names = {names[id(p)] for p in plain["params"]}
    decay_names = {names[id(p)] for p in decay["params"]}
    assert "encoder.cls_token" in plain_names
    assert all(n.endswith("bias") or ".norm" in n or "time_embed" in n or "class_embed" in n or "cls_token" in n
               for n in plain_names)
    assert all(n.endswith("weight") for n in decay_names)
    assert not any("time_embed" in n or "class_embed" in n for n in decay_names)
    assert len(plain_names) + len(decay_names) == len(list(state.online.parameters()))


def test_clip_gradients_to_half():
    p = torch.nn.Parameter(torch.zeros(4, 4))
    g = torch.randn(4, 4)
    p.grad = g / g.norm() * 10
    pre = clip_gradients([p], 0.5)
    assert float(pre) == pytest.approx(10.0)
    assert float(p.grad.norm()) == pytest.approx(0.5, abs=1e-6)


# --- pre-training ------------------------------------------------------------------


def test_pretrain_overfits_one_batch():
    state = build_state(_fast("pretrain", train={"total_steps": 200}))
    x, y = random_batch(4)
    losses = [train_step(state, (x, y))[1].total.item() for _ in range(200)]
    assert losses[-1] < losses[0]
    assert state.step == 200


def test_pretrain_momentum_update_is_ema():
    state = build_state(_fast("pretrain"))
    mom_old = copy.deepcopy(state.bundle.momentum.state_dict())
    pretrain_step(state, random_batch(4))
    online = dict(state.online.named_parameters())
    for name, p in state.bundle.momentum.named_parameters():
        torch.testing.assert_close(p, 0.99 * mom_old[name] + 0.01 * online[name], rtol=0, atol=1e-7)


def test_pretrain_requires_two_samples():
    state = build_state(_fast("pretrain"))
    with pytest.raises(ValueError):
        pretrain_step(state, random_batch(1))


def test_no_consistency_ablation_component_is_zero():
    state = build_state(_fast("pretrain", ablation={"no_consistency_term": True}))
    for _ in range(3):
        _, rep = pretrain_step(state, random_batch(4))
        assert rep.components["rep_consistency"] == 0.0


def test_deterministic_loss_streams():
    def run():
        state = build_state(_fast("pretrain", seed=7))
        return [pretrain_step(state, random_batch(4))[1].as_dict() for _ in range(5)]

    assert run() == run()


# --- fine-tuning ------------------------------------------------------------------


def _probe_dm(net, seed=0):
    g = torch.Generator().manual_seed(seed)
    x, y = random_batch(4)
    eps = torch.randn(x.shape, generator=g)
    t = torch.tensor([0.05, 0.3, 1.0, 5.0])
    net.eval()
    with torch.no_grad():
        return diffusion_loss(net, x, t, t * 0.95, eps, y).total.item()


def test_dm_overfits_one_batch():
    state = build_state(_fast("finetune-dm", train={"total_steps": 500}))
    x, y = random_batch(4)
    before = _probe_dm(copy.deepcopy(state.online))
    for _ in range(500):
        dm_step(state, (x, y))
    assert _probe_dm(copy.deepcopy(state.online)) < before


def test_dm_ema_moves_but_differs():
    state = build_state(tiny_run("finetune-dm"))
    ema0 = copy.deepcopy(state.bundle.ema.state_dict())
    dm_step(state, random_batch(4))
    ema, online = state.bundle.ema.state_dict(), state.online.state_dict()
    assert any(not torch.equal(ema[k], online[k]) for k in ema)
    assert any(not torch.equal(ema[k], ema0[k]) for k in ema)


def _probe_cm(net):
    g = torch.Generator().manual_seed(1)
    x, y = random_batch(4)
    eps = torch.randn(x.shape, generator=g)
    t = torch.tensor([0.05, 0.3, 1.0, 5.0])
    net.eval()
    with torch.no_grad():
        return consistency_loss(net, x, t, t * 0.5, eps, y).total.item()


def test_cm_overfits_one_batch():
    state = build_state(_fast("finetune-cm", train={"total_steps": 500}, network={"dec_dropout": 0.0}))
    x, y = random_batch(4)
    before = _probe_cm(copy.deepcopy(state.online))
    for _ in range(500):
        cm_step(state, (x, y))
    assert _probe_cm(copy.deepcopy(state.online)) < before


def test_cm_stage_settings_and_frozen_untouched():
    state = build_state(tiny_run("finetune-cm"))
    assert state.optimizer.param_groups[0]["betas"] == (0.9, 0.99)
    assert state.config.optim.grad_clip is None and state.config.network.dec_dropout == 0.5
    frozen0 = copy.deepcopy(state.bundle.frozen.state_dict())
    for _ in range(3):
        cm_step(state, random_batch(4))
    assert all(torch.equal(v, frozen0[k]) for k, v in state.bundle.frozen.state_dict().items())
    opt_ids = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
    for name in ("frozen", "ema"):
        assert not opt_ids & {id(p) for p in getattr(state.bundle, name).parameters()}


def test_parameter_sets_disjoint_from_optimizer():
    state = build_state(tiny_run("pretrain"))
    opt_ids = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
    assert not opt_ids & {id(p) for p in state.bundle.momentum.parameters()}


def test_init_from_pretrain(tmp_path):
    pre = build_state(_fast("pretrain"))
    pretrain_step(pre, random_batch(4))
    path = save_checkpoint(pre, tmp_path / "pre.safetensors")
    ft = build_state(tiny_run("finetune-cm"))
    dec0 = copy.deepcopy(ft.online.decoder.state_dict())
    init_from_pretrain(ft, path)
    for k, v in pre.online.encoder.state_dict().items():
        assert torch.equal(ft.online.encoder.state_dict()[k], v)
        assert torch.equal(ft.bundle.frozen.state_dict()[k], v)
    assert all(torch.equal(v, dec0[k]) for k, v in ft.online.decoder.state_dict().items())
    assert ft.online.projector is None and ft.step == 0
    # a fine-tuning checkpoint cannot serve as pre-training init
    with pytest.raises(CheckpointError):
        init_from_pretrain(build_state(tiny_run("finetune-dm")), save_checkpoint(ft, tmp_path / "ft.safetensors"))


def test_nan_aborts_with_dump(tmp_path):
    state = build_state(tiny_run("finetune-dm"), out_dir=tmp_path)
    with torch.no_grad():
        next(state.online.parameters()).fill_(float("nan"))
    with pytest.raises(NumericalFailure) as info:
        dm_step(state, random_batch(4))
    dump = json.loads(open(info.value.dump_path).read())
    assert dump["step"] == 0 and dump["stage"] == "finetune-dm"
    assert state.step == 0


# --- checkpoints -------------------------------------------------------------------


@pytest.mark.parametrize("stage", ["pretrain", "finetune-dm", "finetune-cm"])
def test_checkpoint_roundtrip(tmp_path, stage):
    state = build_state(_fast(stage))
    for _ in range(2):
        train_step(state, random_batch(4))
    before = state_tensors(state)
    path = save_checkpoint(state, tmp_path / "c.safetensors")
    loaded = load_checkpoint(path, expected=state.config)
    after = state_tensors(loaded)
    assert before.keys() == after.keys()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert loaded.step == state.step and loaded.config == state.config


def test_resume_equivalence(tmp_path):
    cfg = _fast("finetune-cm", seed=3)
    batch = random_batch(4)
    full = build_state(cfg)
    stream = [train_step(full, batch)[1].as_dict() for _ in range(15)]
    part = build_state(cfg)
    for _ in range(5):
        train_step(part, batch)
    resumed = load_checkpoint(save_checkpoint(part, tmp_path / "c.safetensors"), expected=cfg)
    assert [train_step(resumed, batch)[1].as_dict() for _ in range(10)] == stream[5:]


def test_checkpoint_rejects_other_config(tmp_path):
    state = build_state(tiny_run("finetune-dm"))
    path = save_checkpoint(state, tmp_path / "c.safetensors")
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expected=tiny_run("finetune-dm", seed=99))
    # tampering with the stored hash is detected as well
    tensors = load_file(str(path))
    from safetensors import safe_open

    with safe_open(str(path), "pt") as fh:
        manifest = json.loads(fh.metadata()["manifest"])
    manifest["config_hash"] = "0" * 16
    save_file(tensors, str(tmp_path / "d.safetensors"), metadata={"manifest": json.dumps(manifest)})
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(tmp_path / "d.safetensors")


def test_checkpoint_corruption_detected(tmp_path):
    state = build_state(tiny_run("finetune-dm"))
    path = save_checkpoint(state, tmp_path / "c.safetensors")
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    (tmp_path / "bad.safetensors").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(tmp_path / "bad.safetensors")
    (tmp_path / "trunc.safetensors").write_bytes(bytes(raw[:100]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.safetensors")


def test_fit_writes_log_and_checkpoint(tmp_path):
    cfg = _fast("finetune-dm", ckpt_every=3, train={"total_steps": 5})
    x, y = random_batch(12)
    pixels = ((x.permute(0, 2, 3, 1) + 1) * 127.5).round().to(torch.uint8).numpy()
    ds = ImageFolderDataset.from_arrays(pixels, y.numpy())
    seen = []
    state = fit(build_state(cfg, tmp_path), ds, callbacks=[lambda s, r: seen.append(s.step)])
    lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [l["step"] for l in lines] == [0, 1, 2, 3, 4] and seen == [1, 2, 3, 4, 5]
    assert {"lr", "grad_norm", "wall", "denoise", "total"} <= lines[0].keys()
    assert load_checkpoint(tmp_path / "checkpoint.safetensors").step == 5 == state.step
