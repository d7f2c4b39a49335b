"""Shared builders for tests."""

import torch
import torch.nn as nn

from epg.config import RunConfig

TINY_NET = {"enc_blocks": 2, "dec_blocks": 2, "dim_enc": 32, "dim_dec": 32, "heads_enc": 2, "heads_dec": 2,
            "patch": 4, "resolution": 8, "num_classes": 3, "time_freqs": 16}


def tiny_run(stage: str, **over) -> RunConfig:
    raw = {"stage": stage, "network": dict(TINY_NET), "data": {"resolution": 8},
           "train": {"batch_size": 4, "total_steps": 100}}
    for k, v in over.items():
        if isinstance(v, dict):
            raw.setdefault(k, {}).update(v)
        else:
            raw[k] = v
    return RunConfig.from_dict(raw)


def random_batch(n=4, res=8, seed=0, classes=3):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 3, res, res, generator=g) * 2 - 1
    y = torch.randint(0, classes, (n,), generator=g)
    return x, y


def randomize_(module: nn.Module, std: float = 0.2, seed: int = 0) -> nn.Module:
    """Overwrite every parameter (including zero-initialized ones) with Gaussian noise."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return module
