"""Deterministic samplers: Heun/Euler on the probability-flow ODE, consistency sampling, interval CFG.

All integrators use the denoiser form of the drift, ``dx/dt = (x - D(x, t)) / t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch

from .nnet import EPGNet
from .schedules import DiffusionConfig, karras_grid, shift_factor
from .trajectory import NULL_LABEL


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    steps: int = 32
    method: str = "heun"  # heun | euler | cm_onestep
    cfg_scale: float = 1.0
    cfg_interval: tuple[float, float] = (0.19, 1.61)
    resolution: int = 64
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.method not in ("heun", "euler", "cm_onestep"):
            raise ValueError(f"unknown sampler {self.method!r}")
        if self.cfg_scale < 1:
            raise ValueError("cfg_scale must be >= 1")
        lo, hi = self.cfg_interval
        if lo > hi:
            raise ValueError("cfg_interval must satisfy t_lo <= t_hi")

    @property
    def scale(self) -> float:
        return shift_factor(self.resolution, self.diffusion)

    @property
    def t_max(self) -> float:
        return self.diffusion.T * self.scale

    def times(self) -> torch.Tensor:
        """Descending integration times, shifted, ending at 0 (length ``steps + 1``)."""
        if self.steps == 1:
            top = torch.tensor([self.t_max], dtype=torch.float64)
        else:
            top = karras_grid(self.steps, self.diffusion).as_tensor().flip(0) * self.scale
        return torch.cat([top, top.new_zeros(1)])


class ScoreField:
    """Callable view ``(x, t, labels) -> D(x, t)`` that counts its invocations."""

    def __init__(self, fn: Callable, provenance: str):
        self.fn = fn
        self.provenance = provenance
        self.nfe = 0

    def __call__(self, x: torch.Tensor, t, labels=None) -> torch.Tensor:
        self.nfe += 1
        return self.fn(x, t, labels)


def analytic_gaussian_denoiser(mu, sigma0: float) -> ScoreField:
    """Posterior mean for data ``N(mu, sigma0^2 I)`` under ``x_t = x0 + t eps``."""
    if sigma0 <= 0:
        raise ValueError("sigma0 must be positive")
    s2 = sigma0 * sigma0

    def fn(x, t, labels=None):
        t = torch.as_tensor(t, dtype=x.dtype)
        t2 = t.reshape(-1, *([1] * (x.ndim - 1))) ** 2 if t.ndim else t**2
        return (s2 * x + t2 * mu) / (s2 + t2)

    return ScoreField(fn, "analytic-oracle")


def cfg_blend(cond: torch.Tensor, uncond: torch.Tensor, w: float, t: float, interval) -> torch.Tensor:
    """Interval guidance on x-predictions; outside ``(t_lo, t_hi]`` the conditional prediction is returned."""
    if w < 1:
        raise ValueError("guidance scale must be >= 1")
    lo, hi = interval
    if w == 1 or not (lo < t <= hi):
        return cond
    return uncond + w * (cond - uncond)


def model_field(net: EPGNet, cfg_scale: float = 1.0, cfg_interval=(0.19, 1.61)) -> ScoreField:
    """Denoiser view of a network, with interval guidance when ``cfg_scale > 1``.

    A guided call evaluates the network twice but counts as one evaluation of
    the field; the manifest reports ``nfe`` in field calls.
    """

    @torch.no_grad()
    def fn(x, t, labels=None):
        t_val = float(t)
        if labels is None or cfg_scale == 1 or not (cfg_interval[0] < t_val <= cfg_interval[1]):
            return net.denoise(x, t, labels)
        null = torch.full_like(labels, NULL_LABEL)
        both = net.denoise(torch.cat([x, x]), t, torch.cat([labels, null]))
        cond, uncond = both.chunk(2)
        return cfg_blend(cond, uncond, cfg_scale, t_val, cfg_interval)

    return ScoreField(fn, "model")


def _check(x: torch.Tensor, i: int) -> None:
    if not bool(torch.isfinite(x).all()):
        raise SamplingError(f"non-finite sampler state at step {i}")


def _integrate(field: ScoreField, z: torch.Tensor, cfg: SamplerConfig, labels, second_order: bool):
    ts = cfg.times()
    x = z
    for i in range(len(ts) - 1):
        t, t_next = float(ts[i]), float(ts[i + 1])
        d_x = field(x, t, labels)
        if t_next == 0:
            # exact: x + (0 - t)(x - D)/t = D
            x = d_x
        else:
            d = (x - d_x) / t
            x_e = x + (t_next - t) * d
            if second_order:
                d2 = (x_e - field(x_e, t_next, labels)) / t_next
                x = x + (t_next - t) * 0.5 * (d + d2)
            else:
                x = x_e
        _check(x, i)
    return x


def heun_sample(field: ScoreField, z: torch.Tensor, cfg: SamplerConfig, labels=None) -> torch.Tensor:
    """Second-order PF-ODE integration from ``cfg.t_max`` to 0 (``2 * steps - 1`` field calls)."""
    return _integrate(field, z, cfg, labels, second_order=True)


def euler_sample(field: ScoreField, z: torch.Tensor, cfg: SamplerConfig, labels=None) -> torch.Tensor:
    """First-order PF-ODE integration (``steps`` field calls)."""
    return _integrate(field, z, cfg, labels, second_order=False)


def cm_sample(field: ScoreField, z: torch.Tensor, t_max: float, labels=None, steps: int = 1,
              sigma_min: float = 0.002, generator: torch.Generator | None = None) -> torch.Tensor:
    """One- or two-step consistency sampling.

    The second step re-noises the first output to ``sqrt(sigma_min * t_max)``.
    """
    if steps not in (1, 2):
        raise ValueError("consistency sampling supports 1 or 2 steps")
    x = field(z, t_max, labels)
    _check(x, 0)
    if steps == 2:
        t_mid = math.sqrt(sigma_min * t_max)
        eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        x = field(x + t_mid * eps, t_mid, labels)
        _check(x, 1)
    return x


def initial_noise(shape, t_max: float, seed: int, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=dtype) * t_max


def generate(net: EPGNet, cfg: SamplerConfig, count: int, seed: int, labels=None, batch: int = 64,
             cm_steps: int = 1) -> tuple[torch.Tensor, int]:
    """Sample ``count`` images in batches; returns the images and the per-sample NFE.

    Batch ``b`` draws its noise from seed ``(seed, b)`` so outputs do not
    depend on the batch split of earlier batches.
    """
    net_cfg = net.cfg
    shape = (net_cfg.channels, net_cfg.resolution, net_cfg.resolution)
    was_training = net.training
    net.eval()
    out, nfe = [], 0
    try:
        for b, start in enumerate(range(0, count, batch)):
            n = min(batch, count - start)
            z = initial_noise((n, *shape), cfg.t_max, seed * 100_003 + b)
            lab = None if labels is None else labels[start : start + n]
            field = model_field(net, cfg.cfg_scale, cfg.cfg_interval)
            if cfg.method == "cm_onestep":
                g = torch.Generator().manual_seed(seed * 100_003 + b + 50_021)
                x = cm_sample(field, z, cfg.t_max, lab, cm_steps, cfg.diffusion.sigma_min * cfg.scale, g)
            elif cfg.method == "heun":
                x = heun_sample(field, z, cfg, lab)
            else:
                x = euler_sample(field, z, cfg, lab)
            nfe = field.nfe
            out.append(x)
    finally:
        net.train(was_training)
    return torch.cat(out), nfe
