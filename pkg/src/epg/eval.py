"""Feature statistics, Fréchet distance and the per-channel-std collapse diagnostic."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .nnet import Encoder
from .schedules import DiffusionConfig, shift_factor
from .trajectory import perturb

log = logging.getLogger(__name__)

EIG_CLIP = 1e-10


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean dimension {d}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise ValueError("covariance is not symmetric")
        if self.count < d:
            warnings.warn(f"{self.count} samples for {d} feature dims: covariance is rank deficient",
                          stacklevel=2)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def merge(self, other: "FeatureStats") -> "FeatureStats":
        """Statistics of the union of both sample sets (exact pooled update)."""
        if other.dim != self.dim:
            raise ValueError("cannot merge statistics of different dimension")
        n1, n2 = self.count, other.count
        n = n1 + n2
        delta = other.mean - self.mean
        mean = self.mean + delta * n2 / n
        m2 = self.cov * (n1 - 1) + other.cov * (n2 - 1) + np.outer(delta, delta) * n1 * n2 / n
        return FeatureStats(mean, m2 / (n - 1), n)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist(), "count": self.count}


def gaussian_stats(features) -> FeatureStats:
    """Sample mean and unbiased covariance of an ``(n, d)`` array."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] < 2:
        raise ValueError("need at least two samples for a covariance")
    mean = f.mean(0)
    mean = mean + (f - mean).mean(0)  # second pass removes the rounding residue of the first
    c = f - mean
    cov = c.T @ c / (f.shape[0] - 1)
    return FeatureStats(mean, (cov + cov.T) / 2, f.shape[0])


def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.where(w < EIG_CLIP, 0.0, w))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))``.

    The trace of the product root is computed as the trace of
    ``(S1^(1/2) S2 S1^(1/2))^(1/2)``, which is symmetric and has the same
    eigenvalues as ``S1 S2``.
    """
    if a.dim != b.dim:
        raise ValueError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    r1 = _sqrt_psd(a.cov)
    m = r1 @ b.cov @ r1
    w = np.linalg.eigvalsh((m + m.T) / 2)
    tr_root = np.sqrt(np.where(w < EIG_CLIP, 0.0, w)).sum()
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_root)
    return max(d, 0.0)


# ---------------------------------------------------------------------------
# features


@torch.no_grad()
def extract_features(encoder: Encoder, images: torch.Tensor, t: float | None = None, batch: int = 256,
                     diffusion: DiffusionConfig | None = None) -> torch.Tensor:
    """Unit-norm cls features of clean images at ``t`` (default: the shifted ``sigma_min``)."""
    cfg = encoder.cfg
    if images.shape[1:] != (cfg.channels, cfg.resolution, cfg.resolution):
        raise ValueError(f"images of shape {tuple(images.shape[1:])} do not match the encoder "
                         f"({cfg.channels}, {cfg.resolution}, {cfg.resolution})")
    diffusion = diffusion or encoder.diffusion
    if t is None:
        t = diffusion.sigma_min * shift_factor(cfg.resolution, diffusion)
    was_training = encoder.training
    encoder.eval()
    try:
        out = [F.normalize(encoder(images[i : i + batch], t).cls_feature, dim=-1)
               for i in range(0, images.shape[0], batch)]
    finally:
        encoder.train(was_training)
    return torch.cat(out)


def feature_stats(encoder: Encoder, images: torch.Tensor, batch: int = 256) -> FeatureStats:
    feats = extract_features(encoder, images, batch=batch)
    return gaussian_stats(feats.double().numpy())


def fid_proxy(encoder: Encoder, generated: torch.Tensor, reference: FeatureStats | torch.Tensor) -> float:
    if isinstance(reference, torch.Tensor):
        reference = feature_stats(encoder, reference)
    return frechet_distance(feature_stats(encoder, generated), reference)


# ---------------------------------------------------------------------------
# collapse diagnostic


def channel_std(features: torch.Tensor) -> torch.Tensor:
    """Per-channel std (population) of l2-normalized features."""
    f = F.normalize(torch.as_tensor(features, dtype=torch.float64), dim=-1)
    return f.std(0, unbiased=False)


def probe_times(cfg: DiffusionConfig, resolution: int, count: int = 8) -> list[float]:
    """``count`` log-spaced points in ``[sigma_min, T * res / 64]``."""
    hi = cfg.T * shift_factor(resolution, cfg)
    return np.geomspace(cfg.sigma_min, hi, count).tolist()


@dataclass
class DiagnosticReport:
    times: list[float]
    channel_mean_std: list[float]
    reference: float
    count: int

    def ratios(self) -> list[float]:
        return [s / self.reference for s in self.channel_mean_std]

    def to_dict(self) -> dict:
        return {"times": self.times, "channel_mean_std": self.channel_mean_std,
                "ratio_to_inv_sqrt_d": self.ratios(), "inv_sqrt_d": self.reference, "count": self.count}


@torch.no_grad()
def per_channel_std(encoder: Encoder, images: torch.Tensor, times, seed: int = 0, batch: int = 256
                    ) -> DiagnosticReport:
    """Channel-mean std of normalized cls features of images perturbed to each probe time."""
    if images.shape[0] < 100:
        raise ValueError("the collapse diagnostic needs at least 100 samples per probe time")
    g = torch.Generator().manual_seed(seed)
    stds = []
    was_training = encoder.training
    encoder.eval()
    try:
        for t in times:
            feats = []
            for i in range(0, images.shape[0], batch):
                x = images[i : i + batch]
                feats.append(encoder(perturb(x, t, g).x_t, t).cls_feature)
            stds.append(float(channel_std(torch.cat(feats)).mean()))
    finally:
        encoder.train(was_training)
    d = encoder.cfg.dim_enc
    return DiagnosticReport([float(t) for t in times], stds, 1 / math.sqrt(d), images.shape[0])


# ---------------------------------------------------------------------------
# reports and plots


def write_report(path, metrics: dict, count: int, config_hash: str, extra: dict | None = None) -> None:
    """Structured metrics report: one JSON object per metric plus a header line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps({"config_hash": config_hash, "count": count, **(extra or {})}) + "\n")
        for name, value in metrics.items():
            fh.write(json.dumps({"metric": name, "value": value, "count": count, "config_hash": config_hash})
                     + "\n")


def plot_curve(path, xs, ys, xlabel: str, ylabel: str, logx: bool = False, hline: float | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(xs, ys, marker="o", ms=3)
    if hline is not None:
        ax.axhline(hline, color="gray", ls="--", lw=0.8)
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
