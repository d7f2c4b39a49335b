"""Data ingestion, augmentation and construction of noisy training inputs.

Images live in ``[-1, 1]`` as float tensors shaped ``(B, C, H, W)``. All
randomness comes from an explicit ``torch.Generator``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .schedules import TimeGrid

log = logging.getLogger(__name__)

NULL_LABEL = -1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
INDEX_FILE = "index.csv"


@dataclass
class CleanSample:
    x0: torch.Tensor
    label: torch.Tensor | None = None


@dataclass
class NoisySample:
    x_t: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    origin: CleanSample


@dataclass
class TrajectoryPair:
    hi: NoisySample
    lo: NoisySample
    n: torch.Tensor


@dataclass
class ViewPair:
    y1: torch.Tensor
    y2: torch.Tensor


def _bcast(t, x: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-sample time against an image batch."""
    t = torch.as_tensor(t, dtype=x.dtype)
    if t.ndim == 0:
        return t
    return t.reshape(-1, *([1] * (x.ndim - 1)))


# ---------------------------------------------------------------------------
# dataset


def center_crop_resize(img: Image.Image, resolution: int) -> Image.Image:
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != resolution:
        img = img.resize((resolution, resolution), Image.BICUBIC)
    return img


def to_unit_range(pixels: torch.Tensor) -> torch.Tensor:
    """uint8 bytes to floats with 0 -> -1 and 255 -> +1."""
    return pixels.to(torch.float32) / 127.5 - 1.0


def to_bytes(x: torch.Tensor) -> torch.Tensor:
    return ((x.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)


class ImageFolderDataset:
    """Labelled images from ``root/<class>/<image>`` or a packed ``index.csv``.

    The whole set is decoded once into a uint8 tensor; at 32x32 even tens of
    thousands of images fit comfortably in memory.
    """

    def __init__(self, root, resolution: int, split: str | None = None):
        root = Path(root)
        if split and (root / split).is_dir():
            root = root / split
        self.root = root
        self.resolution = resolution
        self.skipped = 0

        entries = self._index_entries(root) if (root / INDEX_FILE).exists() else self._scan(root)
        images, labels = [], []
        for rel, label in entries:
            try:
                with Image.open(root / rel) as img:
                    img = center_crop_resize(img.convert("RGB"), resolution)
                    images.append(np.asarray(img, dtype=np.uint8).transpose(2, 0, 1).copy())
                    labels.append(label)
            except (OSError, UnidentifiedImageError, ValueError) as exc:
                self.skipped += 1
                log.warning("skipping unreadable image %s: %s", rel, exc)
        if not images:
            raise RuntimeError(f"no readable images under {root}")
        self.pixels = torch.from_numpy(np.stack(images))
        self.labels = torch.tensor(labels, dtype=torch.long)

    @classmethod
    def from_arrays(cls, pixels, labels) -> "ImageFolderDataset":
        """In-memory dataset from ``(n, H, W, 3)`` uint8 images and integer labels."""
        ds = cls.__new__(cls)
        ds.root, ds.skipped = None, 0
        ds.pixels = torch.as_tensor(np.asarray(pixels, dtype=np.uint8)).permute(0, 3, 1, 2).contiguous()
        ds.labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        ds.resolution = ds.pixels.shape[-1]
        ds.classes = [str(c) for c in sorted(set(ds.labels.tolist()))]
        return ds

    def _scan(self, root: Path) -> list[tuple[str, int]]:
        if not root.is_dir():
            raise RuntimeError(f"dataset directory {root} does not exist")
        classes = sorted(p.name for p in root.iterdir() if p.is_dir())
        self.classes = classes
        entries = []
        for cid, name in enumerate(classes):
            for f in sorted((root / name).iterdir()):
                if f.suffix.lower() in IMAGE_SUFFIXES:
                    entries.append((f"{name}/{f.name}", cid))
        return entries

    def _index_entries(self, root: Path) -> list[tuple[str, int]]:
        with open(root / INDEX_FILE, newline="") as fh:
            rows = [(r["path"], int(r["label"])) for r in csv.DictReader(fh)]
        self.classes = [str(c) for c in sorted({label for _, label in rows})]
        return rows

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i) -> CleanSample:
        return CleanSample(to_unit_range(self.pixels[i]), self.labels[i])

    def epoch_order(self, seed: int, epoch: int) -> torch.Tensor:
        g = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
        return torch.randperm(len(self), generator=g)

    def batch_at(self, step: int, batch_size: int, seed: int) -> CleanSample:
        """The batch consumed at a global step; a pure function of ``(seed, step)``."""
        n = len(self)
        start = step * batch_size
        idx = []
        while len(idx) < batch_size:
            epoch, offset = divmod(start + len(idx), n)
            order = self.epoch_order(seed, epoch)
            take = min(batch_size - len(idx), n - offset)
            idx.extend(order[offset : offset + take].tolist())
        return self[torch.tensor(idx)]


def load_dataset(path, resolution: int, split: str | None = None) -> ImageFolderDataset:
    return ImageFolderDataset(path, resolution, split)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_p: float = 0.2
    blur_p: tuple[float, float] = (0.5, 0.1)
    # blur sigma in pixels of a 224px image, rescaled to the working resolution
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_p=0.0, jitter_p=0.0,
                   grayscale_p=0.0, blur_p=(0.0, 0.0))


def _uniform(lo, hi, n, g):
    return lo + (hi - lo) * torch.rand(n, generator=g, dtype=torch.float64)


def _gray(x: torch.Tensor) -> torch.Tensor:
    w = x.new_tensor([0.299, 0.587, 0.114]).reshape(1, 3, 1, 1)
    return (x * w).sum(1, keepdim=True)


def random_resized_crop_flip(x: torch.Tensor, cfg: AugmentConfig, g: torch.Generator) -> torch.Tensor:
    """Per-sample crop + optional horizontal flip, resampled back to full size."""
    B, _, H, W = x.shape
    area = _uniform(*cfg.crop_scale, B, g)
    log_r = _uniform(math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]), B, g)
    ratio = torch.exp(log_r)
    # crop size as fractions of the image side
    cw = torch.sqrt(area * ratio).clamp(max=1.0)
    ch = torch.sqrt(area / ratio).clamp(max=1.0)
    cx = (1 - cw) * torch.rand(B, generator=g, dtype=torch.float64)
    cy = (1 - ch) * torch.rand(B, generator=g, dtype=torch.float64)
    flip = torch.rand(B, generator=g) < cfg.flip_p

    full = (cw == 1) & (ch == 1)
    if bool(full.all()) and not bool(flip.any()):
        return x
    sx = torch.where(flip, -cw, cw)
    theta = torch.zeros(B, 2, 3, dtype=torch.float64)
    theta[:, 0, 0] = sx
    theta[:, 0, 2] = 2 * cx + cw - 1
    theta[:, 1, 1] = ch
    theta[:, 1, 2] = 2 * cy + ch - 1
    grid = F.affine_grid(theta.to(x.dtype), list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    # exact pass-through where nothing happened
    keep = (full & ~flip).reshape(-1, 1, 1, 1)
    out = torch.where(keep, x, out)
    # pure flips are exact reindexing
    pure_flip = (full & flip).reshape(-1, 1, 1, 1)
    return torch.where(pure_flip, x.flip(-1), out)


def color_jitter(x: torch.Tensor, cfg: AugmentConfig, g: torch.Generator) -> torch.Tensor:
    """Brightness, contrast, saturation and hue jitter on ``[0, 1]`` images."""
    B = x.shape[0]
    apply = (torch.rand(B, generator=g) < cfg.jitter_p).reshape(-1, 1, 1, 1)
    shape = (B, 1, 1, 1)
    b = _uniform(1 - cfg.brightness, 1 + cfg.brightness, B, g).to(x.dtype).reshape(shape)
    c = _uniform(1 - cfg.contrast, 1 + cfg.contrast, B, g).to(x.dtype).reshape(shape)
    s = _uniform(1 - cfg.saturation, 1 + cfg.saturation, B, g).to(x.dtype).reshape(shape)
    h = _uniform(-cfg.hue, cfg.hue, B, g).to(x.dtype).reshape(B)

    y = (x * b).clamp(0, 1)
    mean = _gray(y).mean(dim=(2, 3), keepdim=True)
    y = ((y - mean) * c + mean).clamp(0, 1)
    gray = _gray(y)
    y = ((y - gray) * s + gray).clamp(0, 1)
    y = _rotate_hue(y, h).clamp(0, 1)
    return torch.where(apply, y, x)


def _rotate_hue(x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """Hue rotation by ``h`` turns via the YIQ chroma plane."""
    to_yiq = x.new_tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    to_rgb = torch.linalg.inv(to_yiq)
    ang = 2 * math.pi * h
    cos, sin = torch.cos(ang), torch.sin(ang)
    rot = torch.zeros(len(h), 3, 3, dtype=x.dtype)
    rot[:, 0, 0] = 1
    rot[:, 1, 1], rot[:, 1, 2] = cos, -sin
    rot[:, 2, 1], rot[:, 2, 2] = sin, cos
    m = to_rgb @ rot @ to_yiq
    return torch.einsum("bij,bjhw->bihw", m, x)


def gaussian_blur(x: torch.Tensor, p: float, cfg: AugmentConfig, g: torch.Generator) -> torch.Tensor:
    B, C, H, W = x.shape
    apply = torch.rand(B, generator=g) < p
    scale = H / 224
    sigma = (_uniform(*cfg.blur_sigma, B, g) * scale).clamp_min(1e-3)
    if not bool(apply.any()):
        return x
    radius = max(1, math.ceil(3 * float(sigma.max())))
    r = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-(r.reshape(1, -1) ** 2) / (2 * sigma.reshape(-1, 1) ** 2))
    k = (k / k.sum(1, keepdim=True)).to(x.dtype)
    k = k.repeat_interleave(C, dim=0)
    y = x.reshape(1, B * C, H, W)
    y = F.pad(y, (radius, radius, 0, 0), mode="reflect" if radius < W else "replicate")
    y = F.conv2d(y, k.reshape(B * C, 1, 1, -1), groups=B * C)
    y = F.pad(y, (0, 0, radius, radius), mode="reflect" if radius < H else "replicate")
    y = F.conv2d(y, k.reshape(B * C, 1, -1, 1), groups=B * C)
    y = y.reshape(B, C, H, W)
    return torch.where(apply.reshape(-1, 1, 1, 1), y, x)


def _one_view(x: torch.Tensor, blur_p: float, cfg: AugmentConfig, g: torch.Generator) -> torch.Tensor:
    y = random_resized_crop_flip(x, cfg, g)
    y = (y + 1) / 2
    y = color_jitter(y, cfg, g)
    gray = torch.rand(y.shape[0], generator=g) < cfg.grayscale_p
    y = torch.where(gray.reshape(-1, 1, 1, 1), _gray(y).expand_as(y), y)
    y = gaussian_blur(y, blur_p, cfg, g)
    out = (y * 2 - 1).clamp(-1, 1)
    # untouched samples come back bit-identical instead of via the [0, 1] round trip
    same = (y == (x + 1) / 2).flatten(1).all(1).reshape(-1, 1, 1, 1)
    return torch.where(same, x, out)


def augment_views(x: CleanSample | torch.Tensor, generator: torch.Generator,
                  cfg: AugmentConfig | None = None) -> ViewPair:
    """Two independent draws of the contrastive augmentation pipeline."""
    cfg = cfg or AugmentConfig()
    x0 = x.x0 if isinstance(x, CleanSample) else x
    squeeze = x0.ndim == 3
    if squeeze:
        x0 = x0.unsqueeze(0)
    y1 = _one_view(x0, cfg.blur_p[0], cfg, generator)
    y2 = _one_view(x0, cfg.blur_p[1], cfg, generator)
    if squeeze:
        y1, y2 = y1[0], y2[0]
    return ViewPair(y1, y2)


def random_hflip(x: torch.Tensor, generator: torch.Generator, p: float = 0.5) -> torch.Tensor:
    flip = (torch.rand(x.shape[0], generator=generator) < p).reshape(-1, 1, 1, 1)
    return torch.where(flip, x.flip(-1), x)


# ---------------------------------------------------------------------------
# noise


def perturb(x: CleanSample | torch.Tensor, t, generator: torch.Generator | None = None,
            eps: torch.Tensor | None = None) -> NoisySample:
    """Forward-marginal sample ``x_t = x_0 + t * eps``."""
    sample = x if isinstance(x, CleanSample) else CleanSample(x)
    x0 = sample.x0
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    t = torch.as_tensor(t, dtype=x0.dtype)
    return NoisySample(x0 + _bcast(t, x0) * eps, t, eps, sample)


def temporal_pair(x: CleanSample | torch.Tensor, grid: TimeGrid, n, generator: torch.Generator | None = None,
                  eps: torch.Tensor | None = None, scale: float = 1.0) -> TrajectoryPair:
    """Two points of one trajectory at ``t_n`` and ``t_{n-1}`` sharing the same noise.

    ``scale`` multiplies both grid times (resolution noise shift).
    """
    sample = x if isinstance(x, CleanSample) else CleanSample(x)
    n = torch.as_tensor(n, dtype=torch.long)
    if bool((n < 1).any()) or bool((n > len(grid) - 1).any()):
        raise ValueError("temporal_pair needs 1 <= n <= N-1")
    times = grid.as_tensor() * scale
    x0 = sample.x0
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    t_hi = times[n].to(x0.dtype)
    t_lo = times[n - 1].to(x0.dtype)
    hi = NoisySample(x0 + _bcast(t_hi, x0) * eps, t_hi, eps, sample)
    lo = NoisySample(x0 + _bcast(t_lo, x0) * eps, t_lo, eps, sample)
    return TrajectoryPair(hi, lo, n)


def label_dropout(label: torch.Tensor, p_drop: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Replace labels with ``NULL_LABEL`` with probability ``p_drop``."""
    if not 0 <= p_drop <= 1:
        raise ValueError("p_drop must lie in [0, 1]")
    label = torch.as_tensor(label)
    drop = torch.rand(label.shape, generator=generator) < p_drop
    return torch.where(drop, torch.full_like(label, NULL_LABEL), label)
