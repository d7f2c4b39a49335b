"""Procedural 10-class image dataset for offline desk-scale runs.

Each class is a shape or texture family; colour, position, scale, phase and
background vary per image.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

CLASSES = ("disc", "square", "triangle", "ring", "cross",
           "hstripes", "vstripes", "diagonal", "checker", "blob")


def _canvas(res: int, rng: np.random.Generator):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) / (res - 1) * 2 - 1
    bg = rng.uniform(0.0, 0.45, 3)
    fg = rng.uniform(0.55, 1.0, 3)
    if rng.random() < 0.5:
        bg, fg = fg, bg
    return xx, yy, bg, fg


def _mask(label: int, xx, yy, rng: np.random.Generator) -> np.ndarray:
    cx, cy = rng.uniform(-0.35, 0.35, 2)
    s = rng.uniform(0.35, 0.7)
    a = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(a) + (yy - cy) * np.sin(a)
    v = -(xx - cx) * np.sin(a) + (yy - cy) * np.cos(a)
    r = np.hypot(xx - cx, yy - cy)
    freq = rng.uniform(3, 6)
    phase = rng.uniform(0, 2 * np.pi)
    name = CLASSES[label]
    if name == "disc":
        return (r < s).astype(float)
    if name == "square":
        return ((np.abs(u) < s * 0.8) & (np.abs(v) < s * 0.8)).astype(float)
    if name == "triangle":
        return ((v > -s * 0.6) & (v < s * 0.9 - 1.7 * np.abs(u))).astype(float)
    if name == "ring":
        return ((r < s) & (r > s * 0.6)).astype(float)
    if name == "cross":
        w = s * 0.25
        return (((np.abs(u) < w) | (np.abs(v) < w)) & (np.abs(u) < s) & (np.abs(v) < s)).astype(float)
    if name == "hstripes":
        return (np.sin(yy * freq * np.pi + phase) > 0).astype(float)
    if name == "vstripes":
        return (np.sin(xx * freq * np.pi + phase) > 0).astype(float)
    if name == "diagonal":
        return (np.sin((xx + yy) * freq * np.pi / np.sqrt(2) + phase) > 0).astype(float)
    if name == "checker":
        return ((np.sin(xx * freq * np.pi + phase) * np.sin(yy * freq * np.pi + phase)) > 0).astype(float)
    # soft gaussian blob
    return np.exp(-(r**2) / (2 * (s * 0.5) ** 2))


def render(label: int, res: int, rng: np.random.Generator) -> np.ndarray:
    """One ``(res, res, 3)`` uint8 image of class ``label``."""
    xx, yy, bg, fg = _canvas(res, rng)
    m = _mask(label, xx, yy, rng)[..., None]
    img = bg * (1 - m) + fg * m
    img = img + rng.normal(0, 0.03, img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_arrays(per_class: int, res: int = 32, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(CLASSES)), per_class)
    images = np.stack([render(int(c), res, rng) for c in labels])
    return images, labels


def write_dataset(root, per_class: int, res: int = 32, seed: int = 0) -> Path:
    """Write ``root/<class>/<i>.png`` for every class."""
    root = Path(root)
    images, labels = make_arrays(per_class, res, seed)
    counters = {}
    for img, c in zip(images, labels):
        d = root / f"{int(c):02d}_{CLASSES[c]}"
        d.mkdir(parents=True, exist_ok=True)
        i = counters.get(c, 0)
        counters[c] = i + 1
        Image.fromarray(img).save(d / f"{i:05d}.png")
    return root
