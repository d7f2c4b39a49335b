import csv
import hashlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from epg.schedules import TimeGrid, karras_grid
from epg.trajectory import (
    NULL_LABEL,
    AugmentConfig,
    CleanSample,
    ImageFolderDataset,
    augment_views,
    center_crop_resize,
    label_dropout,
    load_dataset,
    perturb,
    random_hflip,
    temporal_pair,
    to_bytes,
    to_unit_range,
)


def _write_tree(root, n_per_class=3, classes=("a", "b"), size=(64, 48)):
    rng = np.random.default_rng(0)
    for c in classes:
        (root / c).mkdir(parents=True)
        for i in range(n_per_class):
            arr = rng.integers(0, 256, (size[1], size[0], 3), dtype=np.uint8)
            Image.fromarray(arr).save(root / c / f"{i}.png")


# --- ingestion ---------------------------------------------------------------


def test_center_crop_then_resize():
    arr = np.zeros((48, 64, 3), dtype=np.uint8)
    arr[:, 8:56] = 255  # the central 48x48 square is white, the side bands black
    out = center_crop_resize(Image.fromarray(arr), 32)
    assert out.size == (32, 32)
    assert np.asarray(out).min() == 255


def test_byte_mapping():
    x = to_unit_range(torch.tensor([0, 255, 128], dtype=torch.uint8))
    assert x[0] == -1.0 and x[1] == 1.0
    assert torch.equal(to_bytes(to_unit_range(torch.arange(256, dtype=torch.uint8))),
                       torch.arange(256, dtype=torch.uint8))


def test_load_tree(tmp_path):
    _write_tree(tmp_path)
    (tmp_path / "a" / "broken.png").write_bytes(b"not an image")
    ds = load_dataset(tmp_path, 32)
    assert len(ds) == 6 and ds.skipped == 1
    assert ds.classes == ["a", "b"] and ds.num_classes == 2
    s = ds[0]
    assert s.x0.shape == (3, 32, 32)
    assert float(s.x0.min()) >= -1 and float(s.x0.max()) <= 1
    assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]


def test_load_index_file(tmp_path):
    _write_tree(tmp_path)
    with open(tmp_path / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label"])
        w.writerow(["b/0.png", 7])
        w.writerow(["a/1.png", 2])
    ds = load_dataset(tmp_path, 16)
    assert len(ds) == 2 and ds.labels.tolist() == [7, 2]


def test_empty_dataset_is_fatal(tmp_path):
    (tmp_path / "a").mkdir()
    with pytest.raises(RuntimeError):
        load_dataset(tmp_path, 32)
    with pytest.raises(RuntimeError):
        load_dataset(tmp_path / "missing", 32)


def test_epoch_order_deterministic():
    rng = np.random.default_rng(0)
    ds = ImageFolderDataset.from_arrays(rng.integers(0, 256, (5000, 4, 4, 3)), np.arange(5000) % 10)
    h = [hashlib.sha256(ds.epoch_order(3, 0).numpy().tobytes()).hexdigest() for _ in range(2)]
    assert h[0] == h[1]
    assert not torch.equal(ds.epoch_order(3, 0), ds.epoch_order(3, 1))


def test_batch_at_is_pure_and_covers_epoch():
    rng = np.random.default_rng(0)
    ds = ImageFolderDataset.from_arrays(rng.integers(0, 256, (10, 4, 4, 3)), np.arange(10))
    b1 = ds.batch_at(3, 4, seed=1)
    b2 = ds.batch_at(3, 4, seed=1)
    assert torch.equal(b1.x0, b2.x0) and torch.equal(b1.label, b2.label)
    seen = torch.cat([ds.batch_at(k, 5, seed=1).label for k in range(2)])
    assert sorted(seen.tolist()) == list(range(10))


# --- augmentation ---------------------------------------------------------------


def test_identity_augmentation():
    x = torch.rand(8, 3, 16, 16) * 2 - 1
    v = augment_views(x, torch.Generator().manual_seed(0), AugmentConfig.identity())
    assert torch.equal(v.y1, x) and torch.equal(v.y2, x)


def test_augmentation_deterministic_and_shaped():
    x = torch.rand(8, 3, 16, 16) * 2 - 1
    a = augment_views(x, torch.Generator().manual_seed(5))
    b = augment_views(x, torch.Generator().manual_seed(5))
    assert torch.equal(a.y1, b.y1) and torch.equal(a.y2, b.y2)
    assert a.y1.shape == x.shape
    assert float(a.y1.abs().max()) <= 1 and float(a.y2.abs().max()) <= 1


def test_augmentation_single_sample():
    x = torch.rand(3, 16, 16) * 2 - 1
    v = augment_views(CleanSample(x), torch.Generator().manual_seed(0))
    assert v.y1.shape == x.shape


def test_views_differ_monte_carlo():
    x = torch.rand(1000, 3, 16, 16) * 2 - 1
    v = augment_views(x, torch.Generator().manual_seed(0))
    differ = (v.y1 != v.y2).flatten(1).any(1).float().mean()
    assert float(differ) >= 0.99


def test_random_hflip():
    x = torch.rand(64, 3, 4, 4)
    y = random_hflip(x, torch.Generator().manual_seed(0), 0.5)
    flipped = (y == x.flip(-1)).flatten(1).all(1)
    same = (y == x).flatten(1).all(1)
    assert bool((flipped | same).all()) and 10 < int(flipped.sum()) < 54
    assert torch.equal(random_hflip(x, torch.Generator(), 0.0), x)


# --- perturbation and pairs ---------------------------------------------------------


def test_perturb_examples():
    x = torch.rand(2, 3, 4, 4)
    assert torch.equal(perturb(x, 0.0, torch.Generator()).x_t, x)
    z = torch.zeros(2, 3, 4, 4)
    s = perturb(z, 2.0, eps=torch.ones_like(z))
    assert torch.equal(s.x_t, torch.full_like(z, 2.0))


def test_perturb_marginal_std():
    x = torch.zeros(10_000, 1, 2, 2, dtype=torch.float64)
    s = perturb(x, 3.0, torch.Generator().manual_seed(0))
    d = s.x_t - x
    assert float(d.std(0).min()) == pytest.approx(3.0, rel=0.02)
    assert float(d.std(0).max()) == pytest.approx(3.0, rel=0.02)
    assert float(d.mean(0).abs().max()) < 4 * 3.0 / 100


def test_pair_hand_example():
    x = torch.zeros(1, 1, 2, 2)
    p = temporal_pair(x, TimeGrid((0.002, 1.0, 2.0)), torch.tensor([2]), eps=torch.ones_like(x))
    assert torch.equal(p.hi.x_t, torch.full_like(x, 2.0))
    assert torch.equal(p.lo.x_t, torch.ones_like(x))


def test_pair_n1_is_near_clean():
    grid = karras_grid(20)
    x = torch.rand(4, 3, 4, 4, dtype=torch.float64)
    p = temporal_pair(x, grid, torch.ones(4, dtype=torch.long), torch.Generator().manual_seed(0))
    assert float((p.lo.x_t - x).abs().max()) <= 0.002 * float(p.lo.eps.abs().max()) + 1e-15


def test_pair_rejects_bad_index():
    grid = karras_grid(5)
    x = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ValueError):
        temporal_pair(x, grid, torch.tensor([0]))
    with pytest.raises(ValueError):
        temporal_pair(x, grid, torch.tensor([5]))


@given(seed=st.integers(0, 2**31), n_grid=st.integers(2, 1280))
@settings(max_examples=50, deadline=None)
def test_pair_shares_noise_and_reconstructs(seed, n_grid):
    g = torch.Generator().manual_seed(seed)
    grid = karras_grid(n_grid)
    x = torch.rand(3, 3, 4, 4, generator=g, dtype=torch.float64) * 2 - 1
    n = torch.randint(1, n_grid, (3,), generator=g)
    p = temporal_pair(x, grid, n, g, scale=0.5)
    assert p.hi.eps is p.lo.eps
    t_hi = p.hi.t.reshape(-1, 1, 1, 1)
    t_lo = p.lo.t.reshape(-1, 1, 1, 1)
    assert torch.equal(p.hi.x_t, x + t_hi * p.hi.eps)
    assert torch.equal(p.lo.x_t, x + t_lo * p.lo.eps)
    assert torch.equal(p.hi.t, grid.as_tensor()[n] * 0.5)
    # the difference identity up to the two final roundings
    err = (p.hi.x_t - p.lo.x_t) - (t_hi - t_lo) * p.hi.eps
    bound = 4 * torch.finfo(torch.float64).eps * (p.hi.x_t.abs() + p.lo.x_t.abs() + (t_hi * p.hi.eps).abs())
    assert bool((err.abs() <= bound).all())


# --- labels ------------------------------------------------------------------


def test_label_dropout_extremes():
    y = torch.arange(100)
    g = torch.Generator().manual_seed(0)
    assert torch.equal(label_dropout(y, 0.0, g), y)
    assert bool((label_dropout(y, 1.0, g) == NULL_LABEL).all())
    with pytest.raises(ValueError):
        label_dropout(y, 1.5, g)


def test_label_dropout_rate():
    y = torch.zeros(10_000, dtype=torch.long)
    frac = (label_dropout(y, 0.1, torch.Generator().manual_seed(0)) == NULL_LABEL).float().mean()
    assert float(frac) == pytest.approx(0.1, abs=0.01)
