import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from supersimplenet.anomaly_synth import (
    compose_masks,
    downsample_gt,
    perlin_mask,
    perlin_noise,
    perturb,
    save_mask_set,
)
from supersimplenet.config import NoiseConfig


def test_perlin_range_and_extreme_thresholds():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = perlin_noise(32, 48, (int(rng.integers(1, 9)), int(rng.integers(1, 9))), rng)
        assert np.abs(n).max() <= math.sqrt(0.5) + 1e-12
    assert not perlin_mask(64, 64, 1.0, np.random.default_rng(1)).any()
    assert perlin_mask(64, 64, -1.0, np.random.default_rng(1)).all()


def test_perlin_mask_seeded_reproducible():
    a = perlin_mask(40, 24, 0.2, np.random.default_rng(5))
    b = perlin_mask(40, 24, 0.2, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_perlin_mask_small_grids():
    rng = np.random.default_rng(3)
    for h, w in [(1, 1), (3, 5), (16, 16), (58, 160)]:
        assert perlin_mask(h, w, 0.2, rng).shape == (h, w)


def test_compose_examples():
    m_t = np.array([[1, 0], [1, 1]], dtype=bool)
    m_gt = np.array([[1, 0], [0, 0]], dtype=bool)
    ms = compose_masks(m_t, m_gt)
    assert ms.m_a.tolist() == [[False, False], [True, True]]
    assert ms.m.tolist() == [[True, False], [True, True]]

    ms = compose_masks(m_t, np.zeros_like(m_t))
    assert np.array_equal(ms.m_a, m_t) and np.array_equal(ms.m, m_t)

    ms = compose_masks(m_t, m_t.copy())
    assert not ms.m_a.any() and np.array_equal(ms.m, m_t)

    ms = compose_masks(m_t, m_gt, overlap_allowed=True)
    assert np.array_equal(ms.m_a, m_t)

    with pytest.raises(ValueError):
        compose_masks(m_t, np.zeros((3, 2), dtype=bool))


def test_downsample_gt_rules():
    assert not downsample_gt(np.zeros((64, 64), dtype=bool), (16, 16)).any()
    assert downsample_gt(np.ones((64, 64), dtype=bool), (16, 16)).all()
    one = np.zeros((232, 640), dtype=bool)
    one[101, 333] = True
    out = downsample_gt(one, (58, 160))
    assert out.sum() == 1 and out[101 // 4, 333 // 4]
    with pytest.raises(ValueError):
        downsample_gt(np.zeros((8, 8)), (16, 16))


def test_downsample_gt_batched_any_overlap_oracle():
    rng = np.random.default_rng(2)
    masks = rng.random((3, 24, 40)) < 0.02
    out = downsample_gt(torch.from_numpy(masks), (6, 10)).numpy()
    blocks = masks.reshape(3, 6, 4, 10, 4).any(axis=(2, 4))
    assert np.array_equal(out, blocks)


def _cfg(**kw):
    base = dict(gauss_sigma=0.015, perlin_threshold=0.2, anomaly_probability=0.5)
    base.update(kw)
    return NoiseConfig(**base)


def test_perturb_zero_sigma_and_no_synthetic():
    x = torch.randn(4, 8, 6, 6)
    out, masks, y = perturb(x, None, _cfg(gauss_sigma=0.0), np.random.default_rng(0))
    assert torch.equal(out, torch.cat([x, x]))
    out, masks, y = perturb(x, None, _cfg(synthetic_enabled=False), np.random.default_rng(0))
    assert torch.equal(out, torch.cat([x, x])) and not y.any() and not masks.m.any()


def test_perturb_duplicates_batch():
    x = torch.randn(8, 4, 5, 5)
    out, masks, y = perturb(x, None, _cfg(), np.random.default_rng(0))
    assert out.shape[0] == 16 and masks.m.shape == (16, 5, 5) and y.shape == (16,)
    out, masks, y = perturb(x, None, _cfg(duplicate_features=False), np.random.default_rng(0))
    assert out.shape[0] == 8


def test_perturb_noise_statistics():
    x = torch.zeros(4, 256, 32, 32)
    cfg = _cfg(perlin_threshold=-0.999999, anomaly_probability=1.0)
    out, masks, _ = perturb(x, None, cfg, np.random.default_rng(0))
    assert masks.m_a.all()
    assert out.numel() >= 10 ** 6
    mean_abs = out.abs().mean().item()
    assert mean_abs == pytest.approx(0.015 * math.sqrt(2 / math.pi), rel=0.05)


def test_perturb_supervised_labels_and_exclusion():
    x = torch.randn(2, 4, 8, 8)
    gt = torch.zeros(2, 8, 8, dtype=torch.bool)
    gt[0, 2:4, 2:4] = True
    cfg = _cfg(anomaly_probability=0.0)
    out, masks, y = perturb(x, gt, cfg, np.random.default_rng(0))
    assert y.tolist() == [1.0, 0.0, 1.0, 0.0]
    cfg = _cfg(anomaly_probability=1.0, perlin_threshold=-0.99999)
    out, masks, y = perturb(x, gt, cfg, np.random.default_rng(0))
    assert not (masks.m_a & masks.m_gt).any()
    assert torch.equal(out[0, :, 2:4, 2:4], x[0, :, 2:4, 2:4])


def test_simplenet_style_noises_whole_copy():
    x = torch.zeros(3, 4, 6, 6)
    out, masks, y = perturb(x, None, _cfg(generator_style="simplenet_full_copy"), np.random.default_rng(0))
    assert torch.equal(out[:3], x)
    assert (out[3:] != 0).float().mean() > 0.99
    assert y.tolist() == [0, 0, 0, 1, 1, 1]


def test_perturb_seed_reproducible():
    x = torch.randn(4, 8, 10, 10)
    a = perturb(x, None, _cfg(), np.random.default_rng(42))
    b = perturb(x, None, _cfg(), np.random.default_rng(42))
    assert torch.equal(a[0], b[0]) and torch.equal(a[1].m, b[1].m)


def test_perturb_shape_errors():
    with pytest.raises(ValueError):
        perturb(torch.zeros(2, 3, 4, 4), torch.zeros(2, 5, 5, dtype=torch.bool), _cfg(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        perturb(torch.zeros(2, 3, 4, 4), None, _cfg(gauss_sigma=-1.0), np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.booleans(), st.sampled_from(["perlin_masked", "simplenet_full_copy"]))
def test_mask_invariants_property(seed, overlap, style):
    rng = np.random.default_rng(seed)
    b, h, w = 3, int(rng.integers(2, 12)), int(rng.integers(2, 12))
    x = torch.randn(b, 5, h, w)
    gt = torch.from_numpy(rng.random((b, h, w)) < 0.2)
    cfg = _cfg(overlap_allowed=overlap, generator_style=style, anomaly_probability=float(rng.random()))
    out, ms, y = perturb(x, gt, cfg, rng)
    base = torch.cat([x, x])
    assert torch.equal(ms.m, ms.m_a | ms.m_gt)
    if not overlap:
        assert not (ms.m_a & ms.m_gt).any()
    outside = ~ms.m_a[:, None].expand_as(out)
    assert torch.equal(out[outside], base[outside])
    assert torch.equal(y.bool(), ms.m.flatten(1).any(1))


def test_save_mask_set(tmp_path):
    x = torch.randn(1, 2, 4, 4)
    _, masks, _ = perturb(x, None, _cfg(), np.random.default_rng(0))
    paths = save_mask_set(masks, tmp_path)
    assert len(paths) == 8 and all(p.exists() for p in paths)
