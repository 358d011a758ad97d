import numpy as np
import pytest
import torch

from supersimplenet.config import BackboneSpec
from supersimplenet.featurizer import (
    FeatureExtractor,
    FeatureVolume,
    Featurizer,
    neighborhood_pool,
    upscale_and_merge,
)

from oracles import mean3x3_replicate


@pytest.fixture(scope="module")
def wide():
    return Featurizer(BackboneSpec(weights="random"))


def test_wide_resnet_shapes_256(wide):
    x = torch.randn(1, 3, 256, 256)
    vols = wide.extractor(x)
    assert [tuple(v.data.shape[1:]) for v in vols] == [(512, 32, 32), (1024, 16, 16)]
    merged = upscale_and_merge(vols, True)
    assert tuple(merged.data.shape[1:]) == (1536, 64, 64) and merged.stride == 4
    flat = upscale_and_merge(vols, False)
    assert tuple(flat.data.shape[1:]) == (1536, 32, 32) and flat.stride == 8
    assert wide.out_channels == 1536 and wide.stride == 4


def test_non_square_odd_grid(wide):
    x = torch.randn(1, 3, 232, 640)
    vols = wide.extractor(x)
    assert vols[0].spatial == (29, 80) and vols[1].spatial == (15, 40)
    assert tuple(wide(x).shape) == (1, 1536, 58, 160)
    assert wide.output_size((232, 640)) == (58, 160)


def test_rejects_indivisible_input(wide):
    with pytest.raises(ValueError):
        wide(torch.randn(1, 3, 100, 100))


def test_merge_needs_two_volumes():
    with pytest.raises(ValueError):
        upscale_and_merge([FeatureVolume(torch.zeros(1, 2, 4, 4), 8)])
    with pytest.raises(ValueError):
        upscale_and_merge([FeatureVolume(torch.zeros(1, 2, 4, 4), 8), FeatureVolume(torch.zeros(1, 2, 3, 3), 16)])


def test_pool_matches_direct_mean():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(7, 9))
    out = neighborhood_pool(FeatureVolume(torch.from_numpy(a)[None, None], 4)).data[0, 0].numpy()
    assert np.allclose(out, mean3x3_replicate(a), atol=1e-12)


def test_pool_constant_and_flip_commute():
    const = torch.full((2, 3, 5, 6), 1.75, dtype=torch.float64)
    assert torch.allclose(neighborhood_pool(FeatureVolume(const, 4)).data, const)
    x = torch.randn(2, 3, 8, 11, dtype=torch.float64)
    pooled = neighborhood_pool(FeatureVolume(x, 4)).data
    for dims in ([-1], [-2]):
        flipped = neighborhood_pool(FeatureVolume(x.flip(dims), 4)).data
        assert torch.allclose(flipped, pooled.flip(dims))


def test_pool_rejects_nan():
    x = torch.zeros(1, 1, 3, 3)
    x[0, 0, 1, 1] = float("nan")
    with pytest.raises(ValueError):
        neighborhood_pool(FeatureVolume(x, 4))


def test_extractor_frozen_and_stays_eval():
    ext = FeatureExtractor(BackboneSpec(name="resnet18", weights="random"))
    assert all(not p.requires_grad for p in ext.parameters())
    ext.train()
    assert not ext.training
    before = ext.fingerprint()
    ext(torch.randn(2, 3, 64, 64))
    assert ext.fingerprint() == before


def test_random_weights_seeded():
    a = FeatureExtractor(BackboneSpec(name="resnet18", weights="random", seed=3))
    b = FeatureExtractor(BackboneSpec(name="resnet18", weights="random", seed=3))
    c = FeatureExtractor(BackboneSpec(name="resnet18", weights="random", seed=4))
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()


def test_weights_from_file(tmp_path):
    import torchvision

    net = torchvision.models.resnet18(weights=None)
    path = tmp_path / "r18.pt"
    torch.save(net.state_dict(), path)
    ext = FeatureExtractor(BackboneSpec(name="resnet18", weights=str(path)))
    assert torch.equal(ext.stem[0].weight, net.conv1.weight)


def test_unknown_backbone():
    with pytest.raises(Exception):
        FeatureExtractor(BackboneSpec(name="vgg_nope", weights="random"))
