import math

import pytest
import torch

from cdmask.backbone import (
    BackboneConfig,
    ReferenceBackbone,
    extract_features,
    pad_to_multiple,
    siamese_apply,
)


@pytest.fixture
def backbone():
    torch.manual_seed(0)
    return ReferenceBackbone().eval()


def test_pyramid_sizes_256(backbone):
    pyr = extract_features(backbone, torch.randn(1, 3, 256, 256))
    assert [f.shape[-1] for f in pyr.levels] == [64, 32, 16, 8]
    assert pyr.strides == (4, 8, 16, 32)
    assert pyr.channels == [32, 64, 128, 256]


@pytest.mark.parametrize("h,w", [(64, 96), (37, 50), (8, 8)])
def test_ceil_stride_contract(backbone, h, w):
    pyr = backbone(torch.randn(1, 3, h, w))
    for f, s in zip(pyr.levels, pyr.strides):
        assert f.shape[-2:] == (math.ceil(h / s), math.ceil(w / s))


def test_zero_input_is_finite(backbone):
    pyr = backbone(torch.zeros(2, 3, 64, 64))
    assert all(torch.isfinite(f).all() for f in pyr.levels)


def test_deterministic_small_input():
    torch.manual_seed(1)
    net = ReferenceBackbone().eval()
    x = torch.randn(1, 3, 8, 8, generator=torch.Generator().manual_seed(5))
    a, b = net(x), net(x)
    for fa, fb in zip(a.levels, b.levels):
        assert torch.equal(fa, fb)


def test_rejects_non_finite(backbone):
    x = torch.zeros(1, 3, 32, 32)
    x[0, 0, 3, 3] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        backbone(x)


def test_config_validation():
    with pytest.raises(ValueError):
        ReferenceBackbone(BackboneConfig(widths=(64, 32, 128, 256)))
    with pytest.raises(ValueError):
        ReferenceBackbone(BackboneConfig(variant="seaformer"))


@pytest.mark.parametrize("train_mode", [False, True])
def test_siamese_weight_sharing_and_swap(backbone, train_mode):
    backbone.train(train_mode)
    t1 = torch.randn(2, 3, 64, 64)
    t2 = torch.randn(2, 3, 64, 64)
    p1, p2 = siamese_apply(backbone, t1, t1)
    assert all(torch.equal(a, b) for a, b in zip(p1.levels, p2.levels))
    a1, a2 = siamese_apply(backbone, t1, t2)
    b1, b2 = siamese_apply(backbone, t2, t1)
    assert all(torch.equal(x, y) for x, y in zip(a1.levels, b2.levels))
    assert all(torch.equal(x, y) for x, y in zip(a2.levels, b1.levels))


def test_siamese_shape_mismatch(backbone):
    with pytest.raises(ValueError):
        siamese_apply(backbone, torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 64, 32))


def test_perturbed_parameters_change_both(backbone):
    t1, t2 = torch.randn(1, 3, 32, 32), torch.randn(1, 3, 32, 32)
    before = siamese_apply(backbone, t1, t2)
    with torch.no_grad():
        backbone.stages[0].down[0].weight.add_(0.05)
    after = siamese_apply(backbone, t1, t2)
    for pb, pa in zip(before, after):
        assert not torch.equal(pb.levels[-1], pa.levels[-1])


def test_pad_to_multiple():
    x = torch.randn(1, 3, 50, 70)
    padded, size = pad_to_multiple(x)
    assert padded.shape[-2:] == (64, 96) and size == (50, 70)
    assert torch.equal(padded[..., :50, :70], x)
    same, _ = pad_to_multiple(torch.randn(1, 3, 64, 32))
    assert same.shape[-2:] == (64, 32)
    tiny, _ = pad_to_multiple(torch.randn(1, 3, 8, 8))
    assert tiny.shape[-2:] == (32, 32)
