import numpy as np
import pytest
import torch
from torch import nn

from cdmask.backbone import FeaturePyramid
from cdmask.extractor import (
    ChangeExtractor,
    DSConv,
    LevelExtractor,
    TemporalChannelWeight,
    coarse_diff,
    extract_changes,
    fuse,
    spatial_weight,
)


def naive_conv2d(x, w, b, groups=1):
    """Zero-padded 'same' convolution, x (C, H, W), w (O, C/groups, k, k)."""
    C, H, W = x.shape
    O, cg, k, _ = w.shape
    pad = k // 2
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad : pad + H, pad : pad + W] = x
    out = np.zeros((O, H, W))
    per_group_out = O // groups
    for o in range(O):
        g = o // per_group_out
        for i in range(H):
            for j in range(W):
                acc = b[o]
                for c in range(cg):
                    acc += (xp[g * cg + c, i : i + k, j : j + k] * w[o, c]).sum()
                out[o, i, j] = acc
    return out


def naive_dsconv(x, ds):
    dw = ds.depthwise
    pw = ds.pointwise
    y = naive_conv2d(x, dw.weight.detach().numpy(), dw.bias.detach().numpy(), groups=x.shape[0])
    return naive_conv2d(y, pw.weight.detach().numpy(), pw.bias.detach().numpy())


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def test_coarse_diff():
    f1 = torch.tensor([[1.0, 2.0]])
    f2 = torch.tensor([[0.5, 3.0]])
    assert torch.equal(coarse_diff(f1, f2), torch.tensor([[0.5, -1.0]]))
    a, b = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    assert torch.equal(coarse_diff(a, b), -coarse_diff(b, a))
    assert not coarse_diff(a, a).any()
    with pytest.raises(ValueError):
        coarse_diff(a, b[:, :2])


def test_spatial_weight_range_and_midpoint():
    torch.manual_seed(0)
    ds = DSConv(8, 4)
    w = spatial_weight(torch.randn(2, 4, 5, 5) * 10, torch.randn(2, 4, 5, 5) * 10, ds)
    assert w.shape == (2, 4, 5, 5)
    assert ((w > 0) & (w < 1)).all()
    nn.init.zeros_(ds.depthwise.bias)
    nn.init.zeros_(ds.pointwise.bias)
    half = spatial_weight(torch.zeros(1, 4, 3, 3), torch.zeros(1, 4, 3, 3), ds)
    assert torch.equal(half, torch.full_like(half, 0.5))


def test_spatial_weight_matches_conv_oracle():
    torch.manual_seed(3)
    ds = DSConv(2, 1).double()
    with torch.no_grad():
        ds.depthwise.weight.copy_(torch.arange(18, dtype=torch.float64).view(2, 1, 3, 3) / 10 - 0.8)
        ds.depthwise.bias.copy_(torch.tensor([0.1, -0.2]))
        ds.pointwise.weight.copy_(torch.tensor([[[[0.7]], [[-0.4]]]]))
        ds.pointwise.bias.copy_(torch.tensor([0.05]))
    fc = torch.tensor([[[[0.3, -0.1], [0.2, 0.4]]]], dtype=torch.float64)
    ft = torch.tensor([[[[1.0, 0.5], [-0.5, 2.0]]]], dtype=torch.float64)
    got = spatial_weight(fc, ft, ds)[0].detach().numpy()
    want = sigmoid(naive_dsconv(np.concatenate([fc[0].numpy(), ft[0].numpy()]), ds))
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_channel_weight_shape_range_and_pooling():
    torch.manual_seed(0)
    tcw = TemporalChannelWeight(6, branches=2)
    out = tcw(torch.randn(3, 6, 4, 4) * 5)
    assert out.shape == (3, 6) and ((out > 0) & (out < 1)).all()
    v = torch.randn(1, 6, 1, 1)
    const = v.expand(1, 6, 5, 7)
    torch.testing.assert_close(const.mean(dim=(2, 3)), v.flatten(1))
    torch.testing.assert_close(tcw(const), tcw(v))
    with pytest.raises(ValueError):
        TemporalChannelWeight(5, branches=2)


def test_channel_weight_matches_mlp_oracle():
    tcw = TemporalChannelWeight(4, branches=2).double()
    rng = np.random.default_rng(0)
    params = {}
    with torch.no_grad():
        for j, branch in enumerate(tcw.branches):
            W = rng.normal(size=(2, 4))
            b = rng.normal(size=2)
            branch[0].weight.copy_(torch.from_numpy(W))
            branch[0].bias.copy_(torch.from_numpy(b))
            params[j] = (W, b)
        Wp, bp = rng.normal(size=(4, 4)), rng.normal(size=4)
        tcw.proj.weight.copy_(torch.from_numpy(Wp))
        tcw.proj.bias.copy_(torch.from_numpy(bp))
    fc = rng.normal(size=(4, 3, 3))
    pooled = fc.mean(axis=(1, 2))
    hidden = np.concatenate([np.maximum(W @ pooled + b, 0) for W, b in (params[0], params[1])])
    want = sigmoid(Wp @ hidden + bp)
    got = tcw(torch.from_numpy(fc)[None])[0].detach().numpy()
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_fuse_neutral_weights_gives_concat():
    f1, f2 = torch.randn(1, 3, 4, 4), torch.randn(1, 3, 4, 4)
    out = fuse(f1, f2, 1.0, 1.0, torch.ones(1, 3), nn.Identity())
    assert torch.equal(out, torch.cat([f1, f2], 1))


def test_fuse_annihilation_is_bias_only():
    torch.manual_seed(0)
    ds = DSConv(6, 3)
    f1, f2 = torch.randn(1, 3, 4, 4), torch.randn(1, 3, 4, 4)
    zero = torch.zeros(1, 3, 4, 4)
    out = fuse(f1, f2, zero, zero, torch.rand(1, 3), ds)
    torch.testing.assert_close(out, ds(torch.zeros(1, 6, 4, 4)))


def test_fuse_matches_oracle():
    torch.manual_seed(4)
    ds = DSConv(4, 2).double()
    rng = np.random.default_rng(1)
    f1, f2 = rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2))
    w1, w2 = rng.uniform(size=(2, 2, 2)), rng.uniform(size=(2, 2, 2))
    wc = rng.uniform(size=2)
    T = lambda a: torch.from_numpy(a)[None]
    got = fuse(T(f1), T(f2), T(w1), T(w2), torch.from_numpy(wc)[None], ds)[0].detach().numpy()
    stacked = np.concatenate([wc[:, None, None] * w1 * f1, wc[:, None, None] * w2 * f2])
    np.testing.assert_allclose(got, naive_dsconv(stacked, ds), rtol=1e-12)


def _pyramids(seed, chans=(4, 4, 4, 4), sizes=(4, 2, 1, 1), dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    mk = lambda: FeaturePyramid([torch.randn(1, c, s, s, generator=g, dtype=dtype) for c, s in zip(chans, sizes)])
    return mk(), mk()


def test_extract_changes_structure_and_zero_diff():
    torch.manual_seed(0)
    ext = ChangeExtractor((4, 4, 4, 4), 8).double()
    p1, p2 = _pyramids(0, sizes=(16, 8, 4, 2))
    rep = extract_changes(ext, p1, p2)
    assert len(rep) == 4 and rep.strides == (4, 8, 16, 32)
    assert [r.shape for r in rep.levels] == [(1, 8, s, s) for s in (16, 8, 4, 2)]
    for lvl, f in zip(ext.levels, p1.levels):
        fc, *_ = lvl.weights(f, f)
        assert not fc.any()


@pytest.mark.parametrize("spatial,channel", [(True, True), (True, False), (False, True), (False, False)])
def test_ablation_switches_shape_identical(spatial, channel):
    torch.manual_seed(0)
    ext = ChangeExtractor((4, 8, 8, 16), 8, use_spatial=spatial, use_channel=channel)
    p1, p2 = _pyramids(1, chans=(4, 8, 8, 16), sizes=(8, 4, 2, 1), dtype=torch.float32)
    rep = ext(p1, p2)
    assert [r.shape for r in rep.levels] == [(1, 8, s, s) for s in (8, 4, 2, 1)]
    _, w1, w2, wc = ext.levels[0].weights(p1[0], p2[0])
    assert torch.is_tensor(w1) == spatial and torch.is_tensor(w2) == spatial
    assert torch.is_tensor(wc) == channel
    if not (spatial or channel):
        lvl = ext.levels[0]
        torch.testing.assert_close(rep[0], lvl.proj(lvl.fuse(p1[0] - p2[0])))


def test_extractor_gradient_matches_finite_differences():
    torch.manual_seed(0)
    ext = ChangeExtractor((4, 4, 4, 4), 4).double()
    p1, p2 = _pyramids(2)
    leaves = [f.clone().requires_grad_() for f in p1.levels + p2.levels]

    def fn(*fs):
        rep = ext(FeaturePyramid(list(fs[:4])), FeaturePyramid(list(fs[4:])))
        return sum(r.sum() for r in rep.levels)

    assert torch.autograd.gradcheck(fn, tuple(leaves), rtol=1e-4, atol=1e-6)
