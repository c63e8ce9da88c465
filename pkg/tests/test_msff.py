import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mptp.exceptions import ShapeError
from mptp.msff import MSFF, ChannelMatch, PatchExpanding, PatchMerging, rearrange_expand, slice_concat


def pyramid(c, h, b=2):
    return [torch.randn(b, c, h, h), torch.randn(b, 2 * c, h // 2, h // 2), torch.randn(b, 4 * c, h // 4, h // 4)]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 5))
def test_slice_concat_preserves_multiset(b, h2, w2, c):
    x = torch.randn(b, 2 * h2, 2 * w2, c)
    y = slice_concat(x)
    assert y.shape == (b, h2, w2, 4 * c)
    assert torch.equal(x.flatten().sort().values, y.flatten().sort().values)


def test_slice_offsets_order():
    x = torch.arange(16.0).reshape(1, 4, 4, 1)
    y = slice_concat(x)
    # top-left output cell gathers (0,0), (1,0), (0,1), (1,1)
    assert y[0, 0, 0].tolist() == [0.0, 4.0, 1.0, 5.0]


def test_rearrange_expand_inverts_slice_concat():
    # slice_concat orders (row, col) offsets column-major; rearrange_expand row-major
    x = torch.randn(2, 4, 6, 3)
    s = slice_concat(x)
    reorder = torch.cat([s[..., k * 3:(k + 1) * 3] for k in (0, 2, 1, 3)], dim=-1)
    assert torch.equal(rearrange_expand(reorder), x)


def test_merge_expand_shape_inverses():
    c = 8
    x = torch.randn(2, c, 8, 8)
    merge, expand = PatchMerging(c), PatchExpanding(2 * c)
    assert merge(x).shape == (2, 2 * c, 4, 4)
    assert expand(merge(x)).shape == x.shape
    z = torch.randn(2, 2 * c, 4, 4)
    assert merge(PatchExpanding(2 * c)(z)).shape == z.shape


def test_odd_sizes_rejected():
    with pytest.raises(ShapeError):
        PatchMerging(4)(torch.randn(1, 4, 5, 4))
    with pytest.raises(ShapeError):
        PatchExpanding(3)
    with pytest.raises(ShapeError):
        PatchMerging(4)(torch.randn(1, 3, 4, 4))


@pytest.mark.parametrize("c,h", [(4, 32), (8, 64), (64, 224)])
def test_group_and_fused_shapes(c, h):
    m = MSFF(c)
    with torch.no_grad():
        groups = m.build_groups(pyramid(c, h, b=1))
        for g, (ch, s) in zip(groups, [(c, h), (2 * c, h // 2), (4 * c, h // 4)]):
            assert [tuple(t.shape) for t in g] == [(1, c, h, h), (1, 2 * c, h // 2, h // 2),
                                                   (1, 4 * c, h // 4, h // 4)]
        fused = m.fuse_groups(groups)
    assert [tuple(t.shape) for t in fused] == [(1, 3 * c, h, h), (1, 6 * c, h // 2, h // 2),
                                               (1, 12 * c, h // 4, h // 4)]


def test_groups_contain_identity_members():
    c, h = 4, 16
    pyr = pyramid(c, h)
    g = MSFF(c).build_groups(pyr)
    assert g[0][0] is pyr[0] and g[1][1] is pyr[1] and g[2][2] is pyr[2]


def test_bad_pyramid_rejected():
    pyr = pyramid(4, 16)
    pyr[1] = torch.randn(2, 8, 4, 4)
    with pytest.raises(ShapeError):
        MSFF(4)(pyr)


def test_channel_match_shapes():
    out = ChannelMatch(4)(pyramid(4, 16))
    assert [t.shape[1] for t in out] == [12, 24, 48]


def test_gradients_reach_every_block():
    m = MSFF(4)
    sum(t.sum() for t in m(pyramid(4, 16))).backward()
    for name, p in m.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name
