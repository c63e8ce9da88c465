import pytest
import torch

from mptp.exceptions import ConfigurationError, ShapeError
from mptp.ppe import MultiHeadSelfAttention, PpeConfig, PriorPromptEncoder, TransformerBlock, ppe_forward
from mptp.text_encoder import TextEncoder

SHAPE_CONFIGS = {
    (4, 32): dict(patch_sizes=(8, 4, 2), embed_dims=(8, 16, 32), num_heads=(2, 2, 4)),
    (8, 64): dict(patch_sizes=(8, 4, 2), embed_dims=(16, 32, 64), num_heads=(2, 2, 4)),
    (64, 224): dict(patch_sizes=(16, 8, 4), embed_dims=(64, 128, 256), num_heads=(2, 4, 8)),
}


def build(c, h, **kw):
    cfg = PpeConfig(base_channels=c, image_size=(h, h), text_len=8, **{**SHAPE_CONFIGS[(c, h)], **kw})
    return cfg, PriorPromptEncoder(cfg), TextEncoder(cfg.embed_dims[0], cfg.text_len)


@pytest.mark.parametrize("c,h", list(SHAPE_CONFIGS))
def test_pyramid_shapes(c, h):
    _, ppe, text = build(c, h)
    ppe.eval()
    with torch.no_grad():
        ys = ppe_forward(ppe, text, torch.rand(2, 3, h, h), ["square in upper left", "disk"])
    assert [tuple(y.shape) for y in ys] == [(2, c, h, h), (2, 2 * c, h // 2, h // 2), (2, 4 * c, h // 4, h // 4)]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        PpeConfig(image_size=(100, 100))
    with pytest.raises(ConfigurationError):
        PpeConfig(image_size=(64, 64), patch_sizes=(8, 8, 8))
    with pytest.raises(ConfigurationError):
        PpeConfig(embed_dims=(64, 128, 250))
    with pytest.raises(ConfigurationError):
        PpeConfig(dropout=1.0)
    assert PpeConfig().token_grid == (14, 14)


def test_runtime_shape_checks(tiny_cfg):
    ppe = PriorPromptEncoder(tiny_cfg)
    text = TextEncoder(8, tiny_cfg.text_len)
    with pytest.raises(ShapeError):
        ppe_forward(ppe, text, torch.rand(2, 3, 64, 64), "x")
    with pytest.raises(ShapeError):
        ppe_forward(ppe, text, torch.rand(2, 3, 32, 32), ["a", "b", "c"])
    with pytest.raises(ConfigurationError):
        ppe(torch.rand(2, 3, 32, 32), torch.randn(2, 5, 8))


def test_attention_rows_sum_to_one():
    msa = MultiHeadSelfAttention(8, 2)
    _, attn = msa(torch.randn(3, 5, 8), return_attention=True)
    assert attn.shape == (3, 2, 5, 5)
    assert torch.allclose(attn.sum(-1), torch.ones(3, 2, 5), atol=1e-6)


def test_block_permutation_equivariant():
    blk = TransformerBlock(8, 2).eval()
    x = torch.randn(2, 6, 8)
    perm = torch.randperm(6)
    with torch.no_grad():
        assert torch.allclose(blk(x)[:, perm], blk(x[:, perm]), atol=1e-5)


def test_block_residual_identity():
    blk = TransformerBlock(8, 2)
    with torch.no_grad():
        for lin in (blk.attn.proj, blk.mlp[3]):
            lin.weight.zero_()
            lin.bias.zero_()
    x = torch.randn(2, 4, 8)
    assert torch.equal(blk(x), x)


def test_every_parameter_gets_gradient(tiny_cfg):
    ppe = PriorPromptEncoder(tiny_cfg)
    text = TextEncoder(8, tiny_cfg.text_len)
    ys = ppe_forward(ppe, text, torch.rand(2, 3, 32, 32), ["square in upper left", "disk in center"])
    sum(y.square().mean() for y in ys).backward()
    for mod in (ppe, text):
        for name, p in mod.named_parameters():
            assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_caption_changes_output(tiny_cfg):
    ppe = PriorPromptEncoder(tiny_cfg).eval()
    text = TextEncoder(8, tiny_cfg.text_len)
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        a = ppe_forward(ppe, text, x, "square in upper left")
        b = ppe_forward(ppe, text, x, "disk in lower right")
    assert not torch.allclose(a[0], b[0])


@pytest.mark.parametrize("flags", [dict(use_downvit=False), dict(use_upvit=False),
                                   dict(use_downvit=False, use_upvit=False)])
def test_ablations_keep_shapes(flags):
    _, ppe, text = build(4, 32, **flags)
    ys = ppe_forward(ppe, text, torch.rand(2, 3, 32, 32), "x")
    assert [y.shape[1] for y in ys] == [4, 8, 16]


def test_param_names_are_stable(tiny_cfg):
    names = set(dict(PriorPromptEncoder(tiny_cfg).named_parameters()))
    for expected in ("image_branch.conv.0.weight", "down1.text_align.weight", "down2.project.conv.weight",
                     "up1.conv.conv.weight", "up3.block.attn.qkv.weight", "fuse3.conv.0.weight"):
        assert expected in names


def test_normalize_input_flag(tiny_cfg):
    from dataclasses import replace
    torch.manual_seed(0)
    plain = PriorPromptEncoder(tiny_cfg).eval()
    normed = PriorPromptEncoder(replace(tiny_cfg, normalize_input=True)).eval()
    normed.load_state_dict(plain.state_dict())  # the statistics are not persisted
    text = TextEncoder(8, tiny_cfg.text_len)
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        assert not torch.allclose(ppe_forward(plain, text, x, "a")[0], ppe_forward(normed, text, x, "a")[0])
