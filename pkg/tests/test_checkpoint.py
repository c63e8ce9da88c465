import json
import zipfile

import numpy as np
import pytest
import torch

from mptp import checkpoint as ckpt
from mptp.exceptions import CheckpointError
from mptp.network import INHERITED_PREFIXES, SegmentationNet
from mptp.pretrain import SiameseNet


def bundle_for(model, stage=1, step=3):
    opt = torch.optim.SGD(model.parameters(), lr=0.1, momentum=0.9)
    model(torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32), ["a", "b"])["loss"].backward()
    opt.step()
    return ckpt.CheckpointBundle(stage, ckpt.model_state(model), ckpt.optimizer_state(opt, model),
                                 ckpt.rng_state(), {"step": step}), opt


def test_roundtrip_is_byte_identical(tmp_path, tiny_cfg):
    b, _ = bundle_for(SiameseNet(tiny_cfg, 16))
    p1 = ckpt.save_bundle(b, tmp_path / "a.ckpt")
    loaded = ckpt.load_bundle(p1)
    p2 = ckpt.save_bundle(loaded, tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.step == 3 and loaded.stage == 1
    for k, v in b.params.items():
        assert loaded.params[k].shape == v.shape and np.array_equal(loaded.params[k], v)


def test_load_into_exact_and_optimizer(tmp_path, tiny_cfg):
    m1 = SiameseNet(tiny_cfg, 16)
    b, opt1 = bundle_for(m1)
    m2 = SiameseNet(tiny_cfg, 16)
    report = ckpt.load_into(m2, ckpt.load_bundle(ckpt.save_bundle(b, tmp_path / "x.ckpt")))
    assert not report.initialized and not report.skipped
    for (n, a), (_, c) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, c), n
    opt2 = torch.optim.SGD(m2.parameters(), lr=0.1, momentum=0.9)
    ckpt.restore_optimizer(opt2, m2, b.optimizer)
    names = dict(m2.named_parameters())
    for n, p in m1.named_parameters():
        assert torch.equal(opt1.state[p]["momentum_buffer"], opt2.state[names[n]]["momentum_buffer"])


def test_stage2_inherits_exactly_encoder_names(tiny_cfg):
    b, _ = bundle_for(SiameseNet(tiny_cfg, 16))
    seg = SegmentationNet(tiny_cfg)
    report = ckpt.load_into(seg, b, INHERITED_PREFIXES)
    expected = {n for n in seg.state_dict() if n.startswith(INHERITED_PREFIXES)}
    assert set(report.restored) == expected
    assert all(n.startswith(("msff.", "upattention.")) for n in report.initialized)
    assert all(n.startswith(("projector.", "predictor.")) for n in report.skipped)
    assert "restored" in report.summary()


def test_mismatch_lists_names(tiny_cfg):
    b, _ = bundle_for(SiameseNet(tiny_cfg, 16))
    b.params["ppe.bogus.weight"] = np.zeros(2, np.float32)
    del b.params["ppe.fuse1.conv.0.bias"]
    b.params["ppe.fuse2.conv.0.weight"] = np.zeros((1, 1), np.float32)
    with pytest.raises(CheckpointError) as exc:
        ckpt.load_into(SegmentationNet(tiny_cfg), b, INHERITED_PREFIXES)
    msg = str(exc.value)
    assert "ppe.bogus.weight" in msg and "ppe.fuse1.conv.0.bias" in msg and "ppe.fuse2.conv.0.weight" in msg


def test_bad_files(tmp_path):
    with pytest.raises(CheckpointError):
        ckpt.load_bundle(tmp_path / "missing.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    with pytest.raises(CheckpointError):
        ckpt.load_bundle(tmp_path / "junk.ckpt")
    with zipfile.ZipFile(tmp_path / "v.ckpt", "w") as zf:
        zf.writestr("metadata.json", json.dumps({"format_version": 99, "stage": 1}))
    with pytest.raises(CheckpointError, match="format_version"):
        ckpt.load_bundle(tmp_path / "v.ckpt")


def test_rng_roundtrip():
    state = ckpt.rng_state()
    a = torch.rand(3)
    ckpt.restore_rng(state)
    assert torch.equal(a, torch.rand(3))


def test_scalar_buffers_keep_shape(tmp_path, tiny_cfg):
    b, _ = bundle_for(SiameseNet(tiny_cfg, 16))
    loaded = ckpt.load_bundle(ckpt.save_bundle(b, tmp_path / "s.ckpt"))
    key = next(k for k in loaded.params if k.endswith("num_batches_tracked"))
    assert loaded.params[key].shape == ()
