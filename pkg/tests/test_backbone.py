import os

import numpy as np
import pytest

from lcdnet.backbone import (EncoderConfig, InvertedResidual, build_encoder, load_pretrained,
                             maybe_load_pretrained, normalize_images, save_encoder)
from lcdnet.core import ShapeError, Tensor, backward, ops
from lcdnet.core.archive import ArchiveError
from lcdnet.gradsuite import TINY_ENCODER
from lcdnet.nn import Conv2d
from lcdnet.profiler import ComplexityReport


def test_stage_channels_and_param_closed_form():
    enc = build_encoder()
    assert enc.channels == (16, 24, 32, 96, 320)
    rep = ComplexityReport()
    enc.profile(rep, "encoder", (1, 3, 64, 64))
    assert rep.total_params == enc.num_parameters()


def test_no_classifier_head():
    names = [n for n, _ in build_encoder().named_parameters()]
    assert not any("classifier" in n or "fc" in n for n in names)
    # the 1280-channel head conv of the classification net is gone too
    assert all(p.shape[0] != 1280 for p in build_encoder().parameters())


@pytest.mark.parametrize("hw,sizes", [(256, (128, 64, 32, 16, 8)), (64, (32, 16, 8, 4, 2))])
def test_stage_halving(hw, sizes):
    rep = ComplexityReport()
    shapes = build_encoder().profile(rep, "e", (1, 3, hw, hw))
    assert tuple(s[2] for s in shapes) == sizes
    if hw == 64:
        feats = build_encoder().eval()(Tensor(np.zeros((1, 3, 64, 64), np.float32)))
        assert tuple(f.shape[2] for f in feats) == sizes
        assert tuple(f.shape[1] for f in feats) == (16, 24, 32, 96, 320)


def test_rejects_indivisible_input():
    with pytest.raises(ShapeError):
        build_encoder()(Tensor(np.zeros((1, 3, 48, 64), np.float32)))


@pytest.mark.parametrize("bad", [0, -1])
def test_invalid_width_table(bad):
    with pytest.raises(ValueError):
        EncoderConfig(stages=(((1, bad, 1, 1),),) + EncoderConfig().stages[1:])
    with pytest.raises(ValueError):
        EncoderConfig(stem_channels=bad)


def test_skip_flag():
    r = np.random.default_rng(0)
    assert InvertedResidual(8, 8, 1, 6, r).use_skip
    assert not InvertedResidual(8, 8, 2, 6, r).use_skip
    assert not InvertedResidual(8, 16, 1, 6, r).use_skip
    assert InvertedResidual(8, 8, 1, 6, r).project.act is None


def test_kaiming_variance():
    ratios = []
    for seed in range(10):
        enc = build_encoder(seed=seed)
        for _, m in enc.named_modules():
            if isinstance(m, Conv2d) and m.weight.size >= 200:
                k = m.spec.kernel
                fan_in = m.spec.in_channels // m.spec.groups * k[0] * k[1]
                ratios.append(m.weight.data.var() / (2.0 / fan_in))
    assert 0.8 < np.mean(ratios) < 1.2
    assert all(0.8 < r < 1.2 for r in ratios if r)


def test_determinism():
    enc = build_encoder(TINY_ENCODER).eval()
    x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype(np.float32))
    a = [f.data.tobytes() for f in enc(x)]
    b = [f.data.tobytes() for f in enc(x)]
    assert a == b


def test_pretrained_round_trip(tmp_path):
    src = build_encoder(TINY_ENCODER, seed=3)
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 32, 32)).astype(np.float32))
    path = tmp_path / "enc.lcdn"
    save_encoder(src, path)
    dst = load_pretrained(build_encoder(TINY_ENCODER, seed=9), path)
    for a, b in zip(src.eval()(x), dst.eval()(x)):
        assert a.data.tobytes() == b.data.tobytes()


def test_pretrained_wrong_shape_names_tensor(tmp_path):
    from lcdnet.core import archive

    state = dict(build_encoder(TINY_ENCODER).state_dict())
    state["stages.1.layers.0.project.conv.weight"] = np.zeros((1, 1, 1, 1), np.float32)
    archive.save(tmp_path / "bad.lcdn", state)
    with pytest.raises(ValueError, match="stages.1.layers.0.project.conv.weight"):
        load_pretrained(build_encoder(TINY_ENCODER), tmp_path / "bad.lcdn")
    (tmp_path / "junk.lcdn").write_bytes(b"nonsense")
    with pytest.raises(ArchiveError):
        load_pretrained(build_encoder(TINY_ENCODER), tmp_path / "junk.lcdn")


def test_missing_pretrained_path():
    enc = build_encoder(TINY_ENCODER)
    assert maybe_load_pretrained(enc, None) is enc
    with pytest.raises(FileNotFoundError):
        maybe_load_pretrained(enc, os.path.join("nowhere", "w.lcdn"))


def test_shared_weight_gradient_is_sum_of_streams():
    enc = build_encoder(TINY_ENCODER, seed=2).to(np.float64).eval()
    rng = np.random.default_rng(0)
    t1, t2 = rng.standard_normal((1, 3, 32, 32)), rng.standard_normal((1, 3, 32, 32))
    w = enc.stages[2].layers[0].depthwise.conv.weight

    def grad_of(x):
        enc.zero_grad()
        backward(ops.sum(ops.square(enc(Tensor(x))[4])))
        return w.grad.copy()

    joint = grad_of(np.concatenate([t1, t2]))
    np.testing.assert_allclose(joint, grad_of(t1) + grad_of(t2), rtol=1e-10, atol=1e-12)


def test_normalize_images():
    img = np.array([[[[0, 255, 128]]]], dtype=np.uint8)
    out = normalize_images(img)
    assert out.shape == (1, 3, 1, 1) and out.dtype == np.float32
    np.testing.assert_allclose(out.ravel(), [-1.0, 1.0, 128 / 127.5 - 1], atol=1e-6)
