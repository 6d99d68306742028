import dataclasses

import numpy as np
import pytest

from lcdnet.core import Tensor
from lcdnet.core.ops import ShapeError
from lcdnet.gradsuite import TINY_MODEL
from lcdnet.model import (LcdNet, ModelConfig, load_checkpoint, logits_to_mask, predict,
                          save_checkpoint)


def tiny(**kw):
    return LcdNet(dataclasses.replace(TINY_MODEL, **kw))


def images(rng, n=2, hw=32):
    return rng.standard_normal((n, 3, hw, hw)).astype(np.float32)


def test_default_shapes():
    model = LcdNet().eval()
    x = np.zeros((2, 3, 64, 64), np.float32)
    a, b = model(x, x)
    assert a.shape == b.shape == (2, 1, 64, 64)


def test_symmetric_inputs_give_identical_streams(rng):
    model = tiny()
    x = Tensor(images(rng))
    p1, p2 = model.encode_pair(x, x)
    for a, b in zip(p1, p2):
        assert a.data.tobytes() == b.data.tobytes()


def test_batch_permutation_in_eval(rng):
    model = tiny(seed=4)
    for lvl in model.decoder.levels:
        lvl.gmm.gamma.data[...] = 1.0
    model.eval()
    t1, t2 = images(rng, 4), images(rng, 4)
    perm = np.array([2, 0, 3, 1])
    a = model(t1, t2)[0].data
    b = model(t1[perm], t2[perm])[0].data
    np.testing.assert_allclose(b, a[perm], rtol=1e-5, atol=1e-6)


def test_siamese_sharing(rng):
    model = tiny().eval()
    t1, t2 = Tensor(images(rng)), Tensor(images(rng))
    before = model.encode_pair(t1, t2)
    model.encoder.stages[0].layers[0].conv.weight.data *= 1.5
    after = model.encode_pair(t1, t2)
    assert not np.array_equal(before[0][0].data, after[0][0].data)
    assert not np.array_equal(before[1][0].data, after[1][0].data)


def test_ablation_parameter_counts():
    full = tiny().num_parameters()
    no_gmm = tiny(use_gmm=False).num_parameters()
    bare = tiny(use_gmm=False, use_ffm=False, use_tif=False).num_parameters()
    assert full > no_gmm > bare
    assert tiny(use_tif=False).num_parameters() == full


def test_shape_errors(rng):
    model = tiny()
    with pytest.raises(ShapeError):
        model(images(rng, hw=32), images(rng, hw=64))
    with pytest.raises(ShapeError):
        model(images(rng, hw=40), images(rng, hw=40))


def test_thresholds():
    z = np.array([-3.0, 0.0, 1e-12, 3.0])
    assert logits_to_mask(z, 0.5).tolist() == [0, 0, 1, 1]
    assert logits_to_mask(z, 0.0).tolist() == [1, 1, 1, 1]
    assert logits_to_mask(z, 1.0).tolist() == [0, 0, 0, 0]
    with pytest.raises(ValueError):
        logits_to_mask(z, 1.5)


def test_predict_zero_heads(rng):
    model = tiny()
    for head in (model.decoder.head0, model.decoder.head1):
        head.weight.data[...] = 0
        head.bias.data[...] = 0
    t1, t2 = images(rng), images(rng)
    assert not predict(model, t1, t2).any()
    assert predict(model, t1, t2, 0.0).all()
    mask = predict(tiny(seed=3), t1, t2)
    assert mask.shape == (2, 1, 32, 32) and set(np.unique(mask)) <= {0, 1}
    assert model.training


def test_checkpoint_round_trip(tmp_path, rng):
    model = tiny(seed=7, gmm_norm="mean_squared")
    model(images(rng), images(rng))  # move the running statistics off their init
    path = tmp_path / "m.lcdn"
    save_checkpoint(model, path, epoch=3, best_iou=0.5)
    back, meta = load_checkpoint(path)
    assert back.config == model.config and meta["epoch"] == "3"
    t1, t2 = images(rng), images(rng)
    a = model.eval()(t1, t2)
    b = back.eval()(t1, t2)
    for x, y in zip(a, b):
        assert x.data.tobytes() == y.data.tobytes()


def test_config_json_round_trip():
    cfg = ModelConfig(use_tif=False, exchange_fraction=0.25, decoder_widths=(32, 16, 16, 8, 8))
    assert ModelConfig.from_json(cfg.to_json()) == cfg
    assert cfg.hash() != ModelConfig().hash()
    with pytest.raises(ValueError):
        ModelConfig(exchange_fraction=2.0)
