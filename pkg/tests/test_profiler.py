import dataclasses

import numpy as np
import pytest

from lcdnet.core import ConvSpec
from lcdnet.gradsuite import TINY_MODEL
from lcdnet.model import LcdNet, ModelConfig
from lcdnet.nn import Conv2d
from lcdnet.profiler import (ComplexityReport, count_macs, count_params, emit_report,
                             enumerate_trainable, read_csv, to_csv, to_text)


def conv_report(spec, hw):
    rep = ComplexityReport()
    Conv2d(spec, np.random.default_rng(0)).profile(rep, "c", (1, spec.in_channels) + hw)
    return rep


def test_closed_form_examples():
    rep = conv_report(ConvSpec(16, 8, 1, has_bias=True), (8, 8))
    assert rep.total_params == 136 and rep.total_macs == 8192
    assert conv_report(ConvSpec(32, 32, 3, padding=1, groups=32), (4, 4)).total_params == 288


@pytest.mark.parametrize("cfg", [ModelConfig(), TINY_MODEL, ModelConfig(use_ffm=False, use_gmm=False),
                                 ModelConfig(ffm_literal=True)])
def test_enumeration_cross_check(cfg):
    model = LcdNet(cfg)
    assert count_params(model).total_params == enumerate_trainable(model) == model.num_parameters()


def test_every_layer_once():
    model = LcdNet(TINY_MODEL)
    rep = count_params(model)
    names = [r.layer for r in rep.rows]
    assert len(names) == len(set(names))
    owners = {n.rsplit(".", 1)[0] for n, _ in model.named_parameters()}
    assert owners == {r.layer for r in rep.rows if r.params}


def test_tif_is_free():
    rep = count_macs(LcdNet(TINY_MODEL), (64, 64))
    tif = [r for r in rep.rows if r.layer.startswith("tif.")]
    assert len(tif) == 3 and all(r.params == 0 and r.macs == 0 for r in tif)


def test_gmm_params():
    rep = count_params(LcdNet(TINY_MODEL))
    gmm = [r for r in rep.rows if r.layer.endswith(".gmm")]
    assert [r.params for r in gmm] == [3 * 8] * 5


def test_half_resolution_quarter_conv_macs():
    model = LcdNet(TINY_MODEL)
    full, half = count_macs(model, (128, 128)), count_macs(model, (64, 64))
    for a, b in zip(full.rows, half.rows):
        assert a.layer == b.layer
        if a.layer.endswith(("conv", "conv1", "conv2", "spatial", "head0", "head1")):
            assert a.macs == 4 * b.macs
    # only the per-channel gate terms do not scale with area
    assert full.total_macs - 4 * half.total_macs == -3 * sum(5 * 8 for _ in range(5))


def test_monotone_in_width():
    base = count_macs(LcdNet(TINY_MODEL), (64, 64))
    wider = count_macs(LcdNet(dataclasses.replace(TINY_MODEL, decoder_widths=(8, 8, 16, 8, 8))), (64, 64))
    assert wider.total_params > base.total_params and wider.total_macs > base.total_macs


def test_csv_round_trip(tmp_path):
    rep = count_macs(LcdNet(TINY_MODEL), (64, 64))
    emit_report(rep, tmp_path / "r.csv", "csv")
    rows = read_csv(tmp_path / "r.csv")
    assert sum(r.params for r in rows) == rep.total_params
    assert sum(r.macs for r in rows) == rep.total_macs
    assert to_csv(ComplexityReport()) == "layer,out_n,out_c,out_h,out_w,params,macs\n"


def test_text_totals():
    rep = count_macs(LcdNet(TINY_MODEL), (64, 64))
    lines = to_text(rep).splitlines()
    body = [ln.split() for ln in lines[2:-2]]
    total = lines[-1].split()
    assert sum(int(r[-2]) for r in body) == int(total[-2]) == rep.total_params
    assert sum(int(r[-1]) for r in body) == int(total[-1]) == rep.total_macs


def test_both_conventions():
    rep = count_macs(LcdNet(TINY_MODEL), (64, 64))
    assert rep.flops_2mac == 2 * rep.flops_mac
    s = rep.summary()
    assert s["closer_convention"] in ("FLOPs=MACs", "FLOPs=2*MACs")
    with pytest.raises(ValueError):
        emit_report(rep, "unused", "xml")
