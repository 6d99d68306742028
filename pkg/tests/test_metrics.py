import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from lcdnet.metrics import (ConfusionCounts, accumulate, binarize_label, compute_metrics, iou_from_f1,
                            metrics_csv, render_confusion_map, save_confusion_png)


def test_accumulate_examples():
    ones, zeros = np.ones((4, 5), np.uint8), np.zeros((4, 5), np.uint8)
    assert accumulate(ones, ones) == ConfusionCounts(tp=20)
    assert accumulate(ones, zeros) == ConfusionCounts(fp=20)
    assert accumulate([1, 1, 0, 0], [1, 0, 1, 0]) == ConfusionCounts(1, 1, 1, 1)


def test_accumulate_errors():
    with pytest.raises(ValueError):
        accumulate([0, 2], [0, 1])
    with pytest.raises(ValueError):
        accumulate([0, 1], [0, 1, 1])
    with pytest.raises(ValueError):
        ConfusionCounts(tp=-1)


def test_metric_examples():
    m = compute_metrics(ConfusionCounts(tp=50, fp=10, tn=30, fn=10))
    assert m.pc == pytest.approx(0.833333, abs=1e-6)
    assert m.rc == pytest.approx(0.833333, abs=1e-6)
    assert m.f1 == pytest.approx(0.833333, abs=1e-6)
    assert m.iou == pytest.approx(0.714286, abs=1e-6)
    assert m.oa == pytest.approx(0.80)
    perfect = compute_metrics(ConfusionCounts(tp=30, tn=70))
    assert (perfect.pc, perfect.rc, perfect.f1, perfect.iou, perfect.oa, perfect.kappa_standard) == (1, 1, 1, 1, 1, 1)
    assert perfect.kappa_literal == 0.0


def test_undefined_metrics():
    m = compute_metrics(ConfusionCounts(tn=10))
    assert m.pc is None and m.rc is None and m.f1 is None and m.iou is None
    assert set(m.undefined) >= {"pc", "rc", "f1", "iou"}
    assert m.oa == 1.0
    with pytest.raises(ValueError):
        compute_metrics(ConfusionCounts())
    assert "undefined" in metrics_csv([("syn", "test", m)])


def test_cohen_kappa_matches_direct_formula():
    tp, fp, tn, fn = 40, 5, 45, 10
    n = 100
    po = (tp + tn) / n
    pe = ((tp + fp) / n) * ((tp + fn) / n) + ((tn + fn) / n) * ((tn + fp) / n)
    m = compute_metrics(ConfusionCounts(tp, fp, tn, fn))
    assert m.kappa_standard == pytest.approx((po - pe) / (1 - pe), abs=1e-12)


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_iou_f1_identity(tp, fp, tn, fn):
    if tp + fp + tn + fn == 0:
        return
    m = compute_metrics(ConfusionCounts(tp, fp, tn, fn))
    if m.f1 is not None:
        assert abs(m.iou - m.f1 / (2 - m.f1)) < 1e-9
        if m.pc + m.rc > 0:
            assert abs(m.f1 - 2 * m.pc * m.rc / (m.pc + m.rc)) < 1e-12


@pytest.mark.parametrize("f1,iou", [(0.9148, 0.8430), (0.8122, 0.6838), (0.5929, 0.4214)])
def test_printed_pairs(f1, iou):
    assert round(iou_from_f1(f1), 4) == iou


def test_additivity(rng):
    pred = (rng.random((2, 30, 40)) < 0.4).astype(np.uint8)
    lab = (rng.random((2, 30, 40)) < 0.3).astype(np.uint8)
    parts = [accumulate(pred[:, :10], lab[:, :10]), accumulate(pred[:, 10:], lab[:, 10:])]
    assert ConfusionCounts.merge(parts) == accumulate(pred, lab)


def test_render_histogram(rng, tmp_path):
    pred = (rng.random((20, 30)) < 0.5).astype(np.uint8)
    lab = (rng.random((20, 30)) < 0.5).astype(np.uint8)
    img = render_confusion_map(pred, lab)
    c = accumulate(pred, lab)
    colors, counts = np.unique(img.reshape(-1, 3), axis=0, return_counts=True)
    hist = {tuple(int(v) for v in col): int(n) for col, n in zip(colors, counts)}
    assert hist == {(255, 255, 255): c.tp, (255, 0, 0): c.fp, (0, 0, 0): c.tn, (0, 255, 255): c.fn}
    small = render_confusion_map([[1, 1], [0, 0]], [[1, 0], [1, 0]])
    assert small.tolist() == [[[255, 255, 255], [255, 0, 0]], [[0, 255, 255], [0, 0, 0]]]
    assert np.all(render_confusion_map(np.ones((3, 3)), np.ones((3, 3))) == 255)
    save_confusion_png(pred, lab, tmp_path / "c.png")
    assert np.array_equal(np.asarray(Image.open(tmp_path / "c.png")), img)


def test_binarize_label():
    assert binarize_label(np.array([0, 127, 128, 255])).tolist() == [0, 0, 1, 1]


def test_csv_format():
    m = compute_metrics(ConfusionCounts(tp=50, fp=10, tn=30, fn=10))
    text = metrics_csv([("syn", "test", m)])
    assert text.splitlines()[0] == "dataset,split,pc,rc,f1,oa,kappa,iou"
    assert text.splitlines()[1].startswith("syn,test,0.833333,0.833333,0.833333,0.800000,")
