import numpy as np
import pytest

from lcdnet.core import Tensor
from lcdnet.core.ops import ShapeError
from lcdnet.ffm import FFM, DiffFusion


def identity_ffm(literal=False):
    m = FFM(1, 1, np.random.default_rng(0), literal=literal).to(np.float64)
    for conv in (m.conv1, m.conv2):
        conv.weight.data[...] = 1.0
        conv.bias.data[...] = 0.0
    return m


def scalar(v):
    return Tensor(np.full((1, 1, 1, 1), float(v)))


@pytest.mark.parametrize("x1,x2,expected", [(2, 3, 18.0), (-1, 3, 0.0)])
def test_hand_examples(x1, x2, expected):
    assert identity_ffm()(scalar(x1), scalar(x2)).item() == pytest.approx(expected, abs=1e-6)


def test_zero_second_input_annihilates(rng):
    m = FFM(4, 4, rng).to(np.float64)
    out = m(Tensor(rng.standard_normal((2, 4, 3, 3))), Tensor(np.zeros((2, 4, 3, 3))))
    assert np.all(out.data == 0)


def test_nonnegative_and_shape(rng):
    m = FFM(5, 5, rng)
    m.conv1.bias.data[...] = rng.standard_normal(5)
    out = m(Tensor(rng.standard_normal((2, 5, 4, 3)).astype(np.float32)),
            Tensor(rng.standard_normal((2, 5, 4, 3)).astype(np.float32)))
    assert out.shape == (2, 5, 4, 3) and np.all(out.data >= 0)


def test_literal_variant():
    # relu(2) * conv1(3) = 6; + 3 = 9; * 2 = 18
    assert identity_ffm(literal=True)(scalar(2), scalar(3)).item() == pytest.approx(18.0)
    assert identity_ffm(literal=True)(scalar(-1), scalar(3)).item() == 0.0


def test_errors(rng):
    m = FFM(4, 4, rng)
    with pytest.raises(ShapeError):
        m(Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros((1, 4, 2, 3))))
    with pytest.raises(ShapeError):
        m(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((1, 3, 2, 2))))


def test_diff_fusion():
    out = DiffFusion()(Tensor(np.array([[[[1.0, -2.0]]]])), Tensor(np.array([[[[3.0, 1.0]]]])))
    assert out.data.ravel().tolist() == [2.0, 3.0]
    assert DiffFusion().num_parameters() == 0
