"""Finite-difference suite covering every differentiable op and the composite
blocks. Each case builds a fresh float64 problem from a generator and
returns ``(f, x, wrt)`` for :func:`finite_diff_check`.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .backbone import EncoderConfig, InvertedResidual
from .core import ConvSpec, Tensor, finite_diff_check, ops
from .decoder import DecoderLevel
from .ffm import FFM, DiffFusion
from .gmm import GMM
from .model import LcdNet, ModelConfig

F64 = np.float64

TINY_ENCODER = EncoderConfig(
    stem_channels=8,
    stages=(((1, 8, 1, 1),), ((2, 8, 1, 2),), ((2, 8, 1, 2),), ((2, 16, 1, 2),), ((2, 16, 1, 2),)),
)
TINY_MODEL = ModelConfig(encoder=TINY_ENCODER, decoder_widths=(8, 8, 8, 8, 8))


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=F64), requires_grad=True)


def _away_from(x: np.ndarray, kinks: Sequence[float], gap: float = 1e-3) -> np.ndarray:
    """Push values out of a small window around non-differentiable points."""
    x = x.copy()
    for k in kinks:
        near = np.abs(x - k) < gap
        x[near] = k + np.where(x[near] >= k, gap, -gap)
    return x


# the functional weights must stay fixed across the perturbed evaluations
def _fixed_weigh(rng):
    cache = {}

    def weigh(out: Tensor) -> Tensor:
        key = out.shape
        if key not in cache:
            cache[key] = rng.standard_normal(out.shape)
        return ops.sum(out * cache[key])
    return weigh


def _unary_case(op, sample):
    def build(rng):
        w = _fixed_weigh(rng)
        x = _t(sample(rng))
        return (lambda v: w(op(v))), x, []
    return build


def _binary_case(op, sample_a, sample_b):
    def build(rng):
        w = _fixed_weigh(rng)
        a, b = _t(sample_a(rng)), _t(sample_b(rng))
        return (lambda v: w(op(v, b))), a, [b]
    return build


SHAPE = (2, 3, 4, 5)


def _normal(shape=SHAPE, scale=1.0):
    return lambda rng: rng.standard_normal(shape) * scale


def _positive(shape=SHAPE):
    return lambda rng: rng.uniform(0.5, 2.0, shape)


def _nonzero(shape):
    return lambda rng: rng.uniform(0.5, 2.0, shape) * rng.choice([-1.0, 1.0], shape)


def _conv_case(spec: ConvSpec, hw=(6, 7), n=2):
    def build(rng):
        w = _fixed_weigh(rng)
        x = _t(rng.standard_normal((n, spec.in_channels) + hw))
        weight = _t(rng.standard_normal(spec.weight_shape) * 0.5)
        bias = _t(rng.standard_normal(spec.out_channels)) if spec.has_bias else None
        wrt = [weight] + ([bias] if bias is not None else [])
        return (lambda v: w(ops.conv2d(v, weight, bias, spec))), x, wrt
    return build


def _bn_case(training: bool, act: Optional[str]):
    def build(rng):
        w = _fixed_weigh(rng)
        C = 3
        x = _t(rng.standard_normal((4, C, 3, 3)) * 2 + 0.5)
        gamma = _t(rng.uniform(0.5, 1.5, C))
        beta = _t(rng.standard_normal(C))
        rm, rv = rng.standard_normal(C), rng.uniform(0.5, 2.0, C)

        def f(v):
            # copies keep the running buffers identical across evaluations
            out = ops.batchnorm2d(v, gamma, beta, rm.copy(), rv.copy(), training, act=act)
            return w(out)
        return f, x, [gamma, beta]
    return build


def _split_case(rng):
    w = _fixed_weigh(rng)
    x = _t(rng.standard_normal((4, 3, 2, 2)))

    def f(v):
        a, b = ops.split(v, 2, axis=0)
        return w(a) + w(ops.mul(b, 2.0))
    return f, x, []


def _exchange_case(rng):
    w = _fixed_weigh(rng)
    x1, x2 = _t(rng.standard_normal((2, 5, 3, 3))), _t(rng.standard_normal((2, 5, 3, 3)))
    mask = rng.random(5) < 0.5

    def f(v):
        a, b = ops.channel_exchange(v, x2, mask)
        return w(a) + w(ops.mul(b, 3.0))
    return f, x1, [x2]


def _bce_case(rng):
    z = _t(rng.standard_normal((2, 1, 4, 4)) * 3)
    y = (rng.random((2, 1, 4, 4)) < 0.5).astype(F64)
    return (lambda v: ops.bce_with_logits(v, y)), z, []


def _module_case(make, in_shapes, randomize=None, two_inputs=False):
    def build(rng):
        w = _fixed_weigh(rng)
        m = make(np.random.default_rng(int(rng.integers(1 << 31)))).to(F64)
        if randomize is not None:
            randomize(m, rng)
        xs = [_t(rng.standard_normal(s)) for s in in_shapes]
        params = m.parameters()
        if two_inputs:
            return (lambda v: w(m(v, xs[1]))), xs[0], [xs[1]] + params
        return (lambda v: w(m(v))), xs[0], params
    return build


def _random_gmm(m, rng):
    gmm = m if isinstance(m, GMM) else m.gmm
    gmm.alpha.data = rng.uniform(0.5, 1.5, gmm.channels)
    gmm.gamma.data = rng.standard_normal(gmm.channels)
    gmm.beta.data = rng.standard_normal(gmm.channels) * 0.5


def _tiny_model_case(rng):
    w = _fixed_weigh(rng)
    model = LcdNet(dataclasses.replace(TINY_MODEL, seed=int(rng.integers(1 << 31))))
    model.to(F64)
    for lvl in model.decoder.levels:
        _random_gmm(lvl, rng)
    t1 = _t(rng.standard_normal((2, 3, 32, 32)))
    t2 = Tensor(rng.standard_normal((2, 3, 32, 32)), requires_grad=True)

    def f(v):
        a, b = model(v, t2)
        return w(a) + w(b)
    wrt = [t2] + [p for name, p in model.named_parameters()
                  if name.endswith(("head0.weight", "head1.bias", "levels.2.spatial.weight"))
                  or name.startswith("encoder.stages.0.layers.0.conv")
                  or name.startswith("fusion.3")]
    return f, t1, wrt


@dataclass(frozen=True)
class Case:
    name: str
    build: Callable
    max_elements: Optional[int] = None
    # deep ReLU stacks leave some pre-activations within 1e-6 of a kink, so the
    # composite case probes with a smaller step
    step: Optional[float] = None


CASES: List[Case] = [
    Case("add", _binary_case(ops.add, _normal(), _normal((1, 3, 1, 1)))),
    Case("sub", _binary_case(ops.sub, _normal(), _normal((1, 3, 1, 5)))),
    Case("mul", _binary_case(ops.mul, _normal(), _normal((2, 1, 4, 1)))),
    Case("div", _binary_case(ops.div, _normal(), _nonzero((1, 3, 1, 1)))),
    Case("neg", _unary_case(ops.neg, _normal())),
    Case("square", _unary_case(ops.square, _normal())),
    Case("sqrt", _unary_case(ops.sqrt, _positive())),
    Case("abs", _unary_case(ops.abs, lambda r: _away_from(r.standard_normal(SHAPE), [0.0]))),
    Case("relu", _unary_case(ops.relu, lambda r: _away_from(r.standard_normal(SHAPE), [0.0]))),
    Case("relu6", _unary_case(ops.relu6, lambda r: _away_from(r.normal(3, 4, SHAPE), [0.0, 6.0]))),
    Case("tanh", _unary_case(ops.tanh, _normal(scale=2.0))),
    Case("sigmoid", _unary_case(ops.sigmoid, _normal(scale=3.0))),
    Case("sum", _unary_case(lambda v: ops.sum(v, axis=(1, 3), keepdims=True), _normal())),
    Case("mean", _unary_case(lambda v: ops.mean(v, axis=2), _normal())),
    Case("reshape", _unary_case(lambda v: ops.reshape(v, (6, 20)), _normal())),
    Case("concat", _binary_case(lambda a, b: ops.concat([a, b], axis=1), _normal(), _normal((2, 2, 4, 5)))),
    Case("split", _split_case),
    Case("channel_exchange", _exchange_case),
    Case("conv2d_1x1", _conv_case(ConvSpec(4, 5, 1))),
    Case("conv2d_3x3_bias", _conv_case(ConvSpec(3, 4, 3, padding=1, has_bias=True))),
    Case("conv2d_3x3_stride2", _conv_case(ConvSpec(3, 4, 3, stride=2, padding=1))),
    Case("conv2d_grouped", _conv_case(ConvSpec(4, 6, 3, padding=1, groups=2))),
    Case("depthwise_stride1", _conv_case(ConvSpec(4, 4, 3, padding=1, groups=4, has_bias=True))),
    Case("depthwise_stride2", _conv_case(ConvSpec(4, 4, 3, stride=2, padding=1, groups=4))),
    Case("batchnorm2d_train", _bn_case(True, None)),
    Case("batchnorm2d_train_relu", _bn_case(True, "relu")),
    Case("batchnorm2d_train_relu6", _bn_case(True, "relu6")),
    Case("batchnorm2d_eval", _bn_case(False, None)),
    Case("upsample_bilinear_x2", _unary_case(ops.upsample_bilinear_x2, _normal((2, 2, 3, 4)))),
    Case("l2_norm_spatial", _unary_case(lambda v: ops.l2_norm_spatial(v, 1e-5), _normal())),
    Case("bce_with_logits", _bce_case),
    Case("FFM", _module_case(lambda r: FFM(4, 4, r), [(2, 4, 3, 3), (2, 4, 3, 3)], two_inputs=True)),
    Case("FFM_literal", _module_case(lambda r: FFM(4, 4, r, literal=True), [(2, 4, 3, 3), (2, 4, 3, 3)],
                                     two_inputs=True)),
    Case("DiffFusion", _module_case(lambda r: DiffFusion(), [(2, 4, 3, 3), (2, 4, 3, 3)], two_inputs=True)),
    Case("GMM", _module_case(lambda r: GMM(5), [(2, 5, 3, 3)], randomize=_random_gmm)),
    Case("GMM_mean_squared", _module_case(lambda r: GMM(5, norm="mean_squared"), [(2, 5, 3, 3)],
                                          randomize=_random_gmm)),
    Case("DecoderLevel", _module_case(lambda r: DecoderLevel(6, 4, r), [(2, 6, 4, 4)],
                                      randomize=_random_gmm)),
    Case("InvertedResidual", _module_case(lambda r: InvertedResidual(4, 4, 1, 3, r), [(2, 4, 4, 4)])),
    Case("tiny_model", _tiny_model_case, max_elements=12, step=1e-7),
]


def run_suite(trials: int = 20, seed: int = 0, names: Optional[Sequence[str]] = None,
              h: float = 1e-6, progress: Optional[Callable[[str, float, float], None]] = None
              ) -> Dict[str, float]:
    """Worst relative error per case over ``trials`` random problems.

    ``h`` is the default step; cases with their own ``step`` use that instead.
    """
    chosen = [c for c in CASES if names is None or c.name in names]
    if names is not None:
        unknown = set(names) - {c.name for c in chosen}
        if unknown:
            raise KeyError(f"unknown grad-check cases: {sorted(unknown)}")
    results = {}
    for case in chosen:
        t0 = time.perf_counter()
        worst = 0.0
        for trial in range(trials):
            rng = np.random.default_rng([seed, trial, len(case.name)] + [ord(ch) for ch in case.name])
            f, x, wrt = case.build(rng)
            err = finite_diff_check(f, x, h=case.step or h, wrt=wrt,
                                    max_elements=case.max_elements, rng=rng)
            worst = max(worst, err)
        results[case.name] = worst
        if progress is not None:
            progress(case.name, worst, time.perf_counter() - t0)
    return results
