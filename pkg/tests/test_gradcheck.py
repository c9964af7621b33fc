"""Central finite-difference checks for every differentiable op, 20 seeds each."""

import numpy as np
import pytest

from rgbdsal import tensor as T
from rgbdsal.bpdc import build_bpdc, BpdcWeights, combine_side_outputs, collaborative_combine

from oracles import numeric_grad, rel_error

SEEDS = range(20)
TOL = 1e-4


def check(build, leaves):
    """build(*leaf_tensors) -> scalar Tensor; compare autodiff and FD for every leaf."""
    params = [T.Parameter(a.copy(), f"p{i}") for i, a in enumerate(leaves)]
    T.backward(build(*params))
    for p in params:
        fd = numeric_grad(lambda: build(*[T.Tensor(q.data) for q in params]).item(), p.data)
        err = rel_error(p.grad, fd)
        assert err < TOL, f"{p.name}: relative error {err:.3g}"


def proj(out, rng):
    """Scalar read-out with a random target so every output element matters."""
    return T.l2_loss(out, T.Tensor(rng.normal(size=out.shape)))


def away_from(x, points, margin=1e-3):
    """Nudge entries of x that sit within ``margin`` of a kink."""
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return x


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (1, 0, 1), (2, 1, 3)])
def test_conv2d(seed, stride, pad, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    tgt = np.random.default_rng(seed + 100)
    shape_rng = tgt.normal(size=T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, pad).shape)
    check(lambda x, w, b: T.l2_loss(T.conv2d(x, w, b, stride, pad), T.Tensor(shape_rng)), [x, w, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool(seed):
    rng = np.random.default_rng(seed)
    x = rng.permutation(np.linspace(-2, 2, 2 * 2 * 4 * 4)).reshape(2, 2, 4, 4)  # distinct values, no ties
    t = rng.normal(size=(2, 2, 2, 2))
    check(lambda x: T.l2_loss(T.maxpool2d(x), T.Tensor(t)), [x])


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["relu", "sigmoid"])
def test_activation(seed, kind):
    rng = np.random.default_rng(seed)
    x = away_from(rng.normal(size=(2, 3, 4, 4)), [0.0])
    t = rng.normal(size=x.shape)
    check(lambda x: T.l2_loss(T.activation(x, kind), T.Tensor(t)), [x])


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("factor", [2, 4])
def test_upsample(seed, factor):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 3, 3))
    t = rng.normal(size=(1, 2, 3 * factor, 3 * factor))
    check(lambda x: T.l2_loss(T.upsample_bilinear(x, factor), T.Tensor(t)), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_concat(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 1, 3, 3))
    t = rng.normal(size=(1, 3, 3, 3))
    check(lambda a, b: T.l2_loss(T.concat_channels([a, b]), T.Tensor(t)), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_add_scale_sum(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    t = rng.normal(size=(2, 3))
    check(lambda a, b: T.add(T.sum_all(T.scale(T.add(a, b), 0.7)), T.l2_loss(a, T.Tensor(t))), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_weighted_sum(seed):
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=(1, 1, 4, 4)) for _ in range(3)]
    ws = [rng.normal(size=(1,)) for _ in range(3)]
    t = rng.normal(size=(1, 1, 4, 4))
    check(lambda *v: T.l2_loss(T.weighted_sum(v[:3], v[3:]), T.Tensor(t)), xs + ws)


@pytest.mark.parametrize("seed", SEEDS)
def test_clamp(seed):
    rng = np.random.default_rng(seed)
    x = away_from(rng.uniform(-0.5, 1.5, size=(3, 4)), [T.EPS, 1 - T.EPS])
    t = rng.normal(size=x.shape)
    check(lambda x: T.l2_loss(T.clamp(x), T.Tensor(t)), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_l2(seed):
    rng = np.random.default_rng(seed)
    check(lambda a, b: T.l2_loss(a, b), [rng.normal(size=(2, 5)), rng.normal(size=(2, 5))])


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, size=(1, 1, 4, 4))
    y = (rng.random(p.shape) > 0.5).astype(float)
    check(lambda p: T.cross_entropy(p, y), [p])


@pytest.mark.parametrize("seed", SEEDS)
def test_bpdc_combination(seed):
    rng = np.random.default_rng(seed)
    levels = (2, 3, 4)
    raw = [rng.uniform(0.1, 0.9, size=(1, 1, 8 // 2 ** j, 8 // 2 ** j)) for j in range(3)]
    names = list(build_bpdc(levels, "b"))
    values = [rng.uniform(0.2, 1.0, size=(1,)) for _ in names]
    y = (rng.random((1, 1, 8, 8)) > 0.5).astype(float)

    def build(*v):
        maps, ws = v[:3], v[3:]
        weights = BpdcWeights(dict(zip(names, ws)), levels, "b")
        so = combine_side_outputs(list(maps), weights, size=8)
        total = T.sum_all(T.concat_channels(so.combined))
        return T.add(T.scale(total, 1e-2), T.cross_entropy(T.clamp(collaborative_combine(so, weights)), y))

    check(build, raw + values)
