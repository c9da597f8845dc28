import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from serp.diffcore import Parameter, finite_diff_check, tensor
from serp.losses import (
    ShapeError,
    chamfer_l2,
    delta_mse_loss,
    perturbation_cls_loss,
    pointnet_total_loss,
    vq_total_loss,
)


def chamfer_oracle(P, Q):
    P, Q = np.asarray(P, np.float64), np.asarray(Q, np.float64)
    d = ((Q[:, None] - P[None]) ** 2).sum(-1)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def val(x):
    return float(x.data)


def test_chamfer_hand_values():
    assert val(chamfer_l2([[0, 0, 0]], [[1, 0, 0]])) == pytest.approx(2.0, abs=1e-6)
    assert val(chamfer_l2([[0, 0, 0], [2, 0, 0]], [[0, 0, 0]])) == pytest.approx(2.0, abs=1e-6)


def test_chamfer_zero_on_equal(rng):
    P = rng.normal(size=(20, 3))
    assert val(chamfer_l2(P, P)) == 0.0


def test_chamfer_empty_and_shape_errors():
    with pytest.raises(ValueError):
        chamfer_l2(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        chamfer_l2(np.zeros((2, 2)), np.zeros((2, 2)))


points = arrays(np.float32, st.tuples(st.integers(1, 12), st.just(3)),
                elements=st.floats(-2, 2, width=32))


@settings(max_examples=100, deadline=None)
@given(points, points)
def test_chamfer_properties(P, Q):
    v = val(chamfer_l2(P, Q))
    assert v >= 0
    assert v == pytest.approx(val(chamfer_l2(Q, P)), rel=1e-6, abs=1e-7)
    assert v == pytest.approx(chamfer_oracle(P, Q), rel=1e-5, abs=1e-6)
    rng = np.random.default_rng(0)
    assert val(chamfer_l2(P[rng.permutation(len(P))], Q[rng.permutation(len(Q))])) == pytest.approx(v, rel=1e-6, abs=1e-7)


def test_chamfer_batched_matches_loop(rng):
    P = rng.normal(size=(3, 10, 3)).astype(np.float32)
    Q = rng.normal(size=(3, 7, 3)).astype(np.float32)
    out = chamfer_l2(P, Q).data
    assert out.shape == (3,)
    assert np.allclose(out, [chamfer_oracle(p, q) for p, q in zip(P, Q)], rtol=1e-5)


def test_chamfer_gradient(rng):
    target = rng.normal(size=(12, 3)).astype(np.float32)
    pred = Parameter(rng.normal(size=(9, 3)).astype(np.float32))
    assert finite_diff_check(lambda: chamfer_l2(target, pred), [pred], eps=1e-4) < 1e-3


def test_cls_loss_cases(rng):
    mask = rng.random(16) < 0.4
    assert val(perturbation_cls_loss(np.zeros(16), mask)) == pytest.approx(math.log(2), abs=1e-6)
    sat = np.where(mask, 50.0, -50.0)
    assert val(perturbation_cls_loss(sat, mask)) < 1e-12
    z = rng.normal(size=16)
    s = 1 / (1 + np.exp(-z))
    ref = -np.sum(np.where(mask, np.log(s), np.log(1 - s))) / 16
    assert val(perturbation_cls_loss(z, mask)) == pytest.approx(ref, abs=1e-6)
    with pytest.raises(ShapeError):
        perturbation_cls_loss(np.zeros(3), np.zeros(4, bool))


def test_delta_mse_cases(rng):
    t = rng.normal(size=(8, 3))
    assert val(delta_mse_loss(t, t)) == 0.0
    assert val(delta_mse_loss(t + 1, t)) == pytest.approx(1.0, abs=1e-6)
    p = rng.normal(size=(8, 3))
    ref = sum((p[i, j] - t[i, j]) ** 2 for i in range(8) for j in range(3)) / 24
    assert val(delta_mse_loss(p, t)) == pytest.approx(ref, abs=1e-6)
    with pytest.raises(ShapeError):
        delta_mse_loss(np.zeros((2, 3)), np.zeros((3, 3)))


def test_pointnet_total_loss():
    out = pointnet_total_loss(2.0, 1.0)
    assert out.weights == {"cls": 0.001, "rec": 1.5}
    assert val(out.total) == pytest.approx(1.502, abs=1e-6)
    assert val(pointnet_total_loss(0.0, 0.0).total) == 0.0


def test_vq_terms():
    z = tensor(np.array([[1.0, 0.0]], np.float32), requires_grad=True)
    e = tensor(np.zeros((1, 2), np.float32), requires_grad=True)
    out = vq_total_loss(0.0, z, e, alpha=1.0, beta=0.25)
    assert out.weighted("codebook") == pytest.approx(1.0)
    assert out.weighted("commit") == pytest.approx(0.25)
    same = vq_total_loss(0.5, z, tensor(z.data.copy(), requires_grad=True))
    assert same.as_floats()["codebook"] == 0 and same.as_floats()["commit"] == 0
    with pytest.raises(ShapeError):
        vq_total_loss(0.0, z, tensor(np.zeros((2, 2), np.float32)))


def test_vq_gradient_routing(rng):
    z = tensor(rng.normal(size=(4, 3)).astype(np.float32), requires_grad=True)
    e = tensor(rng.normal(size=(4, 3)).astype(np.float32), requires_grad=True)
    beta = 0.25
    vq_total_loss(0.0, z, e, alpha=1.0, beta=beta).total.backward()
    # commitment pulls the encoder only; codebook term moves embeddings only
    assert np.allclose(z.grad, 2 * beta * (z.data - e.data) / 4, atol=1e-7)
    assert np.allclose(e.grad, 2 * 1.0 * (e.data - z.data) / 4, atol=1e-7)
