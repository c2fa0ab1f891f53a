import math

import numpy as np
import pytest

from logofuse import tensor as T
from logofuse.errors import DimensionError, ValidationError
from logofuse.loss import ArcFaceParams, arcface_logits, arcface_loss, cross_entropy
from logofuse.tensor import Tensor


def unit_rows(rng, n, c):
    x = rng.standard_normal((n, c))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def plain_softmax_ce(f, centers, labels, s):
    """Independent reference: cross-entropy of s * cosine logits, written with the stdlib."""
    total = 0.0
    for i, y in enumerate(labels):
        logits = [s * float(np.dot(f[i], c)) for c in centers]
        m = max(logits)
        lse = m + math.log(sum(math.exp(z - m) for z in logits))
        total += lse - logits[y]
    return total / len(labels)


def test_margin_zero_logits_are_scaled_cosines(rng):
    f, c = unit_rows(rng, 5, 4), unit_rows(rng, 3, 4)
    p = ArcFaceParams(Tensor(c), scale=7.0, margin=0.0)
    got = arcface_logits(Tensor(f), p, [0, 1, 2, 0, 1]).data
    cos = T.ordered_matmul(f, c.T)
    # The target column goes through cos*cos(0) - sin*sin(0), which is exact.
    assert np.array_equal(got, cos * 7.0)


def test_aligned_and_orthogonal_target_logits():
    c = np.eye(2)
    p = ArcFaceParams(Tensor(c), scale=1.0, margin=0.5)
    logit = arcface_logits(Tensor([[1.0, 0.0]]), p, [0]).data[0, 0]
    assert abs(logit - math.cos(0.5)) < 1e-3
    assert abs(logit - 0.87758) < 1e-3
    p = ArcFaceParams(Tensor(c), scale=64.0, margin=0.5)
    logit = arcface_logits(Tensor([[0.0, 1.0]]), p, [0]).data[0, 0]
    assert abs(logit - (-64 * math.sin(0.5))) < 1e-9
    assert abs(logit - (-30.68)) < 1e-2


def test_two_class_loss_value():
    p = ArcFaceParams(Tensor(np.eye(2)), scale=1.0, margin=0.0)
    loss = arcface_loss(Tensor(np.eye(2)), p, [0, 1]).item()
    assert abs(loss - (-math.log(math.e / (math.e + 1)))) < 1e-6
    assert abs(loss - 0.31326) < 1e-5


def test_margin_zero_matches_softmax_ce(rng):
    for _ in range(50):
        f, c = unit_rows(rng, 6, 5), unit_rows(rng, 4, 5)
        labels = rng.integers(0, 4, size=6)
        p = ArcFaceParams(Tensor(c), scale=30.0, margin=0.0)
        assert abs(arcface_loss(Tensor(f), p, labels).item() - plain_softmax_ce(f, c, labels, 30.0)) < 1e-9


def test_margin_raises_loss(rng):
    f, c = unit_rows(rng, 8, 6), unit_rows(rng, 3, 6)
    labels = rng.integers(0, 3, size=8)
    lo = arcface_loss(Tensor(f), ArcFaceParams(Tensor(c), 30.0, 0.0), labels).item()
    hi = arcface_loss(Tensor(f), ArcFaceParams(Tensor(c), 30.0, 0.3), labels).item()
    assert hi > lo


def test_gradients_wrt_features_and_centers():
    for seed in range(10):
        r = np.random.default_rng(seed)
        c = unit_rows(r, 3, 5)
        labels = r.integers(0, 3, size=4)
        f = unit_rows(r, 4, 5)

        def by_f(x):
            return arcface_loss(T.l2_normalize(x, axis=-1), ArcFaceParams(Tensor(c), 30.0, 0.3), labels)

        def by_c(x):
            return arcface_loss(Tensor(f), ArcFaceParams(x, 30.0, 0.3), labels)

        assert T.finite_diff_check(by_f, Tensor(f)) < 1e-4
        assert T.finite_diff_check(by_c, Tensor(c)) < 1e-4


def test_validation_errors(rng):
    p = ArcFaceParams(Tensor(unit_rows(rng, 3, 4)))
    with pytest.raises(ValidationError, match="unit-norm"):
        arcface_logits(Tensor(np.ones((2, 4))), p, [0, 1])
    with pytest.raises(ValidationError):
        arcface_logits(Tensor(unit_rows(rng, 2, 4)), p, [0, 3])
    with pytest.raises(DimensionError):
        arcface_logits(Tensor(unit_rows(rng, 2, 5)), p, [0, 1])
    with pytest.raises(ValidationError):
        arcface_loss(Tensor(np.zeros((0, 4))), p, [])
    with pytest.raises(ValidationError):
        ArcFaceParams(Tensor(unit_rows(rng, 3, 4)), scale=0.0)
    with pytest.raises(ValidationError):
        ArcFaceParams(Tensor(unit_rows(rng, 3, 4)), margin=2.0)


def test_clamp_keeps_exact_alignment_finite():
    p = ArcFaceParams(Tensor(np.eye(3)), 30.0, 0.3)
    f = Tensor(np.eye(3), requires_grad=True)
    with T.Graph() as g:
        loss = arcface_loss(f, p, [0, 1, 2])
    T.backward(loss, g)
    assert np.isfinite(loss.item()) and np.isfinite(f.grad).all()


def closed_form_center_grad(f, centers, y, s, m):
    """dL/dcenters for one sample, from dz_y/dc = s*(cos m + c*sin m/sqrt(1-c^2))."""
    c = centers @ f
    z = s * c
    z[y] = s * (c[y] * math.cos(m) - math.sqrt(1.0 - c[y] ** 2) * math.sin(m))
    p = np.exp(z - z.max())
    p /= p.sum()
    dz = p.copy()
    dz[y] -= 1.0
    dzdc = np.full(len(c), s)
    dzdc[y] = s * (math.cos(m) + c[y] * math.sin(m) / math.sqrt(1.0 - c[y] ** 2))
    return (dz * dzdc)[:, None] * f[None, :]


@pytest.mark.parametrize("gap", [1e-5, 1e-3, 0.5, 1.999, 1.99999])
def test_center_gradient_matches_closed_form_near_antipodal(gap):
    # Close to cos = -1 the derivative grows like 1/sin(theta), so a central
    # difference is no longer a usable reference; the closed form is.
    theta = math.acos(1.0 - gap)
    f = np.array([1.0, 0.0])
    centers = np.array([[math.cos(theta), math.sin(theta)], [0.6, 0.8], [0.0, -1.0]])
    w = Tensor(centers, requires_grad=True)
    with T.Graph() as g:
        loss = arcface_loss(Tensor(f[None, :]), ArcFaceParams(w, 30.0, 0.3), [0])
    T.backward(loss, g)
    expect = closed_form_center_grad(f, centers, 0, 30.0, 0.3)
    assert np.allclose(w.grad, expect, rtol=1e-9, atol=1e-12)


def test_renormalize_restores_unit_rows(rng):
    p = ArcFaceParams(Tensor(rng.standard_normal((4, 3)) * 5, requires_grad=True))
    p.renormalize()
    assert np.allclose(np.linalg.norm(p.centers.data, axis=1), 1.0, atol=1e-12)
    assert p.centers.requires_grad


def test_cross_entropy_picks_target():
    logits = Tensor([[0.0, 0.0]])
    assert abs(cross_entropy(logits, [1]).item() - math.log(2)) < 1e-15
