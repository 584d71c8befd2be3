import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from i2ckd import reference
from i2ckd.gradcheck import max_rel_err, numerical_grad
from i2ckd.losses import (
    LossError,
    LossWeights,
    PrototypeMatrix,
    batch_i2ckd,
    channel_kld_loss,
    compute_prototypes,
    downsample_mask_nearest,
    prototype_backward,
    task_cross_entropy,
    total_loss,
    triplet_prototype_loss,
)
from i2ckd.tensor import TensorError

seeds = st.integers(0, 2**32 - 1)


def random_instance(rng, C=4, K=3, h=5, w=6, ignore_frac=0.15):
    F = rng.normal(size=(K, h, w))
    # only some classes appear, so absent rows are exercised
    used = rng.choice(C, size=rng.integers(1, C + 1), replace=False)
    M = rng.choice(used, size=(h, w)).astype(np.uint8)
    M[rng.random((h, w)) < ignore_frac] = 255
    return F, M


def protos(values, present=None):
    values = np.asarray(values, dtype=float)
    if present is None:
        present = np.ones(len(values), dtype=bool)
    return PrototypeMatrix(values, np.asarray(present), np.ones(len(values), dtype=np.int64))


# ---------------------------------------------------------------- mask resampling


def test_downsample_identity_and_constant():
    m = np.arange(16, dtype=np.uint8).reshape(4, 4)
    assert np.array_equal(downsample_mask_nearest(m, (4, 4)), m)
    assert downsample_mask_nearest(np.full((2, 2), 3, np.uint8), (1, 1)).tolist() == [[3]]


def test_downsample_quadrants():
    m = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]], dtype=np.uint8)
    assert downsample_mask_nearest(m, (2, 2)).tolist() == [[0, 1], [2, 3]]


def test_downsample_errors():
    with pytest.raises(LossError):
        downsample_mask_nearest(np.zeros((4, 4), np.uint8), (0, 2))
    with pytest.raises(LossError):
        downsample_mask_nearest(np.zeros((4, 4), np.uint8), (8, 2))


# ---------------------------------------------------------------- prototypes


def test_prototypes_constant_features():
    F = np.full((3, 4, 4), 2.5)
    P = compute_prototypes(F, np.zeros((4, 4), np.uint8), 3)
    assert P.values[0].tolist() == [2.5] * 3
    assert P.present.tolist() == [True, False, False]
    assert np.all(P.values[1:] == 0)


def test_prototypes_two_by_two():
    F = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    M = np.array([[0, 0], [1, 1]], dtype=np.uint8)
    values, _ = reference.prototypes_bruteforce(F.tolist(), M.tolist(), 2)
    assert values == [[1.5], [3.5]]
    P = compute_prototypes(F, M, 2)
    assert P.values.tolist() == [[1.5], [3.5]]


def test_prototypes_all_ignore():
    P = compute_prototypes(np.ones((2, 3, 3)), np.full((3, 3), 255, np.uint8), 4)
    assert not P.present.any() and np.all(P.values == 0)


def test_prototypes_reject_bad_label():
    with pytest.raises(TensorError):
        compute_prototypes(np.ones((1, 2, 2)), np.array([[0, 7], [0, 0]], np.uint8), 3)


def test_prototypes_bit_exact_against_pixel_loop():
    rng = np.random.default_rng(11)
    for _ in range(50):
        F, M = random_instance(rng)
        values, present = reference.prototypes_bruteforce(F.tolist(), M.tolist(), 4)
        P = compute_prototypes(F, M, 4)
        assert P.values.tolist() == values
        assert P.present.tolist() == present


@settings(max_examples=40)
@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_prototype_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    F, M = random_instance(rng)
    G = rng.normal(size=F.shape)
    lhs = compute_prototypes(a * F + b * G, M, 4)
    pf, pg = compute_prototypes(F, M, 4), compute_prototypes(G, M, 4)
    rows = lhs.present
    np.testing.assert_allclose(lhs.values[rows], a * pf.values[rows] + b * pg.values[rows],
                               rtol=1e-12, atol=1e-12)


def test_prototype_backward_matches_finite_differences():
    rng = np.random.default_rng(12)
    F, M = random_instance(rng)
    weights = rng.normal(size=(4, 3))
    P = compute_prototypes(F, M, 4)
    g = prototype_backward(weights, M, P.counts)
    num = numerical_grad(lambda f: float(np.sum(compute_prototypes(f, M, 4).values * weights)), F, 1e-5)
    assert max_rel_err(g, num) < 1e-8


# ---------------------------------------------------------------- triplet


def test_triplet_equal_prototypes_zero_margin():
    p = np.random.default_rng(0).normal(size=(4, 3))
    loss, grad, _ = triplet_prototype_loss(protos(p), protos(p), 0.0)
    assert loss == 0.0


def test_triplet_well_separated_with_margin():
    # pair terms [1 + 0 - 10]_+ = 0
    loss, _, active = triplet_prototype_loss(protos([[0.0], [10.0]]), protos([[0.0], [10.0]]), 1.0)
    assert loss == 0.0 and active == 0


def test_triplet_swapped_prototypes():
    # (0,1): [0 + 1 - 0]_+ = 1 and (1,0): [0 + 1 - 0]_+ = 1, mean over two pairs
    ps, pt = [[1.0], [0.0]], [[0.0], [1.0]]
    assert reference.triplet_reference(ps, pt, [True, True], 0.0) == 1.0
    loss, _, active = triplet_prototype_loss(protos(ps), protos(pt), 0.0)
    assert loss == 1.0 and active == 2


def test_triplet_excludes_absent_classes():
    ps = np.array([[1.0], [0.0], [50.0]])
    pt = np.array([[0.0], [1.0], [-50.0]])
    present = [True, True, False]
    loss, grad, _ = triplet_prototype_loss(protos(ps, present), protos(pt, present), 0.0)
    assert loss == 1.0
    assert np.all(grad[2] == 0)


def test_triplet_no_pairs():
    loss, grad, active = triplet_prototype_loss(protos([[1.0], [2.0]], [True, False]),
                                                protos([[0.0], [0.0]], [True, False]), 0.5)
    assert loss == 0.0 and active == 0 and np.all(grad == 0)


def test_triplet_shape_mismatch():
    with pytest.raises(LossError):
        triplet_prototype_loss(protos(np.zeros((3, 2))), protos(np.zeros((3, 4))), 0.1)


def test_triplet_zero_distance_subgradient():
    # s_0 coincides with t_0: the positive distance has subgradient 0
    ps = np.array([[0.0, 0.0], [3.0, 0.0]])
    pt = np.array([[0.0, 0.0], [0.5, 0.0]])
    loss, grad, _ = triplet_prototype_loss(protos(ps), protos(pt), 1.0)
    assert np.all(np.isfinite(grad))
    # row 0: active term 1 + 0 - 0.5; only the negative distance contributes
    assert grad[0].tolist() == [0.5, 0.0]


@settings(max_examples=60)
@given(seeds)
def test_triplet_properties(seed):
    rng = np.random.default_rng(seed)
    C, K = int(rng.integers(2, 6)), int(rng.integers(1, 5))
    ps, pt = rng.normal(size=(C, K)), rng.normal(size=(C, K))
    present = rng.random(C) < 0.8
    prev = -1.0
    for m in np.linspace(0, 3, 13):
        loss, _, _ = triplet_prototype_loss(protos(ps, present), protos(pt, present), m)
        assert loss >= 0.0
        assert loss >= prev
        prev = loss
    perm = rng.permutation(C)
    a = triplet_prototype_loss(protos(ps, present), protos(pt, present), 0.7)[0]
    b = triplet_prototype_loss(protos(ps[perm], present[perm]), protos(pt[perm], present[perm]), 0.7)[0]
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


def test_triplet_matches_reference():
    rng = np.random.default_rng(13)
    for _ in range(100):
        C, K = int(rng.integers(2, 7)), int(rng.integers(1, 6))
        ps, pt = rng.normal(size=(C, K)), rng.normal(size=(C, K))
        present = rng.random(C) < 0.8
        m = float(rng.uniform(0, 2))
        ref = reference.triplet_reference(ps.tolist(), pt.tolist(), present.tolist(), m)
        assert abs(triplet_prototype_loss(protos(ps, present), protos(pt, present), m)[0] - ref) <= 1e-10


# ---------------------------------------------------------------- channel KLD


def test_kld_identical_inputs_is_exactly_zero():
    y = np.random.default_rng(0).normal(size=(5, 4, 4))
    loss, grad = channel_kld_loss(y, y.copy(), 2.0)
    assert loss == 0.0
    assert np.all(grad == 0.0)


@pytest.mark.parametrize("T", [1.0, 2.0, 4.0])
@pytest.mark.parametrize("big", [5.0, 20.0, 60.0])
def test_kld_two_position_closed_form(T, big):
    # teacher uniform over 2 positions, student y_s=[0, big]:
    # KL = log(1 + e^a) - log 2 - a/2 with a = big / T, scaled by T^2 (one channel)
    a = big / T
    expected = T * T * (math.log1p(math.exp(a)) - math.log(2) - a / 2)
    loss, _ = channel_kld_loss(np.zeros((1, 1, 2)), np.array([[[0.0, big]]]), T)
    assert loss == pytest.approx(expected, rel=1e-12)
    assert channel_kld_loss(np.zeros((1, 1, 2)), np.zeros((1, 1, 2)), T)[0] == 0.0


def test_kld_rejects_bad_temperature():
    with pytest.raises(LossError):
        channel_kld_loss(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), 0.0)


@settings(max_examples=60)
@given(seeds, st.floats(0.5, 5.0))
def test_kld_properties(seed, T):
    rng = np.random.default_rng(seed)
    yt, ys = rng.normal(size=(3, 3, 4)) * 2, rng.normal(size=(3, 3, 4)) * 2
    loss, _ = channel_kld_loss(yt, ys, T)
    assert loss >= 0.0
    shift = rng.normal(size=(3, 1, 1)) * 5
    shifted, _ = channel_kld_loss(yt + shift, ys + shift, T)
    assert shifted == pytest.approx(loss, rel=1e-9, abs=1e-12)
    # same per-channel softmax (student = teacher + per-channel constant) gives zero
    same, _ = channel_kld_loss(yt, yt + rng.normal(size=(3, 1, 1)), T)
    assert abs(same) < 1e-12


def test_kld_matches_direct_summation():
    rng = np.random.default_rng(14)
    for _ in range(100):
        yt, ys = rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2))
        T = float(rng.uniform(0.5, 4))
        ref = reference.channel_kld_reference(yt.tolist(), ys.tolist(), T)
        assert abs(channel_kld_loss(yt, ys, T)[0] - ref) <= 1e-12


# ---------------------------------------------------------------- cross-entropy


def test_ce_uniform_logits():
    loss, _ = task_cross_entropy(np.zeros((4, 3, 3)), np.zeros((3, 3), np.uint8))
    assert loss == pytest.approx(math.log(4), rel=1e-15)


def test_ce_confident_correct():
    mask = np.array([[0, 1], [2, 1]], dtype=np.uint8)
    scores = np.zeros((3, 2, 2))
    for y in range(2):
        for x in range(2):
            scores[mask[y, x], y, x] = 50.0
    loss, _ = task_cross_entropy(scores, mask)
    assert 0 <= loss < 1e-20


def test_ce_all_ignore_and_bad_label():
    loss, grad = task_cross_entropy(np.ones((3, 2, 2)), np.full((2, 2), 255, np.uint8))
    assert loss == 0.0 and np.all(grad == 0)
    with pytest.raises(LossError):
        task_cross_entropy(np.zeros((3, 2, 2)), np.array([[0, 3], [0, 0]], np.uint8))


def test_ce_gradient_and_reference():
    rng = np.random.default_rng(15)
    scores = rng.normal(size=(3, 2, 2))
    mask = np.array([[0, 2], [255, 1]], dtype=np.uint8)
    loss, grad = task_cross_entropy(scores, mask)
    assert abs(loss - reference.task_ce_reference(scores.tolist(), mask.tolist())) < 1e-12
    num = numerical_grad(lambda s: task_cross_entropy(s, mask)[0], scores, 1e-5)
    assert max_rel_err(grad, num) < 1e-6
    assert np.all(grad[:, 1, 0] == 0)


# ---------------------------------------------------------------- combination


def test_total_loss_examples():
    parts = {"l_task": 1.0, "l_sm": 0.5, "l_i2ckd": 0.2}
    assert total_loss(parts, LossWeights(0.0, 0.0)) == 1.0
    assert total_loss(parts, LossWeights(lambda_i2ckd=0.0, lambda_sm=3.0)) == 2.5
    assert total_loss(parts, LossWeights()) == pytest.approx(2.62, abs=1e-15)


def test_loss_weight_defaults_and_validation():
    w = LossWeights()
    assert (w.lambda_i2ckd, w.lambda_sm, w.temperature, w.margin) == (0.6, 3.0, 2.0, 0.1)
    for bad in [dict(temperature=0), dict(margin=-1), dict(lambda_sm=-1)]:
        with pytest.raises(LossError):
            LossWeights(**bad)


def test_batch_i2ckd_skips_single_class_images():
    rng = np.random.default_rng(16)
    ft, fs = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    masks = np.zeros((2, 4, 4), np.uint8)
    masks[1, :2] = 1
    loss, grad, _ = batch_i2ckd(ft, fs, masks, 3, 5.0)
    assert np.all(grad[0] == 0)
    single, _, _ = triplet_prototype_loss(compute_prototypes(fs[1], masks[1], 3),
                                          compute_prototypes(ft[1], masks[1], 3), 5.0)
    assert loss == single / 2


def test_batch_i2ckd_resamples_mask():
    rng = np.random.default_rng(17)
    ft, fs = rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 2, 2, 2))
    mask = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 0, 0], [2, 2, 0, 0]], np.uint8)[None]
    loss, _, _ = batch_i2ckd(ft, fs, mask, 3, 1.0)
    small = np.array([[0, 1], [2, 0]], np.uint8)
    ref, _, _ = triplet_prototype_loss(compute_prototypes(fs[0], small, 3),
                                       compute_prototypes(ft[0], small, 3), 1.0)
    assert loss == ref
