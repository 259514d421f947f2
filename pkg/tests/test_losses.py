import math

import numpy as np
import pytest
from conftest import random_batch, random_item
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lateinteract import reference as ref
from lateinteract.errors import AssignmentMismatch, DegenerateColumn, NonSquare
from lateinteract.interaction import init_weight_head, score_ti_batch, score_wti_batch
from lateinteract.losses import (
    LossConfig,
    cdcr_sequential,
    cdcr_single,
    correlation_matrix,
    fd_check,
    grad_wti_heads,
    info_nce,
    info_nce_grad,
    total_loss,
    wti_head_loss,
)
from lateinteract.numerics import TokenMatrix, make_rng

# computed with reference.correlation + reference.cdcr_penalty (double loop), then frozen
CDCR_ANTI_CORRELATED = 0.12


def test_info_nce_uniform():
    assert info_nce(np.full((4, 4), 0.3)) == pytest.approx(2 * math.log(4), abs=1e-9)


def test_info_nce_saturated():
    assert info_nce(np.eye(2), LossConfig(logit_scale=100)) < 1e-10


def test_info_nce_random_against_direct_formula():
    s = make_rng(4).uniform(-1, 1, (3, 3))
    assert info_nce(s) == pytest.approx(ref.info_nce(s.tolist(), 100.0), rel=1e-12)


def test_info_nce_rejects_non_square():
    with pytest.raises(NonSquare):
        info_nce(np.zeros((2, 3)))
    with pytest.raises(NonSquare):
        info_nce(np.zeros((1, 1)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(-1, 1)), st.floats(-5, 5))
def test_info_nce_shift_invariance(s, c):
    assert info_nce(s + c) == pytest.approx(info_nce(s), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-1, 1)), st.integers(0, 2), st.floats(1e-3, 0.5))
def test_info_nce_decreases_with_diagonal(s, i, bump):
    cfg = LossConfig(logit_scale=10)
    s2 = s.copy()
    s2[i, i] += bump
    assert info_nce(s2, cfg) < info_nce(s, cfg)


def test_info_nce_grad_matches_fd():
    s = make_rng(8).uniform(-1, 1, (4, 4))
    cfg = LossConfig(logit_scale=7)
    rep = fd_check(lambda: info_nce(s, cfg), [s], [info_nce_grad(s, cfg)], step=1e-5)
    assert rep.max_rel_error < 1e-6


# ---------------------------------------------------------------------- CDCR


def test_cdcr_identity_case():
    cols = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], float)
    np.testing.assert_allclose(correlation_matrix(cols, cols), np.eye(2), atol=1e-15)
    assert cdcr_single(cols, cols) == pytest.approx(0.0, abs=1e-12)


def test_cdcr_anti_correlated_example():
    x = [[1.0, -1.0], [-1.0, 1.0]]
    oracle = ref.cdcr_penalty(ref.correlation(x, x), 0.06)
    assert oracle == pytest.approx(CDCR_ANTI_CORRELATED, abs=1e-12)
    np.testing.assert_allclose(correlation_matrix(x, x), [[1, -1], [-1, 1]], atol=1e-15)
    assert cdcr_single(np.array(x), np.array(x), LossConfig(alpha=0.06)) == pytest.approx(CDCR_ANTI_CORRELATED, abs=1e-9)


def test_cdcr_random_against_double_loop():
    rng = make_rng(31)
    et, ev = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
    np.testing.assert_allclose(correlation_matrix(et, ev), ref.correlation(et.tolist(), ev.tolist()), atol=1e-12)
    expected = ref.cdcr_penalty(ref.correlation(et.tolist(), ev.tolist()), 0.06)
    assert cdcr_single(et, ev) == pytest.approx(expected, abs=1e-9)


def test_cdcr_properties(rng):
    for _ in range(20):
        et, ev = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
        loss = cdcr_single(et, ev)
        assert loss >= 0
        assert cdcr_single(ev, et) == pytest.approx(loss, rel=1e-12)
        scale_t, scale_v = rng.uniform(0.1, 10, 3), rng.uniform(0.1, 10, 3)
        assert cdcr_single(et * scale_t, ev * scale_v) == pytest.approx(loss, rel=1e-10)


def test_cdcr_degenerate_column():
    with pytest.raises(DegenerateColumn):
        cdcr_single(np.ones((3, 2)), np.eye(3)[:, :2])


def test_cdcr_sequential_single_token_reduces_to_single(rng):
    T = [random_item(rng, 1, 4, "text", i) for i in range(5)]
    V = [random_item(rng, 1, 4, "video", i) for i in range(5)]
    s = score_ti_batch(T, V)
    et = np.stack([t.tokens[0] for t in T])
    ev = np.stack([v.tokens[0] for v in V])
    assert cdcr_sequential(T, V, s) == pytest.approx(cdcr_single(et, ev), rel=1e-12)


def test_cdcr_sequential_identity_case():
    rows = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], float)
    T = [TokenMatrix(0, rows[:2], None, "text"), TokenMatrix(1, rows[2:], None, "text")]
    V = [TokenMatrix(0, rows[:2]), TokenMatrix(1, rows[2:])]
    s = score_ti_batch(T, V)
    np.testing.assert_array_equal(s.t2v_argmax[[0, 1], [0, 1]], [[0, 1], [0, 1]])
    assert cdcr_sequential(T, V, s) == pytest.approx(0.0, abs=1e-12)


def test_cdcr_sequential_against_gather_oracle():
    rng = make_rng(41)
    T = [random_item(rng, 3, 4, "text", i) for i in range(4)]
    V = [random_item(rng, 2, 4, "video", i) for i in range(4)]
    s = score_ti_batch(T, V)
    r = np.arange(4)
    expected = ref.cdcr_sequential(T, V, s.t2v_argmax[r, r].tolist(), s.v2t_argmax[r, r].tolist(), 0.06)
    assert cdcr_sequential(T, V, s) == pytest.approx(expected, abs=1e-9)


def test_cdcr_sequential_with_padding_against_gather_oracle(rng):
    T = random_batch(rng, 4, 4, "text", max_n=4, pad_max=2)
    V = random_batch(rng, 4, 4, "video", max_n=4, pad_max=2)
    s = score_ti_batch(T, V)
    r = np.arange(4)
    expected = ref.cdcr_sequential(T, V, s.t2v_argmax[r, r].tolist(), s.v2t_argmax[r, r].tolist(), 0.06)
    assert cdcr_sequential(T, V, s) == pytest.approx(expected, abs=1e-9)


def test_cdcr_sequential_assignment_mismatch(rng):
    T = [TokenMatrix(i, rng.standard_normal((2, 3)), None, "text") for i in range(3)]
    V = [TokenMatrix(i, rng.standard_normal((2, 3)), np.array([1, 0], bool)) for i in range(3)]
    i4t = np.ones((3, 2), dtype=int)  # points at the masked video token
    i4v = np.zeros((3, 2), dtype=int)
    with pytest.raises(AssignmentMismatch):
        cdcr_sequential(T, V, (i4t, i4v))


# ---------------------------------------------------------------- total loss


def test_total_loss_components(rng):
    T, V = random_batch(rng, 4, 5, "text"), random_batch(rng, 4, 5, "video")
    tw, vw = init_weight_head(5, rng, "text"), init_weight_head(5, rng, "video")
    s = score_wti_batch(T, V, tw, vw)
    base = info_nce(s)
    assert total_loss(s, T, V, s, LossConfig(lam=0.0)) == base
    assert total_loss(s, T, V, s, LossConfig(cdcr_mode="none", lam=5.0)) == base
    cfg = LossConfig(lam=0.001)
    assert total_loss(s, T, V, s, cfg) == pytest.approx(base + 0.001 * cdcr_sequential(T, V, s), rel=1e-14)


def test_total_loss_zero_regularizer():
    rows = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], float)
    T = [TokenMatrix(0, rows[:2], None, "text"), TokenMatrix(1, rows[2:], None, "text")]
    V = [TokenMatrix(0, rows[:2]), TokenMatrix(1, rows[2:])]
    s = score_ti_batch(T, V)
    assert total_loss(s, T, V, s, LossConfig(lam=123.0)) == pytest.approx(info_nce(s), abs=1e-9)


# ------------------------------------------------------------------ gradients


def _flat(g):
    return [p for layer in g for p in layer]


def test_zero_heads_symmetric_batch_zero_gradient():
    rows = np.eye(3)
    T = [TokenMatrix(i, rows[[i, (i + 1) % 3]], None, "text") for i in range(3)]
    V = [TokenMatrix(i, rows[[i, (i + 1) % 3]]) for i in range(3)]
    tw, vw = init_weight_head(3, side="text", init="zero"), init_weight_head(3, side="video", init="zero")
    g = grad_wti_heads(T, V, tw, vw)
    for p in _flat(g.text) + _flat(g.video):
        np.testing.assert_array_equal(p, 0.0)


@pytest.mark.parametrize("seed", [11, 12, 13])
def test_head_gradients_match_fd(seed):
    rng = make_rng(seed)
    T, V = random_batch(rng, 4, 5, "text", pad_max=2), random_batch(rng, 4, 5, "video", pad_max=2)
    tw, vw = init_weight_head(5, rng, "text"), init_weight_head(5, rng, "video")
    cfg = LossConfig()
    g = grad_wti_heads(T, V, tw, vw, cfg)
    assert g.loss == pytest.approx(wti_head_loss(T, V, tw, vw, cfg), rel=1e-14)
    rep = fd_check(lambda: wti_head_loss(T, V, tw, vw, cfg), tw.params() + vw.params(),
                   _flat(g.text) + _flat(g.video), step=1e-4)
    assert rep.max_rel_error < 1e-4


def test_gradient_is_descent_direction(rng):
    T, V = random_batch(rng, 4, 5, "text"), random_batch(rng, 4, 5, "video")
    tw, vw = init_weight_head(5, rng, "text"), init_weight_head(5, rng, "video")
    cfg = LossConfig(logit_scale=20)
    g = grad_wti_heads(T, V, tw, vw, cfg)
    before = g.loss
    for p, d in zip(tw.params() + vw.params(), _flat(g.text) + _flat(g.video)):
        p -= 1e-3 * d
    assert wti_head_loss(T, V, tw, vw, cfg) < before


def test_fd_check_closed_forms():
    x = np.array([3.0])
    rep = fd_check(lambda: float(x[0] ** 2), [x], [np.array([6.0])], step=1e-4)
    assert abs(rep.numeric[0][0] - 6.0) < 1e-8
    w = np.array([1.5, -2.0, 0.25])
    y = np.array([0.1, 0.2, 0.3])
    rep = fd_check(lambda: float(w @ y), [w], [y.copy()], step=1e-3)
    np.testing.assert_allclose(rep.numeric[0], y, rtol=1e-12)
    assert rep.max_rel_error < 1e-10
