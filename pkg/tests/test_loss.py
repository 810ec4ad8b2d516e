import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qualitynet.loss import (
    QualityLabel,
    alpha_weight,
    batch_loss,
    loss_grads,
    utterance_loss,
)
from qualitynet.net import AssessmentResult


def result(q):
    q = np.asarray(q, dtype=float)
    return AssessmentResult(float(np.mean(q)), q)


@pytest.mark.parametrize("q_hat, w", [(4.5, 1.0), (3.5, 0.1), (1.0, 10 ** -3.5)])
def test_alpha(q_hat, w):
    assert alpha_weight(q_hat) == pytest.approx(w, rel=1e-12)


def test_alpha_value_at_floor():
    assert alpha_weight(1.0) == pytest.approx(3.1623e-4, rel=1e-4)


def test_alpha_rejects_above_max():
    with pytest.raises(ValueError):
        alpha_weight(4.6)
    with pytest.raises(ValueError):
        QualityLabel(5.0)


@given(st.floats(-5, 4.5), st.floats(-5, 4.5))
def test_alpha_strictly_increasing(a, b):
    if a < b and 10 ** (b - 4.5) != 10 ** (a - 4.5):
        assert alpha_weight(a) < alpha_weight(b)


class TestUtteranceLoss:
    def test_exact_fit(self):
        assert utterance_loss(QualityLabel(3.0), result([3.0, 3.0, 3.0])).total == 0.0

    def test_single_frame(self):
        b = utterance_loss(QualityLabel(4.5), result([4.0]))
        assert (b.utterance_term, b.frame_term, b.alpha, b.total) == pytest.approx((0.25, 0.25, 1.0, 0.5))

    def test_two_frames(self):
        b = utterance_loss(QualityLabel(4.5), result([4.5, 3.5]))
        assert b.total == pytest.approx(1.25, abs=1e-15)

    def test_frame_term_summed_not_averaged(self):
        short = utterance_loss(QualityLabel(4.5), result([4.0]))
        long = utterance_loss(QualityLabel(4.5), result([4.0] * 4))
        assert long.frame_term == pytest.approx(4 * short.frame_term)
        mean = utterance_loss(QualityLabel(4.5), result([4.0] * 4), frame_term_mean=True)
        assert mean.frame_term == pytest.approx(short.frame_term)

    def test_constraint_disabled(self):
        b = utterance_loss(QualityLabel(3.0), result([1.0, 4.0]), alpha_enabled=False)
        assert b.alpha == 0.0 and b.total == (3.0 - 2.5) ** 2

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            utterance_loss(QualityLabel(3.0), AssessmentResult(0.0, np.array([])))
        with pytest.raises(ValueError, match="empty"):
            loss_grads(QualityLabel(3.0), AssessmentResult(0.0, np.array([])))

    @given(st.floats(1, 4.5), st.lists(st.floats(-2, 6), min_size=1, max_size=20))
    def test_nonnegative_and_decomposes(self, q_hat, q):
        b = utterance_loss(QualityLabel(q_hat), result(q))
        assert b.total >= 0 and b.utterance_term >= 0 and b.frame_term >= 0
        assert b.total == pytest.approx(b.utterance_term + b.alpha * b.frame_term)


class TestGrads:
    def test_perfect_fit(self):
        dQ, dq = loss_grads(QualityLabel(2.0), result([2.0, 2.0]))
        assert dQ == 0.0 and not dq.any()

    def test_closed_form(self):
        dQ, dq = loss_grads(QualityLabel(4.5), result([4.5, 3.5]))
        assert dQ == 0.0
        np.testing.assert_allclose(dq, [-0.5, -2.5], atol=1e-15)

    @staticmethod
    def _numeric(label, q, eps=1e-3, **kw):
        # quadratic in q: central differences are exact up to roundoff for any eps
        out = np.zeros_like(q)
        for t in range(q.size):
            up, down = q.copy(), q.copy()
            up[t] += eps
            down[t] -= eps
            out[t] = (utterance_loss(label, result(up), **kw).total
                      - utterance_loss(label, result(down), **kw).total) / (2 * eps)
        return out

    @pytest.mark.parametrize("kw", [{}, {"alpha_enabled": False}, {"frame_term_mean": True}])
    def test_finite_differences(self, kw):
        rng = np.random.default_rng(0)
        for _ in range(100):
            q = rng.uniform(0.5, 5.0, size=rng.integers(1, 12))
            label = QualityLabel(float(rng.uniform(1.0, 4.5)))
            _, dq = loss_grads(label, result(q), **kw)
            num = self._numeric(label, q, **kw)
            rel = np.abs(dq - num) / np.maximum(np.maximum(np.abs(dq), np.abs(num)), 1e-6)
            assert rel.max() < 1e-8


class TestBatch:
    def test_single(self):
        lab, res = QualityLabel(4.5), result([4.0])
        assert batch_loss([lab], [res]) == utterance_loss(lab, res).total

    def test_mean(self):
        assert batch_loss([QualityLabel(4.5)] * 2, [result([4.0]), result([4.5, 3.5])]) == pytest.approx(0.875)

    def test_errors(self):
        with pytest.raises(ValueError, match="empty"):
            batch_loss([], [])
        with pytest.raises(ValueError):
            batch_loss([QualityLabel(1.0)], [])
