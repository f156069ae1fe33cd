import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_diff
from gradsuite import KINDS, check_case
from ifssl.errors import ConfigurationError, InputError
from ifssl.losses import (
    LossWeights,
    consistency_kl,
    consistency_mse,
    entropy_balance_loss,
    entropy_min_loss,
    negated_nll_loss,
    nll_loss,
    push_away_loss,
    ramp_factor,
    ramp_weight,
    total_batch_loss,
)
from ifssl.netcore import softmax

TOL = 1e-9


def logit_grad_norm(loss, logits):
    """Norm of the finite-difference gradient of ``loss(softmax(z))`` w.r.t. ``z``."""
    return float(np.linalg.norm(central_diff(lambda z: float(loss(softmax(z))), logits)))


def simplex(m_min=2, m_max=8):
    return st.integers(m_min, m_max).flatmap(
        lambda m: arrays(np.float64, m, elements=st.floats(0, 1)).map(
            lambda a: a / a.sum() if a.sum() > 0 else np.full(m, 1.0 / m)
        )
    )


class TestClosedForms:
    def test_nll(self):
        assert abs(nll_loss([0.0, 1.0, 0.0], 1)) <= TOL
        assert abs(nll_loss(np.full(10, 0.1), 3) - math.log(10)) <= TOL
        assert abs(nll_loss([0.2, 0.8], 0) + math.log(0.2)) <= TOL

    def test_negated_nll(self):
        assert abs(negated_nll_loss([1.0, 0.0], 0, c=1.0)) <= TOL
        assert abs(negated_nll_loss([0.5, 0.5], 0, c=2.0) + 2 * math.log(2)) <= TOL

    def test_push_away(self):
        assert abs(push_away_loss([0.5, 0.5], 0, c=1.0) + math.log(0.5)) <= TOL
        assert abs(push_away_loss(np.full(3, 1 / 3), 1, c=1.0) - math.log(3)) <= TOL

    def test_entropy_min(self):
        assert abs(entropy_min_loss([0.0, 1.0, 0.0])) <= TOL
        assert abs(entropy_min_loss(np.full(4, 0.25)) - math.log(4)) <= TOL
        assert abs(entropy_min_loss([0.5, 0.5, 0.0, 0.0]) - math.log(2)) <= TOL

    def test_entropy_balance(self):
        assert abs(entropy_balance_loss(np.full((3, 5), 0.2))) <= TOL
        assert abs(entropy_balance_loss(np.tile(np.eye(10)[2], (4, 1))) - math.log(10)) <= TOL
        assert abs(entropy_balance_loss([[1.0, 0.0], [0.0, 1.0]])) <= TOL

    def test_consistency_mse(self):
        a = np.array([0.3, 0.7])
        assert abs(consistency_mse(a, a)) <= TOL
        assert abs(consistency_mse([1.0, 0.0], [0.5, 0.5]) - 0.25) <= TOL
        assert abs(consistency_mse([0.9, 0.1], [0.5, 0.5]) - 0.16) <= TOL

    def test_consistency_kl(self):
        a = np.array([0.2, 0.3, 0.5])
        assert abs(consistency_kl(a, a)) <= TOL
        assert abs(consistency_kl([1.0, 0.0], [0.5, 0.5]) - math.log(2)) <= TOL

    def test_consistency_kl_high_precision_oracle(self):
        mpmath.mp.dps = 50
        half = mpmath.mpf(1) / 2
        ref = half * mpmath.log(half / mpmath.mpf("0.75")) + half * mpmath.log(half / mpmath.mpf("0.25"))
        assert abs(consistency_kl([0.5, 0.5], [0.75, 0.25]) - float(ref)) <= TOL
        assert abs(float(ref) - 0.143841) < 1e-6

    def test_ramp(self):
        w = LossWeights(consistency_max=10.0, ramp_epochs=5)
        assert abs(ramp_weight(5, w) - 10.0) <= TOL
        assert abs(ramp_weight(50, w) - 10.0) <= TOL
        assert abs(ramp_weight(0, w) - 10.0 * math.exp(-5)) <= TOL
        assert abs(ramp_weight(2.5, w) - 10.0 * math.exp(-1.25)) <= TOL
        assert ramp_factor(0, 0) == 1.0

    def test_total_supervised_only_perfect(self):
        w = LossWeights(consistency_max=0.0, entropy_min_w=0.0, entropy_balance_w=0.0)
        bl = total_batch_loss(np.array([[60.0, 0.0, 0.0]]), 1, [0], w, 0, mode="meanteacher",
                              teacher_probs=softmax(np.array([[60.0, 0.0, 0.0]])))
        assert abs(bl.loss) <= TOL

    def test_total_none_unlabeled_only(self):
        z = np.random.default_rng(0).normal(size=(5, 3))
        bl = total_batch_loss(z, 0, [], LossWeights(), 3, mode="none")
        assert bl.loss == 0.0
        assert np.array_equal(bl.grad_logits, np.zeros_like(z))

    def test_total_meanteacher_term_by_term(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(7, 4))
        t = softmax(rng.normal(size=(7, 4)))
        labels = np.array([0, 3, 1])
        w = LossWeights(consistency_max=10.0, ramp_epochs=5)
        bl = total_batch_loss(z, 3, labels, w, 2, mode="meanteacher", consistency="mse", teacher_probs=t)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        sup = np.mean([-math.log(p[i, labels[i]]) for i in range(3)])
        cons = np.mean([np.sum((p[i] - t[i]) ** 2) / 4 for i in range(7)])
        ref = sup + 10.0 * math.exp(-5 * (1 - 2 / 5) ** 2) * cons
        assert abs(bl.loss - ref) <= TOL


class TestGradientClaims:
    def test_negated_nll_vanishes_near_wrong_label(self):
        near = np.log([0.999, 0.001])
        far = np.log([0.6, 0.4])
        loss = lambda p: negated_nll_loss(p, 0)  # noqa: E731
        assert logit_grad_norm(loss, near) < logit_grad_norm(loss, far)

    def test_push_away_does_not_vanish_at_one_hot(self):
        # a logit gap of 20 puts the label within 1e-8 of probability one
        # while the other classes stay above the log clamp
        z = np.array([0.0, 20.0, 0.0, 0.0])
        assert np.max(np.abs(softmax(z) - np.eye(4)[1])) < 1e-8
        assert logit_grad_norm(lambda p: negated_nll_loss(p, 1), z) < 1e-6
        assert logit_grad_norm(lambda p: push_away_loss(p, 1), z) > 0.1

    def test_push_away_prefers_other_classes(self):
        m, lab = 5, 2
        onehot = np.eye(m)[lab]
        uniform = np.full(m, 1.0 / m)
        others = np.where(np.arange(m) == lab, 0.0, 1.0 / (m - 1))
        assert push_away_loss(others, lab) < push_away_loss(uniform, lab) < push_away_loss(onehot, lab)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("kind", KINDS)
def test_gradient_matches_finite_differences(kind, seed):
    assert check_case(kind, seed)


class TestProperties:
    @given(simplex(), st.integers(0, 100))
    def test_all_losses_finite(self, p, k):
        lab = k % p.size
        vals = [
            nll_loss(p, lab),
            negated_nll_loss(p, lab),
            push_away_loss(p, lab),
            entropy_min_loss(p),
            entropy_balance_loss(p[None]),
            consistency_mse(p, p[::-1]),
            consistency_kl(p, p[::-1]),
        ]
        assert all(np.isfinite(v) for v in vals)

    @given(simplex())
    def test_entropy_bounds(self, p):
        lnm = math.log(p.size)
        assert -1e-12 <= entropy_min_loss(p) <= lnm + 1e-12
        assert -1e-12 <= entropy_balance_loss(np.stack([p, p[::-1]])) <= lnm + 1e-12

    @given(st.integers(2, 8).flatmap(lambda m: st.tuples(simplex(m, m), simplex(m, m))))
    def test_mse_symmetric_kl_zero_on_diagonal(self, pair):
        a, b = pair
        assert consistency_mse(a, b) == pytest.approx(consistency_mse(b, a), abs=1e-15)
        assert abs(consistency_kl(a, a)) <= 1e-12


class TestErrors:
    def test_width_mismatch(self):
        with pytest.raises(InputError):
            consistency_mse([0.5, 0.5], [1 / 3] * 3)

    def test_bad_label(self):
        with pytest.raises(InputError):
            nll_loss([0.5, 0.5], 2)

    def test_bad_weights(self):
        with pytest.raises(ConfigurationError):
            LossWeights(consistency_max=-1.0)
        with pytest.raises(ConfigurationError):
            LossWeights(push_away_c=0.0)

    def test_missing_teacher(self):
        with pytest.raises(InputError):
            total_batch_loss(np.zeros((2, 2)), 1, [0], LossWeights(), 0, mode="meanteacher")
