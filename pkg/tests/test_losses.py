import math

import numpy as np
import pytest

from otclu.clustering import Prototypes
from otclu.errors import NumericalError, ShapeError
from otclu.losses import orth_loss, soft_ce_loss, total_loss


def softmax_rows(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestSoftCeLoss:
    def test_uniform_matching_is_log_j(self):
        for j in (2, 5, 64):
            m = np.full((7, j), 1.0 / j)
            loss, _ = soft_ce_loss(m, m.copy())
            assert loss == pytest.approx(math.log(j), abs=1e-12)

    def test_near_perfect_prediction(self):
        gamma = np.array([[1.0, 0.0]])
        s = np.array([[1.0 - 1e-9, 1e-9]])
        loss, _ = soft_ce_loss(gamma, s)
        assert loss == pytest.approx(1e-9, abs=1e-12)

    def test_hand_value(self):
        gamma = np.array([[1.0, 0.0], [0.0, 1.0]])
        s = np.array([[0.5, 0.5], [0.25, 0.75]])
        loss, d_s = soft_ce_loss(gamma, s)
        expected = (-math.log(0.5) - math.log(0.75)) / 2
        assert loss == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.49041, abs=1e-5)
        np.testing.assert_allclose(d_s, -gamma / (2 * s), atol=1e-15)

    def test_rejects_nonpositive_scores(self):
        with pytest.raises(NumericalError):
            soft_ce_loss(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ShapeError):
            soft_ce_loss(np.full((2, 2), 0.5), np.full((3, 2), 0.5))

    def test_gradient_through_softmax_matches_fd(self, rng):
        # Compose with a softmax so the finite-difference path runs over
        # unconstrained logits.
        n, j = 4, 3
        gamma = rng.dirichlet(np.ones(j), size=n)
        z = rng.normal(size=(n, j))

        def loss_of_logits(logits):
            return soft_ce_loss(gamma, softmax_rows(logits))[0]

        s = softmax_rows(z)
        _, d_s = soft_ce_loss(gamma, s)
        d_z = s * (d_s - (d_s * s).sum(axis=1, keepdims=True))

        h = 1e-6
        for k in range(z.size):
            orig = z.flat[k]
            z.flat[k] = orig + h
            plus = loss_of_logits(z)
            z.flat[k] = orig - h
            minus = loss_of_logits(z)
            z.flat[k] = orig
            fd = (plus - minus) / (2 * h)
            rel = abs(d_z.flat[k] - fd) / (abs(d_z.flat[k]) + 1e-8)
            assert rel < 1e-5

    def test_gibbs_inequality(self, rng):
        # Mean cross-entropy dominates the mean row entropy of the targets,
        # with equality exactly when the predictions equal the targets.
        for _ in range(20):
            n, j = int(rng.integers(2, 9)), int(rng.integers(2, 6))
            gamma = rng.dirichlet(np.ones(j), size=n)
            scores = rng.dirichlet(np.ones(j), size=n)
            entropy = float(-(gamma * np.log(np.where(gamma > 0, gamma, 1.0))).sum() / n)
            loss, _ = soft_ce_loss(gamma, scores)
            assert loss >= entropy - 1e-12
        gamma = rng.dirichlet(np.ones(4), size=6)
        loss, _ = soft_ce_loss(gamma, gamma.copy())
        entropy = float(-(gamma * np.log(gamma)).sum() / 6)
        assert loss == pytest.approx(entropy, abs=1e-12)


class TestOrthLoss:
    def test_orthonormal_prototypes_zero(self):
        eye = np.eye(3)[:2]
        loss, d_geo, d_feat = orth_loss(Prototypes(geo=eye.copy(), feat=eye.copy()))
        assert loss == 0.0
        assert not d_geo.any() and not d_feat.any()

    def test_identical_unit_prototypes(self):
        # Both prototypes equal and unit-norm in both spaces: each Gram
        # matrix is all-ones, so each term is |[[0,1],[1,0]]|_F = sqrt(2).
        v = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        loss, _, _ = orth_loss(Prototypes(geo=v.copy(), feat=v.copy()))
        assert loss == pytest.approx(2 * math.sqrt(2), abs=1e-12)

    def test_zero_norm_rows_guarded(self, rng):
        geo = rng.normal(size=(3, 3))
        geo[1] = 0.0
        loss, d_geo, _ = orth_loss(Prototypes(geo=geo, feat=rng.normal(size=(3, 4))))
        assert np.isfinite(loss)
        assert not d_geo[1].any()

    def test_all_zero_rows(self):
        loss, d_geo, d_feat = orth_loss(Prototypes(geo=np.zeros((2, 3)),
                                                   feat=np.zeros((2, 4))))
        assert loss == 0.0

    def test_gradients_match_finite_differences(self, rng):
        geo = rng.normal(size=(4, 3))
        feat = rng.normal(size=(4, 8))
        _, d_geo, d_feat = orth_loss(Prototypes(geo=geo, feat=feat))
        h = 1e-6
        for arr, grad in ((geo, d_geo), (feat, d_feat)):
            for k in range(arr.size):
                orig = arr.flat[k]
                arr.flat[k] = orig + h
                plus = orth_loss(Prototypes(geo=geo, feat=feat))[0]
                arr.flat[k] = orig - h
                minus = orth_loss(Prototypes(geo=geo, feat=feat))[0]
                arr.flat[k] = orig
                fd = (plus - minus) / (2 * h)
                rel = abs(grad.flat[k] - fd) / (abs(grad.flat[k]) + 1e-8)
                assert rel < 1e-5

    def test_scale_invariance_of_normalized_gram(self, rng):
        protos = rng.normal(size=(3, 5))
        a, _, _ = orth_loss(Prototypes(geo=np.eye(3), feat=protos))
        b, _, _ = orth_loss(Prototypes(geo=np.eye(3), feat=protos * 7.5))
        assert a == pytest.approx(b, rel=1e-12)


class TestTotalLoss:
    def test_eta_zero_reduces_to_soft(self, rng):
        gamma = rng.dirichlet(np.ones(3), size=5)
        scores = rng.dirichlet(np.ones(3), size=5)
        protos = Prototypes(geo=rng.normal(size=(3, 3)), feat=rng.normal(size=(3, 4)))
        report, _, d_geo, d_feat = total_loss(gamma, scores, protos, eta=0.0)
        assert report.l_total == report.l_soft
        assert not d_geo.any() and not d_feat.any()

    def test_orthonormal_prototypes_reduce_to_soft(self, rng):
        gamma = rng.dirichlet(np.ones(3), size=5)
        scores = rng.dirichlet(np.ones(3), size=5)
        protos = Prototypes(geo=np.eye(3), feat=np.eye(4)[:3])
        report, _, _, _ = total_loss(gamma, scores, protos, eta=0.01)
        assert report.l_total == report.l_soft

    def test_components_recomputed_independently(self, rng):
        gamma = rng.dirichlet(np.ones(4), size=6)
        scores = rng.dirichlet(np.ones(4), size=6)
        protos = Prototypes(geo=rng.normal(size=(4, 3)), feat=rng.normal(size=(4, 5)))
        eta = 0.01
        report, d_s, d_geo, d_feat = total_loss(gamma, scores, protos, eta=eta)
        l_soft, d_s_ref = soft_ce_loss(gamma, scores)
        l_orth, d_geo_ref, d_feat_ref = orth_loss(protos)
        assert report.l_total == pytest.approx(l_soft + eta * l_orth, abs=1e-12)
        assert report.l_total == report.l_soft + report.eta * report.l_orth
        np.testing.assert_array_equal(d_s, d_s_ref)
        np.testing.assert_allclose(d_geo, eta * d_geo_ref, atol=1e-15)
        np.testing.assert_allclose(d_feat, eta * d_feat_ref, atol=1e-15)

    def test_negative_eta_rejected(self, rng):
        protos = Prototypes(geo=np.eye(3), feat=np.eye(3))
        with pytest.raises(ValueError):
            total_loss(np.full((2, 3), 1 / 3), np.full((2, 3), 1 / 3), protos, eta=-0.1)
