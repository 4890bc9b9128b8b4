import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from resample_bnn.inference import (
    mc_predict,
    softmax_confidence,
    summarize_draws,
    uncertainty_band,
)
from resample_bnn.models import LayerSpec, ModelSpec, build, collapse
from resample_bnn.tensor import softmax

SPEC = ModelSpec(layers=(
    LayerSpec("constrained_conv", filters=2, kernel=3),
    LayerSpec("relu"),
    LayerSpec("flatten"),
    LayerSpec("dense", units=2),
), patch_size=8, classes=2)


def bayes_model(seed=0, rho=None):
    model = build(SPEC, "bayesian", seed=seed)
    if rho is not None:
        for name, t in model.parameters():
            if name.endswith("rho"):
                t.data[...] = rho
    return model


class TestSummarizeDraws:
    def test_two_point_draw_set(self):
        draws = np.array([[1.0, 0.0], [0.0, 1.0]] * 5)
        s = summarize_draws(draws)
        assert_allclose(s.mean_probs, [0.5, 0.5], atol=1e-15)
        assert_allclose(s.covariance, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)
        assert_allclose(s.std_rescaled, 0.5, atol=1e-15)

    def test_outer_product_equals_two_pass_covariance(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            p = rng.random((40, 1))
            draws = np.hstack([1.0 - p, p])
            s = summarize_draws(draws)
            centered = draws - draws.mean(axis=0)
            two_pass = centered.T @ centered / len(draws)
            assert np.abs(s.covariance - two_pass).max() < 1e-12

    def test_complementary_class_symmetry(self):
        rng = np.random.default_rng(8)
        p = rng.random((64, 1))
        s = summarize_draws(np.hstack([1.0 - p, p]))
        c = s.covariance
        assert abs(c[0, 0] - c[1, 1]) < 1e-12
        assert abs(c[0, 0] + c[0, 1]) < 1e-12
        assert c[0, 0] <= 0.25 + 1e-15
        eigs = np.linalg.eigvalsh(c)
        assert eigs.min() >= -1e-12

    def test_requires_two_draws(self):
        with pytest.raises(ValueError, match="2 draws"):
            summarize_draws(np.array([[0.5, 0.5]]))


class TestMcPredict:
    def test_sigma_zero_collapses_to_deterministic(self):
        # rho = -800 underflows softplus to exactly 0, freezing every draw
        model = bayes_model(seed=1, rho=-800.0)
        x = np.random.default_rng(0).standard_normal((3, 1, 8, 8))
        summaries = mc_predict(model, x, n=8, seed=5)
        point = softmax(collapse(model).forward(x).data)
        for j, s in enumerate(summaries):
            assert np.array_equal(s.covariance, np.zeros((2, 2)))
            assert s.std_rescaled == 0.0
            assert_allclose(s.mean_probs, point[j], atol=1e-9)

    def test_sigma_near_zero_stays_within_tolerance(self):
        model = bayes_model(seed=1, rho=-40.0)
        x = np.random.default_rng(0).standard_normal((3, 1, 8, 8))
        summaries = mc_predict(model, x, n=8, seed=5)
        point = softmax(collapse(model).forward(x).data)
        for j, s in enumerate(summaries):
            assert np.abs(s.mean_probs - point[j]).max() < 1e-9
            assert s.std_rescaled < 1e-9

    def test_mean_probs_sum_to_one(self):
        model = bayes_model(seed=2, rho=-1.0)
        x = np.random.default_rng(1).standard_normal((4, 1, 8, 8))
        for s in mc_predict(model, x, n=16, seed=3):
            assert abs(s.mean_probs.sum() - 1.0) < 1e-9

    def test_reproducible_bit_exact(self):
        model = bayes_model(seed=3, rho=-1.0)
        x = np.random.default_rng(2).standard_normal((2, 1, 8, 8))
        a = mc_predict(model, x, n=10, seed=11)
        b = mc_predict(model, x, n=10, seed=11)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.mean_probs, sb.mean_probs)
            assert np.array_equal(sa.covariance, sb.covariance)

    def test_draw_count_convergence(self):
        model = bayes_model(seed=4, rho=-2.0)
        x = np.random.default_rng(3).standard_normal((1, 1, 8, 8))
        small = mc_predict(model, x, n=50, seed=21, keep_draws=True)[0]
        big = mc_predict(model, x, n=5000, seed=22)[0]
        for k in range(2):
            var = small.draw_probs[:, k].var()
            tol = 3.0 * math.sqrt(var / 50) + 3.0 * math.sqrt(var / 5000) + 1e-9
            assert abs(small.mean_probs[k] - big.mean_probs[k]) < tol

    def test_rejects_small_n_and_baseline(self):
        model = bayes_model(seed=5)
        x = np.zeros((1, 1, 8, 8))
        with pytest.raises(ValueError, match="n >= 2"):
            mc_predict(model, x, n=1, seed=0)
        with pytest.raises(ValueError, match="bayesian"):
            mc_predict(build(SPEC, "baseline", seed=0), x, n=4, seed=0)


class TestSoftmaxConfidence:
    def test_single_input_confidence_is_max_prob(self):
        model = build(SPEC, "baseline", seed=6)
        x = np.random.default_rng(4).standard_normal((1, 1, 8, 8))
        probs = softmax(model.forward(x).data)[0]
        rep = softmax_confidence(model, x, np.array([0]), scale=1.3)
        assert_allclose(rep.confidence, probs.max(), atol=1e-15)
        assert rep.scale == 1.3 and rep.sample_count == 1

    def test_mean_of_max_probs(self):
        model = build(SPEC, "baseline", seed=7)
        x = np.random.default_rng(5).standard_normal((6, 1, 8, 8))
        probs = softmax(model.forward(x).data)
        labels = probs.argmax(axis=1)
        rep = softmax_confidence(model, x, labels)
        assert_allclose(rep.confidence, probs.max(axis=1).mean(), atol=1e-15)
        assert rep.accuracy == 1.0

    def test_uniform_logits_give_half_confidence(self):
        model = build(SPEC, "baseline", seed=8)
        # zero the head so every logit pair is (0, 0)
        model.layers[-1].weight.data[...] = 0.0
        model.layers[-1].bias.data[...] = 0.0
        x = np.random.default_rng(6).standard_normal((128, 1, 8, 8))
        labels = np.random.default_rng(7).integers(0, 2, 128)
        rep = softmax_confidence(model, x, labels)
        assert_allclose(rep.confidence, 0.5, atol=1e-12)
        assert rep.confidence >= 0.5  # two-class lower bound

    def test_empty_batch_rejected(self):
        model = build(SPEC, "baseline", seed=9)
        with pytest.raises(ValueError, match="empty"):
            softmax_confidence(model, np.zeros((0, 1, 8, 8)), np.zeros(0))


class TestUncertaintyBand:
    def test_zero_covariance_collapses_to_mean(self):
        s = summarize_draws(np.array([[0.3, 0.7]] * 4))
        assert uncertainty_band(s) == (0.7, 0.7)

    def test_half_mean_quarter_std(self):
        draws = np.array([[0.75, 0.25], [0.25, 0.75]] * 500)
        s = summarize_draws(draws)
        assert_allclose(s.mean_probs[1], 0.5, atol=1e-12)
        assert_allclose(s.std_rescaled, 0.25, atol=1e-12)
        raw = uncertainty_band(s)
        assert_allclose(raw, (0.0, 1.0), atol=1e-12)
        assert uncertainty_band(s, clamp=True) == (max(raw[0], 0.0),
                                                   min(raw[1], 1.0))

    def test_hand_computed_moments(self):
        p1 = np.array([0.2, 0.4, 0.6, 0.8])
        draws = np.stack([1.0 - p1, p1], axis=1)
        s = summarize_draws(draws)
        assert_allclose(s.mean_probs[1], 0.5, atol=1e-15)
        assert_allclose(s.std_rescaled, math.sqrt(0.05), atol=1e-12)
        low, high = uncertainty_band(s)
        assert_allclose((low, high), (0.5 - 2 * math.sqrt(0.05),
                                      0.5 + 2 * math.sqrt(0.05)), atol=1e-12)
        assert_allclose(high - low, 2 * 0.4472136, atol=1e-6)
