"""Monte-Carlo predictive posterior and the baseline confidence metric.

``mc_predict`` draws n stochastic forward passes with fresh weight and sign
noise per draw, softmaxes each draw, and reports the draw-mean probability
vector together with the population (divide-by-n) covariance of the draws:
the covariance is an expectation over the posterior, not a sample-corrected
estimator. Draw i uses the RNG substream (seed, i), so draws could run in
parallel and still reproduce bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import LABEL_RESCALED, Model
from .rng import substream
from .tensor import no_grad, softmax


@dataclass
class PredictiveSummary:
    mean_probs: np.ndarray          # length-2, sums to 1
    covariance: np.ndarray          # 2x2, symmetric PSD
    std_rescaled: float             # sqrt(covariance[1,1])
    n_draws: int
    draw_probs: np.ndarray | None = None  # (n, 2) when retained


@dataclass
class ConfidenceReport:
    scale: float
    confidence: float               # mean over inputs of max softmax prob
    accuracy: float
    sample_count: int


def summarize_draws(draws: np.ndarray, keep_draws: bool = False) -> PredictiveSummary:
    """Aggregate (n, K) per-draw probability vectors into a summary.

    Identical draws short-circuit to an exactly zero covariance (a collapsed
    posterior must not report phantom uncertainty from rounding).
    """
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim != 2 or draws.shape[0] < 2:
        raise ValueError(f"need at least 2 draws of shape (n, K), got {draws.shape}")
    n = draws.shape[0]
    if (draws == draws[0]).all():
        mean = draws[0].copy()
        cov = np.zeros((draws.shape[1], draws.shape[1]))
    else:
        mean = draws.mean(axis=0)
        second_moment = (draws[:, :, None] * draws[:, None, :]).mean(axis=0)
        cov = second_moment - np.outer(mean, mean)
        cov = 0.5 * (cov + cov.T)
    return PredictiveSummary(
        mean_probs=mean, covariance=cov,
        std_rescaled=math.sqrt(max(float(cov[LABEL_RESCALED, LABEL_RESCALED]), 0.0)),
        n_draws=n, draw_probs=draws.copy() if keep_draws else None)


def mc_predict(model: Model, inputs: np.ndarray, n: int, seed: int,
               keep_draws: bool = False) -> list[PredictiveSummary]:
    """Predictive summaries for a (N,1,P,P) batch from n posterior draws."""
    if n < 2:
        raise ValueError(f"mc_predict needs n >= 2 draws for a variance, got {n}")
    if not model.bayesian:
        raise ValueError("mc_predict expects a bayesian model")
    inputs = np.asarray(inputs, dtype=np.float64)
    draws = np.empty((n, inputs.shape[0], model.spec.classes))
    with no_grad():
        for i in range(n):
            rng = substream(seed, 0xC, i)
            draws[i] = softmax(model.forward(inputs, rng).data)
    return [summarize_draws(draws[:, j], keep_draws=keep_draws)
            for j in range(inputs.shape[0])]


def softmax_confidence(model: Model, inputs: np.ndarray, labels: np.ndarray,
                       scale: float = math.nan) -> ConfidenceReport:
    """Mean max-softmax confidence and accuracy of the point-estimate model."""
    if model.bayesian:
        raise ValueError("softmax_confidence expects the baseline model")
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    if len(inputs) == 0:
        raise ValueError("empty batch")
    if labels.shape != (len(inputs),):
        raise ValueError(f"labels shape {labels.shape} does not match batch")
    with no_grad():
        probs = softmax(model.forward(inputs).data)
    return ConfidenceReport(
        scale=scale,
        confidence=float(probs.max(axis=1).mean()),
        accuracy=float((probs.argmax(axis=1) == labels).mean()),
        sample_count=len(inputs))


def uncertainty_band(summary: PredictiveSummary,
                     clamp: bool = False) -> tuple[float, float]:
    """mean P(rescaled) +- 2 std; clamped to [0,1] only for display."""
    center = float(summary.mean_probs[LABEL_RESCALED])
    half = 2.0 * summary.std_rescaled
    low, high = center - half, center + half
    if clamp:
        low, high = max(low, 0.0), min(high, 1.0)
    return low, high
