"""Gaussian mean-field weights, flipout layers, and KL divergence terms.

A variational weight holds theta = (mu, rho) with sigma = softplus(rho), so
sigma stays positive without clipping. Flipout layers perturb the mean path
with one shared Gaussian weight perturbation per batch, decorrelated across
examples by Rademacher sign vectors over input and output channels.

RNG consumption order inside a flipout forward is fixed and documented:
weight epsilon, input signs r, output signs s, then (if present) the shared
bias epsilon. Layers hold no RNG state; callers pass a Generator, so
concurrent draws over shared read-only parameters are safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import constrained_project
from .rng import rademacher
from .tensor import (Tensor, as_tensor, conv2d_flipout, dense, log, mul,
                     reshape, softplus)


@dataclass(frozen=True)
class PriorSpec:
    """Isotropic Gaussian prior over every weight."""
    mean: float = 0.0
    variance: float = 1.0

    def __post_init__(self):
        if self.variance <= 0:
            raise ValueError(f"prior variance must be positive, got {self.variance}")


UNIT_GAUSSIAN_PRIOR = PriorSpec()


class GaussianVariational:
    """Per-weight posterior N(mu, softplus(rho)^2), same shape as the weight."""

    def __init__(self, mu: Tensor, rho: Tensor):
        if mu.shape != rho.shape:
            raise ValueError(f"mu/rho shape mismatch: {mu.shape} vs {rho.shape}")
        self.mu = mu
        self.rho = rho

    @property
    def shape(self):
        return self.mu.shape

    def sigma(self) -> Tensor:
        return softplus(self.rho)

    def sample(self, rng: np.random.Generator) -> Tensor:
        return sample_weight(self, rng)


def sample_weight(v: GaussianVariational, rng: np.random.Generator) -> Tensor:
    """Reparameterized draw omega = mu + softplus(rho) * eps, eps ~ N(0, I)."""
    eps = rng.standard_normal(v.shape)
    return v.mu + v.sigma() * Tensor(eps)


def kl_closed_form(v: GaussianVariational,
                   prior: PriorSpec = UNIT_GAUSSIAN_PRIOR) -> Tensor:
    """Exact KL(q || prior) for diagonal Gaussians, summed over weights.

    For the unit Gaussian prior this is sum of 0.5*(sigma^2 + mu^2 - 1 - ln sigma^2).
    Always >= 0, and 0 iff q equals the prior.
    """
    sig = v.sigma()
    diff = v.mu - prior.mean
    ratio = (sig * sig + diff * diff) * (1.0 / prior.variance)
    log_sig2 = 2.0 * log(sig)
    per_weight = ratio - 1.0 + math.log(prior.variance) - log_sig2
    return 0.5 * per_weight.sum()


def kl_monte_carlo(v: GaussianVariational, prior: PriorSpec,
                   n_samples: int, rng: np.random.Generator) -> Tensor:
    """(1/n) sum_i [log q(omega_i) - log P(omega_i)], omega_i ~ q.

    Unbiased estimator of ``kl_closed_form``; differentiable w.r.t. (mu, rho)
    through both the samples and the density parameters.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    eps = rng.standard_normal((n_samples,) + tuple(v.shape))
    sig = v.sigma()
    omega = v.mu + sig * Tensor(eps)                      # (n, *shape)
    dq = (omega - v.mu) / sig
    dp = (omega - prior.mean) * (1.0 / math.sqrt(prior.variance))
    # -0.5*ln(2*pi) cancels between the two log densities.
    log_q = -log(sig) - 0.5 * dq * dq
    log_p = -0.5 * math.log(prior.variance) - 0.5 * dp * dp
    return (log_q - log_p).sum() * (1.0 / n_samples)


class FlipoutConv:
    """Convolution with flipout-perturbed variational weights."""

    def __init__(self, weight: GaussianVariational,
                 bias: GaussianVariational | None,
                 stride: int = 1, padding: str = "valid",
                 constrained: bool = False, stream_id: int = 0):
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.constrained = constrained
        self.stream_id = stream_id

    def forward(self, x, rng: np.random.Generator) -> Tensor:
        x = as_tensor(x)
        N, C = x.shape[0], x.shape[1]
        F = self.weight.shape[0]
        eps = rng.standard_normal(self.weight.shape)
        r = rademacher(rng, (N, C))
        s = rademacher(rng, (N, F))
        delta = self.weight.sigma() * Tensor(eps)
        out = conv2d_flipout(x, self.weight.mu, delta, r, s,
                             stride=self.stride, padding=self.padding)
        if self.bias is not None:
            b = self.bias.mu + self.bias.sigma() * Tensor(rng.standard_normal(F))
            out = out + reshape(b, (1, F, 1, 1))
        return out

    def parameters(self):
        params = [("mu", self.weight.mu), ("rho", self.weight.rho)]
        if self.bias is not None:
            params += [("bias_mu", self.bias.mu), ("bias_rho", self.bias.rho)]
        return params

    def kl(self, prior: PriorSpec = UNIT_GAUSSIAN_PRIOR) -> Tensor:
        total = kl_closed_form(self.weight, prior)
        if self.bias is not None:
            total = total + kl_closed_form(self.bias, prior)
        return total

    def project(self) -> None:
        # Constraint is defined on point weights; project the mean only.
        if self.constrained:
            self.weight.mu.data[...] = constrained_project(self.weight.mu.data)


class FlipoutDense:
    """Affine layer with flipout-perturbed variational weights."""

    def __init__(self, weight: GaussianVariational, bias: GaussianVariational,
                 stream_id: int = 0):
        self.weight = weight
        self.bias = bias
        self.stream_id = stream_id

    def forward(self, x, rng: np.random.Generator) -> Tensor:
        x = as_tensor(x)
        N, D = x.shape
        K = self.weight.shape[1]
        base = dense(x, self.weight.mu)
        eps = rng.standard_normal(self.weight.shape)
        r = rademacher(rng, (N, D))
        s = rademacher(rng, (N, K))
        delta = self.weight.sigma() * Tensor(eps)
        pert = mul(dense(mul(x, Tensor(r)), delta), Tensor(s))
        out = base + pert
        b = self.bias.mu + self.bias.sigma() * Tensor(rng.standard_normal(K))
        return out + reshape(b, (1, K))

    def parameters(self):
        return [("mu", self.weight.mu), ("rho", self.weight.rho),
                ("bias_mu", self.bias.mu), ("bias_rho", self.bias.rho)]

    def kl(self, prior: PriorSpec = UNIT_GAUSSIAN_PRIOR) -> Tensor:
        return kl_closed_form(self.weight, prior) + kl_closed_form(self.bias, prior)


def flipout_forward(layer, batch, rng: np.random.Generator) -> Tensor:
    """Run one flipout layer on a batch with fresh perturbation noise."""
    if not isinstance(layer, (FlipoutConv, FlipoutDense)):
        raise TypeError(f"not a flipout layer: {type(layer).__name__}")
    return layer.forward(batch, rng)
