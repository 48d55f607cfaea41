"""Stochastic nodes and divergence terms.

Samplers take their noise as an explicit array so callers own the random
source and every draw is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, detach

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianPosterior:
    mu: Tensor
    sigma: Tensor

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


@dataclass
class CategoricalPosterior:
    logits: Tensor

    @property
    def num_classes(self) -> int:
        return self.logits.shape[-1]

    def probs(self) -> Tensor:
        return T.softmax(self.logits)


@dataclass(frozen=True)
class AnnealSchedule:
    flat_steps: int = 3000
    ramp_steps: int = 3000


def anneal_coeff(step: int, sched: AnnealSchedule) -> float:
    """0 up to ``flat_steps``, then a linear ramp reaching 1 after ``ramp_steps`` more."""
    if step <= sched.flat_steps:
        return 0.0
    if sched.ramp_steps <= 0:
        return 1.0
    return min(1.0, (step - sched.flat_steps) / sched.ramp_steps)


def sample_gaussian_reparam(post: GaussianPosterior, epsilon: np.ndarray) -> Tensor:
    epsilon = np.asarray(epsilon)
    if epsilon.shape != post.mu.shape:
        raise ShapeError(f"noise shape {epsilon.shape} does not match mu shape {post.mu.shape}")
    return post.mu + post.sigma * epsilon


_GUMBEL_SIGN = 1.0  # flipped only by verification fault injection


def gumbel_noise(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("uniform noise must lie strictly inside (0, 1)")
    return -_GUMBEL_SIGN * np.log(-np.log(u))


def uniform_noise(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)


def gumbel_softmax_sample(post: CategoricalPosterior, tau: float, u: np.ndarray) -> Tensor:
    """Relaxed one-hot sample ``softmax((logits + g) / tau)`` with ``g = -log(-log u)``."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    u = np.asarray(u)
    if u.shape != post.logits.shape:
        raise ShapeError(f"noise shape {u.shape} does not match logits shape {post.logits.shape}")
    g = gumbel_noise(u).astype(post.logits.dtype)
    return T.softmax((post.logits + g) * (1.0 / tau))


def gumbel_max_sample(post: CategoricalPosterior, u: np.ndarray) -> np.ndarray:
    """Exact categorical draw as a hard one-hot array (argmax of logits + Gumbel noise)."""
    scores = post.logits.data + gumbel_noise(u)
    onehot = np.zeros_like(post.logits.data)
    np.put_along_axis(onehot, scores.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return onehot


def kl_gaussian_standard(post: GaussianPosterior) -> Tensor:
    """Per-row KL(N(mu, diag sigma^2) || N(0, I))."""
    if np.any(post.sigma.data <= 0):
        raise ValueError("sigma must be strictly positive")
    mu, sigma = post.mu, post.sigma
    terms = mu * mu + sigma * sigma - 2.0 * T.log(sigma) - 1.0
    return 0.5 * terms.sum(axis=-1)


def kl_categorical(q, p, log_q: Tensor | None = None) -> Tensor:
    """Per-row KL(q || p) with ``0 log 0 = 0``.

    ``q`` may be a tensor (e.g. softmax of logits); ``p`` is a fixed
    distribution broadcast over rows. ``log_q`` can be given to avoid
    computing ``log(softmax)`` the unstable way.
    """
    q = T.as_tensor(q)
    p = np.broadcast_to(np.asarray(p, dtype=q.dtype), q.shape)
    support = q.data > 0
    if np.any(support & (p <= 0)):
        raise ValueError("q puts mass where p is zero")
    log_p = np.log(np.where(p > 0, p, 1.0))
    if log_q is None:
        if support.all():
            log_q = T.log(q)
        else:
            # log(1) = 0 on the zero-mass entries, so q * log q contributes nothing there
            hole = (~support).astype(q.dtype)
            log_q = T.log(q + hole)
    return (q * (log_q - log_p)).sum(axis=-1)


def gaussian_log_density(z: Tensor, mu, sigma) -> Tensor:
    """Per-row log N(z; mu, diag sigma^2)."""
    mu, sigma = T.as_tensor(mu), T.as_tensor(sigma)
    scaled = (z - mu) * T.exp(-T.log(sigma))
    d = z.shape[-1]
    return -0.5 * (scaled * scaled).sum(axis=-1) - T.log(sigma).sum(axis=-1) - 0.5 * d * LOG_2PI


def stl_log_q(z: Tensor, post: GaussianPosterior) -> Tensor:
    """log q(z) with the variational parameters gradient-stopped.

    Gradients reach mu and sigma only through the reparameterized ``z``.
    """
    if z.shape != post.mu.shape:
        raise ShapeError(f"z shape {z.shape} does not match posterior shape {post.mu.shape}")
    return gaussian_log_density(z, detach(post.mu), detach(post.sigma))


def standard_normal_log_density(z: Tensor) -> Tensor:
    d = z.shape[-1]
    return -0.5 * (z * z).sum(axis=-1) - 0.5 * d * LOG_2PI
