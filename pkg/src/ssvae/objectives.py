"""Training objectives for the SSVAE family and the supervised baseline.

Every objective is returned as a minimization target (the negated bound),
averaged over the rows of the batch. ``LossBreakdown.total`` is the tensor to
backpropagate; the other fields are the signed pieces it was built from:

    labeled:    total = -(reconstruction - kl_z) + alpha * supervised_ce
    unlabeled:  total = -(reconstruction - kl_y - kl_z)

The uniform prior's log p(y) is left out of the labeled bound (a constant
with no gradient).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelParams, TokenBatch, decode_logprob, encode, encode_y
from .stochastic import (
    AnnealSchedule,
    CategoricalPosterior,
    anneal_coeff,
    gumbel_max_sample,
    gumbel_softmax_sample,
    kl_categorical,
    kl_gaussian_standard,
    sample_gaussian_reparam,
    standard_normal_log_density,
    stl_log_q,
    uniform_noise,
)
from .tensor import Tensor

ALPHA_GRID = (1.0, 0.1, 0.01, 0.001)


@dataclass(frozen=True)
class VariantConfig:
    drop_kl: bool = False
    drop_z: bool = False
    alpha: float = 1.0
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)
    tau: float = 1.0
    supervised_only: bool = False
    # "all": dropping KL removes both kl_y and kl_z; "z": only kl_z
    kl_scope: str = "all"
    # "analytic": closed-form Gaussian KL; "stl": single-sample log q - log p with stopped q params
    kl_estimator: str = "analytic"

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.kl_scope not in ("all", "z"):
            raise ValueError(f"unknown kl_scope {self.kl_scope!r}")
        if self.kl_estimator not in ("analytic", "stl"):
            raise ValueError(f"unknown kl_estimator {self.kl_estimator!r}")

    @property
    def name(self) -> str:
        if self.supervised_only:
            return "Supervised"
        dropped = [s for s, on in (("KL", self.drop_kl), ("z", self.drop_z)) if on]
        return "SSVAE" if not dropped else "SSVAE-{" + ", ".join(dropped) + "}"

    @property
    def slug(self) -> str:
        return VARIANT_SLUGS[self.name]


VARIANT_SLUGS = {
    "Supervised": "supervised",
    "SSVAE": "ssvae",
    "SSVAE-{KL}": "ssvae-kl",
    "SSVAE-{z}": "ssvae-z",
    "SSVAE-{KL, z}": "ssvae-kl-z",
}

_VARIANT_FLAGS = {
    "supervised": dict(supervised_only=True),
    "ssvae": dict(),
    "ssvae-kl": dict(drop_kl=True),
    "ssvae-z": dict(drop_z=True),
    "ssvae-kl-z": dict(drop_kl=True, drop_z=True),
}

VARIANTS = tuple(_VARIANT_FLAGS)


def variant(slug: str, **overrides) -> VariantConfig:
    try:
        flags = _VARIANT_FLAGS[slug.lower()]
    except KeyError:
        raise ValueError(f"unknown variant {slug!r}; choose from {', '.join(VARIANTS)}") from None
    return VariantConfig(**{**flags, **overrides})


@dataclass
class LossBreakdown:
    total: Tensor
    reconstruction: Tensor
    kl_z: Tensor
    kl_y: Tensor
    supervised_ce: Tensor
    anneal: float = 0.0
    per_row: np.ndarray | None = None

    def as_floats(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "reconstruction": self.reconstruction.item(),
            "kl_z": self.kl_z.item(),
            "kl_y": self.kl_y.item(),
            "supervised_ce": self.supervised_ce.item(),
            "anneal_coeff": self.anneal,
        }


def _zero() -> Tensor:
    return Tensor(0.0)


def supervised_ce(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    K = logits.shape[-1]
    if labels.shape != logits.shape[:-1] or np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"labels must be class ids in [0, {K}) for each row")
    return -T.pick(T.log_softmax(logits), labels).mean()


def _kl_weights(cfg: VariantConfig, step: int) -> tuple[float, float, float]:
    """(anneal coefficient, weight on kl_y, weight on kl_z)."""
    coeff = anneal_coeff(step, cfg.anneal)
    w_z = 0.0 if cfg.drop_kl else coeff
    w_y = 0.0 if (cfg.drop_kl and cfg.kl_scope == "all") else coeff
    return coeff, w_y, w_z


def _z_terms(post, cfg: VariantConfig, rng: np.random.Generator):
    eps = rng.standard_normal(post.mu.shape)
    z = sample_gaussian_reparam(post, eps)
    if cfg.kl_estimator == "stl":
        kl = stl_log_q(z, post) - standard_normal_log_density(z)
    else:
        kl = kl_gaussian_standard(post)
    return z, kl


def labeled_objective(
    params: ModelParams,
    batch: TokenBatch,
    cfg: VariantConfig,
    step: int,
    rng: np.random.Generator,
    train: bool = True,
    dropout_rate: float = 0.0,
) -> LossBreakdown:
    if batch.labels is None:
        raise ValueError("labeled_objective needs a labeled batch")
    if cfg.supervised_only:
        logits = encode_y(params, batch, train, dropout_rate, rng)
        ce = supervised_ce(logits, batch.labels)
        return LossBreakdown(ce, _zero(), _zero(), _zero(), ce, 0.0)
    logits, post = encode(params, batch, train, dropout_rate, rng)
    ce = supervised_ce(logits, batch.labels)
    coeff, _, w_z = _kl_weights(cfg, step)
    onehot = np.eye(params.arch.num_classes)[batch.labels]
    z, kl_rows = (None, None) if post is None else _z_terms(post, cfg, rng)
    rec_rows = decode_logprob(params, batch, onehot, z, train, dropout_rate, rng)
    recon = rec_rows.mean()
    if kl_rows is not None and w_z > 0:
        kl_z = w_z * kl_rows.mean()
        bound_rows = rec_rows - w_z * kl_rows
        bound = recon - kl_z
    else:
        kl_z = _zero()
        bound_rows = rec_rows
        bound = recon
    total = -bound + cfg.alpha * ce
    return LossBreakdown(total, recon, kl_z, _zero(), ce, coeff, per_row=-bound_rows.data)


def unlabeled_objective(
    params: ModelParams,
    batch: TokenBatch,
    cfg: VariantConfig,
    step: int,
    rng: np.random.Generator,
    train: bool = True,
    dropout_rate: float = 0.0,
    hard_y: bool = False,
) -> LossBreakdown:
    """Negated single-sample bound with y drawn by Gumbel-Softmax.

    ``hard_y`` replaces the relaxed draw with an exact categorical one-hot
    (used by the verification oracles, never for training).
    """
    logits, post = encode(params, batch, train, dropout_rate, rng)
    coeff, w_y, w_z = _kl_weights(cfg, step)
    cat = CategoricalPosterior(logits)
    u = uniform_noise(rng, logits.shape)
    y = gumbel_max_sample(cat, u) if hard_y else gumbel_softmax_sample(cat, cfg.tau, u)
    z, kl_z_rows = (None, None) if post is None else _z_terms(post, cfg, rng)
    rec_rows = decode_logprob(params, batch, y, z, train, dropout_rate, rng)
    recon = rec_rows.mean()
    bound_rows = rec_rows
    kl_y = kl_z = _zero()
    if w_y > 0:
        kl_y_rows = kl_categorical(T.softmax(logits), 1.0 / cat.num_classes, log_q=T.log_softmax(logits))
        kl_y = w_y * kl_y_rows.mean()
        bound_rows = bound_rows - w_y * kl_y_rows
    if kl_z_rows is not None and w_z > 0:
        kl_z = w_z * kl_z_rows.mean()
        bound_rows = bound_rows - w_z * kl_z_rows
    total = -(recon - kl_y - kl_z)
    return LossBreakdown(total, recon, kl_z, kl_y, _zero(), coeff, per_row=-bound_rows.data)


def step_objective(
    params: ModelParams,
    labeled: TokenBatch,
    unlabeled: TokenBatch | None,
    cfg: VariantConfig,
    step: int,
    rng: np.random.Generator,
    train: bool = True,
    dropout_rate: float = 0.0,
) -> tuple[Tensor, LossBreakdown, LossBreakdown | None]:
    """Sum of the labeled and unlabeled objectives (weight 1 each) for one step."""
    lab = labeled_objective(params, labeled, cfg, step, rng, train, dropout_rate)
    if cfg.supervised_only or unlabeled is None:
        return lab.total, lab, None
    unl = unlabeled_objective(params, unlabeled, cfg, step, rng, train, dropout_rate)
    return lab.total + unl.total, lab, unl


# ---------------------------------------------------------------------------
# enumerable toy models


@dataclass
class ToyModel:
    """Discrete latent-variable model with explicit probability tables.

    ``p_x[y, z, x] = p(x | y, z)``, ``q_y[x, y] = q(y | x)``, ``q_z[x, z] = q(z | x)``.
    """

    p_y: np.ndarray
    p_z: np.ndarray
    p_x: np.ndarray
    q_y: np.ndarray
    q_z: np.ndarray

    def __post_init__(self) -> None:
        K, M = len(self.p_y), len(self.p_z)
        if self.p_x.ndim != 3 or self.p_x.shape[:2] != (K, M):
            raise ValueError(f"p_x must have shape ({K}, {M}, X), got {self.p_x.shape}")
        X = self.p_x.shape[2]
        if self.q_y.shape != (X, K) or self.q_z.shape != (X, M):
            raise ValueError("q tables must be indexed by (x, latent)")
        for name in ("p_y", "p_z", "p_x", "q_y", "q_z"):
            table = getattr(self, name)
            if np.any(table < 0) or not np.allclose(table.sum(axis=-1), 1.0, rtol=0, atol=1e-12):
                raise ValueError(f"{name} is not a normalized distribution")


_FLIP_KL = False  # fault injection for the verification suite


def _kl_discrete(q: np.ndarray, p: np.ndarray) -> float:
    mask = q > 0
    return float(np.sum(q[mask] * (np.log(q[mask]) - np.log(p[mask]))))


def elbo_decomposition_check(toy: ToyModel, x: int) -> tuple[float, float, float]:
    """(elbo, log-evidence, posterior KL) of observation ``x``, each by exact enumeration.

    The bound is computed as expected log-likelihood minus prior KLs; the
    evidence by marginalizing the joint; the posterior KL from Bayes-rule
    posterior tables. For a correct model ``elbo == log_evidence - posterior_kl``.
    """
    q_y, q_z = toy.q_y[x], toy.q_z[x]
    lik = toy.p_x[:, :, x]
    q_joint = np.outer(q_y, q_z)
    support = q_joint > 0
    if np.any(support & (lik <= 0)):
        return float("-inf"), float(np.log(np.sum(lik * np.outer(toy.p_y, toy.p_z)))), float("inf")
    expected_ll = float(np.sum(q_joint[support] * np.log(lik[support])))
    prior_kl = _kl_discrete(q_y, toy.p_y) + _kl_discrete(q_z, toy.p_z)
    elbo = expected_ll + prior_kl if _FLIP_KL else expected_ll - prior_kl

    joint = lik * np.outer(toy.p_y, toy.p_z)
    evidence = joint.sum()
    posterior = joint / evidence
    posterior_kl = _kl_discrete(q_joint.ravel(), posterior.ravel())
    return elbo, float(np.log(evidence)), posterior_kl


def random_toy_model(rng: np.random.Generator, K: int = 3, M: int = 4, X: int = 16) -> ToyModel:
    if not (K <= 4 and M <= 4 and X <= 16):
        raise ValueError("toy models are limited to K, M <= 4 and at most 16 outcomes")
    d = lambda *shape: rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])  # noqa: E731
    return ToyModel(d(K), d(M), d(K, M, X), d(X, K), d(X, M))


def factorized_toy_model(rng: np.random.Generator, K: int = 3, M: int = 3, X1: int = 4, X2: int = 4) -> ToyModel:
    """Toy whose exact posterior factorizes, with q set to that posterior.

    x is a pair (x1, x2) flattened to ``x1 * X2 + x2``; x1 depends only on y,
    x2 only on z, so p(y, z | x) = p(y | x1) p(z | x2).
    """
    p_y = rng.dirichlet(np.ones(K))
    p_z = rng.dirichlet(np.ones(M))
    a = rng.dirichlet(np.ones(X1), size=K)
    b = rng.dirichlet(np.ones(X2), size=M)
    p_x = np.einsum("ka,mb->kmab", a, b).reshape(K, M, X1 * X2)
    post_y = a.T * p_y
    post_y /= post_y.sum(axis=1, keepdims=True)
    post_z = b.T * p_z
    post_z /= post_z.sum(axis=1, keepdims=True)
    q_y = np.repeat(post_y, X2, axis=0)
    q_z = np.tile(post_z, (X1, 1))
    return ToyModel(p_y, p_z, p_x, q_y, q_z)


__all__ = [
    "ALPHA_GRID",
    "VariantConfig",
    "VARIANTS",
    "VARIANT_SLUGS",
    "variant",
    "LossBreakdown",
    "supervised_ce",
    "labeled_objective",
    "unlabeled_objective",
    "step_objective",
    "ToyModel",
    "elbo_decomposition_check",
    "random_toy_model",
    "factorized_toy_model",
]
