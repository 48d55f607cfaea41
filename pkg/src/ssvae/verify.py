"""Self-checks run against analytically solvable instances.

Each check returns a :class:`CheckResult` with the measured margin so a
failing run says by how much it missed. Fault injection hooks deliberately
break one component to show the matching suite catches it.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from scipy import stats

from . import objectives as O
from . import stochastic as S
from . import tensor as T
from .model import Architecture, ModelParams, TokenBatch
from .objectives import step_objective
from .stochastic import AnnealSchedule, CategoricalPosterior, GaussianPosterior
from .tensor import Tape, Tensor, finite_difference_check, precision

GRAD_TOL = 1e-4
ELBO_TOL = 1e-10
SUITES = ("gradcheck", "elbo", "estimators")


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.suite}.{self.name}  {self.detail}"


# ---------------------------------------------------------------------------
# gradient checks


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One scalar test function per primitive, with a random point."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    row = rng.normal(size=(4,))
    w = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    ids = np.array([[1, 0, 2], [2, 2, 3]])
    table = rng.normal(size=(5, 3))
    wt = rng.normal(size=(2, 3, 3))
    pick_idx = np.array([1, 3, 0])

    def weighted(fn):
        return lambda *xs: T.sum_(fn(*xs) * w)

    return {
        "add": (lambda x, y: T.sum_(T.add(x, y) * w), [a, row]),
        "sub": (lambda x, y: T.sum_(T.sub(x, y) * w), [a, row]),
        "mul": (lambda x, y: T.sum_(T.mul(x, y) * w), [a, b]),
        "matmul": (lambda x, y: T.sum_(T.matmul(x, y) * w[:, :2]), [a, rng.normal(size=(4, 2))]),
        "concat": (lambda x, y: T.sum_(T.concat([x, y], axis=-1) * np.concatenate([w, w], -1)), [a, b]),
        "slice": (lambda x: T.sum_(T.slice_(x, (slice(None), slice(1, 3))) * w[:, :2]), [a]),
        "reshape": (lambda x: T.sum_(T.reshape(x, (4, 3)) * w.reshape(4, 3)), [a]),
        "exp": (weighted(T.exp), [a]),
        "log": (weighted(T.log), [pos]),
        "tanh": (weighted(T.tanh), [a]),
        "sigmoid": (weighted(T.sigmoid), [a]),
        "softplus": (weighted(T.softplus), [a]),
        "softmax": (weighted(T.softmax), [a]),
        "log_softmax": (weighted(T.log_softmax), [a]),
        "sum": (lambda x: T.sum_(T.sum_(x, axis=0) * row), [a]),
        "mean": (lambda x: T.sum_(T.mean(x, axis=-1) * w[:, 0]), [a]),
        "gather_rows": (lambda t: T.sum_(T.gather_rows(t, ids, padding_idx=0) * wt), [table]),
        "pick": (lambda x: T.sum_(T.pick(x, pick_idx) * w[:, 0]), [a]),
    }


def toy_setup(seed: int = 0, vocab: int = 12, classes: int = 3):
    """Tiny architecture and batches for end-to-end gradient checks (2 rows, <= 5 tokens)."""
    rng = np.random.default_rng(seed)
    lab = TokenBatch.from_rows([rng.integers(4, vocab, size=5), rng.integers(4, vocab, size=3)], np.array([0, 2]))
    unl = TokenBatch.from_rows([rng.integers(4, vocab, size=4), rng.integers(4, vocab, size=2)])
    return rng, lab, unl, vocab, classes


def objective_gradcheck(slug: str, seed: int = 0, max_coords: int | None = 4, **overrides):
    """Finite-difference check of the full per-step objective of one variant."""
    rng, lab, unl, vocab, classes = toy_setup(seed)
    cfg = O.variant(slug, anneal=AnnealSchedule(0, 10), alpha=0.5, **overrides)
    arch = Architecture(vocab, classes, embed_dim=4, enc_hidden=3, dec_hidden=4, z_dim=2,
                        drop_z=cfg.drop_z, supervised_only=cfg.supervised_only)
    with precision("float64"):
        params = ModelParams.initialize(arch, rng)
    names = params.names()

    def f(*leaves):
        p = ModelParams(arch, dict(zip(names, leaves)))
        total, _, _ = step_objective(p, lab, None if cfg.supervised_only else unl, cfg, 5,
                                     np.random.default_rng(seed + 1), train=True, dropout_rate=0.3)
        return total

    # wide 6th-order stencil: LSTM weight gradients here are tiny, so roundoff swamps narrow steps
    return finite_difference_check(f, [params[n] for n in names], eps=1e-2, order=6, max_coords=max_coords, seed=seed)


def suite_gradcheck(seed: int = 0) -> list[CheckResult]:
    results = []
    rng = np.random.default_rng(seed)
    for kind, (fn, point) in _primitive_cases(rng).items():
        with precision("float64"):
            res = finite_difference_check(fn, [Tensor(p) for p in point])
        ok = res.max_error < GRAD_TOL and not res.nonfinite
        results.append(CheckResult("gradcheck", kind, ok, f"max_rel={res.max_error:.2e} (< {GRAD_TOL:g}, {res.n_checked} coords)"))
    for slug in O.VARIANTS:
        res = objective_gradcheck(slug, seed)
        ok = res.max_error < GRAD_TOL and not res.nonfinite
        results.append(CheckResult("gradcheck", f"objective[{slug}]", ok,
                                   f"max_rel={res.max_error:.2e} (< {GRAD_TOL:g}, {res.n_checked} coords)"))
    return results


# ---------------------------------------------------------------------------
# ELBO identities


def suite_elbo(seed: int = 0, n_models: int = 10) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_gap, worst_kl = 0.0, 0.0
    for _ in range(n_models):
        K, M = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        toy = O.random_toy_model(rng, K=K, M=M, X=16)
        for x in range(16):
            elbo, ev, kl = O.elbo_decomposition_check(toy, x)
            worst_gap = max(worst_gap, abs(elbo - (ev - kl)))
            worst_kl = min(worst_kl, kl)
    exact_gap = 0.0
    for _ in range(n_models):
        toy = O.factorized_toy_model(rng, K=3, M=3, X1=4, X2=4)
        for x in range(16):
            elbo, ev, _ = O.elbo_decomposition_check(toy, x)
            exact_gap = max(exact_gap, abs(elbo - ev))
    return [
        CheckResult("elbo", "decomposition", worst_gap < ELBO_TOL, f"max|elbo-(log p(x)-KL)|={worst_gap:.2e} (< {ELBO_TOL:g})"),
        CheckResult("elbo", "exact-posterior", exact_gap < ELBO_TOL, f"max|elbo-log p(x)|={exact_gap:.2e} (< {ELBO_TOL:g})"),
        CheckResult("elbo", "posterior-kl-nonnegative", worst_kl > -1e-12, f"min KL={worst_kl:.2e} (>= 0)"),
    ]


# ---------------------------------------------------------------------------
# estimators


def gaussian_kl_grid(n_points: int = 20, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(seed)
    return [(rng.normal(0, 1.5, size=3), rng.uniform(0.2, 2.5, size=3)) for _ in range(n_points)]


def gaussian_kl_mc(mu: np.ndarray, sigma: np.ndarray, n: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo E_q[log q - log p] against N(0, I) with its standard error."""
    z = mu + sigma * rng.standard_normal((n, mu.size))
    log_q = stats.norm.logpdf(z, mu, sigma).sum(axis=1)
    log_p = stats.norm.logpdf(z).sum(axis=1)
    d = log_q - log_p
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(n))


def gumbel_frequencies(logits: np.ndarray, n: int, tau: float, rng: np.random.Generator) -> np.ndarray:
    post = CategoricalPosterior(Tensor(np.tile(logits, (n, 1))))
    sample = S.gumbel_softmax_sample(post, tau, S.uniform_noise(rng, (n, logits.size)))
    return np.bincount(sample.data.argmax(axis=1), minlength=logits.size)


def conjugate_stl_gradients(
    n: int = 10000, d: int = 3, noise_std: float = 0.7, seed: int = 0, stl: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gradients of ``log p(x, z) - log q(z)`` w.r.t. (mu, sigma).

    Prior N(0, I), likelihood N(x; z, s^2 I), and q set to the exact
    posterior. Each of the ``n`` rows carries its own copy of the
    variational parameters, so row ``i`` of the gradient is sample ``i``'s.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=d)
    post_var = noise_std ** 2 / (1.0 + noise_std ** 2)
    post_mean = x / (1.0 + noise_std ** 2)
    with precision("float64"):
        mu = Tensor(np.tile(post_mean, (n, 1)), requires_grad=True)
        sigma = Tensor(np.full((n, d), math.sqrt(post_var)), requires_grad=True)
        eps = rng.standard_normal((n, d))
        with Tape() as tape:
            q = GaussianPosterior(mu, sigma)
            z = S.sample_gaussian_reparam(q, eps)
            log_lik = S.gaussian_log_density(Tensor(np.tile(x, (n, 1))), z, np.full((n, d), noise_std))
            log_q = S.stl_log_q(z, q) if stl else S.gaussian_log_density(z, mu, sigma)
            total = T.sum_(log_lik + S.standard_normal_log_density(z) - log_q)
        g = tape.backward(total)
        return g.array(mu), g.array(sigma)


def suite_estimators(seed: int = 0) -> list[CheckResult]:
    results = []
    rng = np.random.default_rng(seed)

    # Gaussian KL against Monte Carlo
    worst = 0.0
    for mu, sigma in gaussian_kl_grid(20, seed):
        with precision("float64"):
            kl = S.kl_gaussian_standard(GaussianPosterior(Tensor(mu[None]), Tensor(sigma[None]))).item()
        mc, se = gaussian_kl_mc(mu, sigma, 20000, rng)
        worst = max(worst, abs(kl - mc) / se)
    results.append(CheckResult("estimators", "kl-gaussian-vs-mc", worst < 3.0, f"max|analytic-mc|/se={worst:.2f} (< 3)"))

    # categorical KL against direct summation
    worst = 0.0
    min_kl = math.inf
    zero_err = 0.0
    for _ in range(20):
        k = int(rng.integers(2, 7))
        q = rng.dirichlet(np.ones(k))
        p = rng.dirichlet(np.ones(k))
        with precision("float64"):
            kl = S.kl_categorical(Tensor(q[None]), p).item()
            self_kl = S.kl_categorical(Tensor(q[None]), q).item()
        worst = max(worst, abs(kl - float(np.sum(q * np.log(q / p)))))
        min_kl = min(min_kl, kl)
        zero_err = max(zero_err, abs(self_kl))
    ok = worst < 1e-12 and min_kl >= 0 and zero_err < 1e-8
    results.append(CheckResult("estimators", "kl-categorical-vs-sum", ok,
                               f"max|err|={worst:.1e}, min KL={min_kl:.2e}, max KL(q||q)={zero_err:.1e}"))

    # Gumbel-softmax at low temperature behaves like an exact categorical draw
    logits = np.array([1.0, 0.2, -0.5, 0.8])
    n = 100_000
    counts = gumbel_frequencies(logits, n, 1e-4, rng)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    dev = float(np.max(np.abs(counts / n - probs)))
    p_chi = float(stats.chisquare(counts, probs * n).pvalue)
    results.append(CheckResult("estimators", "gumbel-frequencies", dev <= 0.02 and p_chi > 0.01,
                               f"max|freq-p|={dev:.4f} (<= 0.02), chi2 p={p_chi:.3f} (> 0.01)"))

    # sticking-the-landing: zero gradient at the exact posterior, lower variance than the full estimator
    g_mu, g_sigma = conjugate_stl_gradients(stl=True, seed=seed)
    stl_max = float(max(np.abs(g_mu).max(), np.abs(g_sigma).max()))
    h_mu, h_sigma = conjugate_stl_gradients(stl=False, seed=seed)
    var_stl = float(np.var(np.concatenate([g_mu, g_sigma], 1), axis=0).sum())
    var_full = float(np.var(np.concatenate([h_mu, h_sigma], 1), axis=0).sum())
    results.append(CheckResult("estimators", "stl-zero-at-posterior", stl_max < 1e-6, f"max|grad|={stl_max:.2e} (< 1e-6)"))
    results.append(CheckResult("estimators", "stl-variance", var_full > var_stl,
                               f"var full={var_full:.3e} > var stl={var_stl:.3e}"))
    return results


# ---------------------------------------------------------------------------
# driver


def run_verify(suite: str = "all", seed: int = 0) -> list[CheckResult]:
    if suite not in SUITES + ("all",):
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES + ('all',))}")
    chosen = SUITES if suite == "all" else (suite,)
    runners = {"gradcheck": suite_gradcheck, "elbo": suite_elbo, "estimators": suite_estimators}
    results = []
    with precision("float64"):
        for name in chosen:
            results.extend(runners[name](seed))
    return results


def all_passed(results: list[CheckResult]) -> bool:
    return all(r.passed for r in results)


class _BrokenTanh:
    @staticmethod
    def vjp(g, ctx, needs):
        return (g * (1.0 - ctx),)  # missing square


FAULTS = ("tanh-vjp", "kl-sign", "gumbel-sign")


@contextlib.contextmanager
def inject_fault(name: str) -> Iterator[None]:
    """Temporarily break one component: ``tanh-vjp``, ``kl-sign`` or ``gumbel-sign``."""
    if name == "tanh-vjp":
        saved = T.PRIMITIVES["tanh"]
        T.PRIMITIVES["tanh"] = T.Primitive(saved.forward, _BrokenTanh.vjp)
        try:
            yield
        finally:
            T.PRIMITIVES["tanh"] = saved
    elif name == "kl-sign":
        O._FLIP_KL = True
        try:
            yield
        finally:
            O._FLIP_KL = False
    elif name == "gumbel-sign":
        S._GUMBEL_SIGN = -1.0
        try:
            yield
        finally:
            S._GUMBEL_SIGN = 1.0
    else:
        raise ValueError(f"unknown fault {name!r}; choose from {', '.join(FAULTS)}")


__all__ = [
    "CheckResult",
    "run_verify",
    "all_passed",
    "inject_fault",
    "FAULTS",
    "SUITES",
    "suite_gradcheck",
    "suite_elbo",
    "suite_estimators",
    "objective_gradcheck",
    "conjugate_stl_gradients",
    "gaussian_kl_mc",
    "gumbel_frequencies",
]
