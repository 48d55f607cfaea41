"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v``; a one-line PASS/FAIL
summary per criterion is printed at the end of the session.
"""

import math
import time

import numpy as np
import pytest
from scipy import stats
from threadpoolctl import threadpool_limits

from ssvae import objectives as O
from ssvae import stochastic as S
from ssvae import verify as V
from ssvae.data import make_splits
from ssvae.harness import DatasetSource, ExperimentConfig, run_matrix, run_speed_bench
from ssvae.stochastic import AnnealSchedule, GaussianPosterior, anneal_coeff
from ssvae.tensor import Tensor, precision
from ssvae.training import ScheduleState, TrainConfig, schedule_update, train, welch_t_test

from conftest import make_prepared

pytestmark = pytest.mark.acceptance


def _report(results):
    for r in results:
        print(r.line())
    bad = [r.line() for r in results if not r.passed]
    assert not bad, "\n".join(bad)


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    results = V.run_verify("gradcheck", seed=0)
    elapsed = time.perf_counter() - t0
    _report(results)
    assert len([r for r in results if r.name.startswith("objective[")]) == 5
    rng, lab, unl, vocab, _ = V.toy_setup(0)
    assert len(lab) == 2 and len(unl) == 2 and lab.lengths.max() <= 5 and vocab <= 20
    assert elapsed < 60, f"gradient checks took {elapsed:.1f}s"


def test_criterion_2_elbo_identity():
    t0 = time.perf_counter()
    results = V.run_verify("elbo", seed=0)
    elapsed = time.perf_counter() - t0
    _report(results)
    assert elapsed < 1.0, f"identity checks took {elapsed:.2f}s"


def test_criterion_3_kl_closed_forms():
    rng = np.random.default_rng(3)
    worst_gauss = 0.0
    for mu, sigma in V.gaussian_kl_grid(20, seed=3):
        with precision("float64"):
            kl = S.kl_gaussian_standard(GaussianPosterior(Tensor(mu[None]), Tensor(sigma[None]))).item()
        mc, se = V.gaussian_kl_mc(mu, sigma, 20000, rng)
        assert kl >= 0
        worst_gauss = max(worst_gauss, abs(kl - mc) / se)

    worst_sum, worst_mc = 0.0, 0.0
    for _ in range(20):
        k = int(rng.integers(2, 7))
        q, p = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
        with precision("float64"):
            kl = S.kl_categorical(Tensor(q[None]), p).item()
        assert kl >= 0
        worst_sum = max(worst_sum, abs(kl - float(np.sum(q * np.log(q / p)))))
        draws = rng.choice(k, size=20000, p=q)
        d = np.log(q[draws] / p[draws])
        worst_mc = max(worst_mc, abs(kl - d.mean()) / (d.std(ddof=1) / math.sqrt(d.size)))

    with precision("float64"):
        zero_g = S.kl_gaussian_standard(GaussianPosterior(Tensor(np.zeros((1, 4))), Tensor(np.ones((1, 4))))).item()
        q = rng.dirichlet(np.ones(5))
        zero_c = S.kl_categorical(Tensor(q[None]), q).item()
    print(f"gaussian max|analytic-mc|/se={worst_gauss:.2f}  categorical max|err| vs sum={worst_sum:.1e}"
          f"  vs mc={worst_mc:.2f}se  at equality: {zero_g:.1e}, {zero_c:.1e}")
    assert worst_gauss < 3 and worst_mc < 3 and worst_sum < 1e-12
    assert abs(zero_g) < 1e-8 and abs(zero_c) < 1e-8


def test_criterion_4_gumbel_softmax():
    logits = np.array([1.0, 0.2, -0.5, 0.8, -1.3])
    n = 100_000
    with precision("float64"):
        counts = V.gumbel_frequencies(logits, n, 1e-4, np.random.default_rng(4))
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    dev = np.abs(counts / n - probs)
    p_chi = stats.chisquare(counts, probs * n).pvalue
    print(f"max|freq-p|={dev.max():.4f}  chi2 p={p_chi:.3f}")
    assert np.all(dev <= 0.02)
    assert p_chi > 0.01


def test_criterion_5_sticking_the_landing():
    g_mu, g_sigma = V.conjugate_stl_gradients(n=10000, stl=True, seed=5)
    h_mu, h_sigma = V.conjugate_stl_gradients(n=10000, stl=False, seed=5)
    stl_max = max(np.abs(g_mu).max(), np.abs(g_sigma).max())
    var_stl = np.var(np.concatenate([g_mu, g_sigma], 1), axis=0)
    var_full = np.var(np.concatenate([h_mu, h_sigma], 1), axis=0)
    print(f"STL max|grad|={stl_max:.2e}  variance full={var_full.sum():.3e} stl={var_stl.sum():.3e}")
    assert stl_max < 1e-6
    assert var_full.sum() > var_stl.sum()
    assert np.all(var_full > var_stl)


# desk-sized stand-in for a news-topic corpus: 5K vocabulary, ~40 tokens per row
DESK = DatasetSource("desk", synthetic=True, classes=4, vocab=5000, purity=0.8, n_labeled=500,
                     n_unlabeled=1000, n_test=100, mean_length=40.0, std_length=10.0)


def test_criterion_6_speed(tmp_path):
    cfg = ExperimentConfig(datasets=[DESK], variants=("ssvae", "ssvae-z", "ssvae-kl-z"), split_size=100,
                           unlabeled_size=1000, batch_size=32, outdir=str(tmp_path))
    t0 = time.perf_counter()
    rows = run_speed_bench(cfg, n=30, warmup=3)
    elapsed = time.perf_counter() - t0
    by = {r.variant: r for r in rows}
    for r in rows:
        print(f"{r.variant:14s} {r.ms_mean:8.1f} ms/step  ratio={r.ratio:.3f}  params={r.params}"
              f"  (published AGNEWS ratio range 0.742-0.867, context only)")
    base = by["SSVAE"]
    for name in ("SSVAE-{z}", "SSVAE-{KL, z}"):
        assert by[name].ratio < 1.0
        assert by[name].params < base.params
    assert elapsed < 300, f"speed bench took {elapsed:.0f}s"


PARITY = DatasetSource("synth", synthetic=True, classes=4, vocab=100, purity=0.8, n_labeled=200,
                       n_unlabeled=5000, n_test=2000)


def test_criterion_7_accuracy_parity(tmp_path):
    cfg = ExperimentConfig(datasets=[PARITY], fractions=(1.0,), rotations=5, alpha_grid=(1.0, 0.1),
                           embed_dim=32, enc_hidden=32, dec_hidden=64, z_dim=16, anneal_flat=25,
                           anneal_ramp=50, max_epochs=40, outdir=str(tmp_path))
    t0 = time.perf_counter()
    table = run_matrix(cfg, workers=1)
    elapsed = time.perf_counter() - t0
    col = table.columns()[0]
    means = {}
    for name, cells in table.grid():
        cell = cells[0]
        assert cell is not None and cell.n == 5, f"{name}: incomplete runs"
        means[name] = cell.mean
        print(f"{name:14s} {cell.text()}")
    semi = {k: v for k, v in means.items() if k != "Supervised"}
    assert len(semi) == 4 and col[0] == "synth"
    assert min(semi.values()) >= 0.90
    assert max(semi.values()) - min(semi.values()) <= 0.03
    assert all(v >= means["Supervised"] - 0.02 for v in semi.values())
    assert elapsed < 1200, f"matrix took {elapsed:.0f}s"


def test_criterion_8_protocol():
    sp = make_splits(5000, 20000, seed=8, split_size=1000)
    assert len(sp.dev) == 5 and all(len(d) == 1000 for d in sp.dev)
    assert len(np.unique(np.concatenate(sp.dev))) == 5000
    for r in range(5):
        tr, dev = sp.rotation(r)
        assert len(tr) == 4 * len(dev) and not set(tr) & set(dev)
    # scaled-down pools keep the same 4:1 rotation
    small = make_splits(200, 5000, seed=8, split_size=1000)
    assert all(len(d) == 40 for d in small.dev)
    assert all(len(small.rotation(r)[0]) == 160 for r in range(5))

    sched = AnnealSchedule()
    assert [anneal_coeff(s, sched) for s in (0, 1500, 3000)] == [0.0, 0.0, 0.0]
    assert anneal_coeff(4500, sched) == 0.5
    assert anneal_coeff(6000, sched) == 1.0 and anneal_coeff(9000, sched) == 1.0

    st = ScheduleState(lr=4e-3)
    schedule_update(st, 0.9)
    out = [schedule_update(st, 0.9) for _ in range(8)]
    assert [lr for lr, _ in out] == [4e-3] * 3 + [1e-3] * 5
    assert [stop for _, stop in out] == [False] * 7 + [True]


def test_criterion_9_determinism():
    data = make_prepared(n_train=48, n_unl=64)
    cfg = TrainConfig(variant=O.variant("ssvae", anneal=AnnealSchedule(2, 4)), embed_dim=8, enc_hidden=6,
                      dec_hidden=8, z_dim=3, batch_size=16, max_epochs=3, seed=9)
    with threadpool_limits(1):
        a, b = train(cfg, data), train(cfg, data)
    assert a.dev_accuracies == b.dev_accuracies
    assert a.without_timing() == b.without_timing()


def _abs_t(x, y):
    se = np.sqrt(x.var(-1, ddof=1) / x.shape[-1] + y.var(-1, ddof=1) / y.shape[-1])
    return np.abs(x.mean(-1) - y.mean(-1)) / se


def _permutation_p(a, b, n, rng):
    pooled = np.concatenate([a, b])
    shuffled = pooled[np.argsort(rng.random((n, pooled.size)), axis=1)]
    null = _abs_t(shuffled[:, : a.size], shuffled[:, a.size:])
    return float(np.mean(null >= _abs_t(a, b) - 1e-12))


def test_criterion_10_welch_vs_permutation():
    # accuracy-like samples: five runs per method, mean gap up to four points
    rng = np.random.default_rng(0)
    errors = []
    for case in range(10):
        a = rng.normal(0.80, 0.02, 5)
        b = rng.normal(0.80 + rng.uniform(0, 0.04), 0.02, 5)
        p_welch, p_perm = welch_t_test(a, b), _permutation_p(a, b, 100_000, rng)
        errors.append(abs(p_welch - p_perm))
        print(f"case {case}: welch={p_welch:.4f} permutation={p_perm:.4f} diff={errors[-1]:.4f}")
    assert max(errors) <= 0.03, f"max |welch - permutation| = {max(errors):.4f}"
