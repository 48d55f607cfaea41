import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import make_prepared
from scipy import stats

from ssvae import objectives as O
from ssvae.stochastic import AnnealSchedule
from ssvae.training import (
    AdamState,
    BatchStream,
    NonFiniteGradient,
    RunReport,
    ScheduleState,
    TrainConfig,
    Trainer,
    adam_step,
    schedule_update,
    sweep_alpha,
    time_iterations,
    train,
    welch_t_test,
)

TINY = dict(embed_dim=8, enc_hidden=6, dec_hidden=8, z_dim=3, batch_size=16, dropout=0.1, max_len=20)


def cfg(slug="ssvae", **kw):
    variant = O.variant(slug, anneal=AnnealSchedule(2, 4), alpha=kw.pop("alpha", 1.0))
    return TrainConfig(variant=variant, **{**TINY, **kw})


# -- Adam


def test_adam_first_step_example():
    st = AdamState(lr=4e-3)
    new = adam_step(st, {"w": np.array([0.0])}, {"w": np.array([1.0])})
    assert new["w"][0] == pytest.approx(-4e-3 / (1 + 1e-8), rel=1e-12)
    assert st.step == 1


def test_adam_zero_gradient_only_decays_moments():
    st = AdamState()
    p = {"w": np.array([0.5, -1.0])}
    p = adam_step(st, p, {"w": np.array([1.0, 2.0])})
    m, v = st.m["w"].copy(), st.v["w"].copy()
    same = adam_step(st, p, {"w": np.zeros(2)})
    # the first moment still moves the weights; zero moments leave them put
    st0 = AdamState()
    fixed = adam_step(st0, {"w": np.array([0.3])}, {"w": np.array([0.0])})
    assert fixed["w"][0] == 0.3
    np.testing.assert_allclose(st.m["w"], 0.9 * m)
    np.testing.assert_allclose(st.v["w"], 0.999 * v)
    assert same["w"].shape == (2,)


def _reference_adam(w, grad, lr, n, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, n + 1):
        g = grad(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


def test_adam_descends_quadratic():
    st = AdamState(lr=1e-2)
    p = {"w": np.array([1.0])}
    for _ in range(100):
        p = adam_step(st, p, {"w": 2 * p["w"]})
    assert abs(p["w"][0]) < 0.5
    assert p["w"][0] == pytest.approx(_reference_adam(1.0, lambda w: 2 * w, 1e-2, 100), rel=1e-10)


def test_adam_rejects_nonfinite_without_touching_state():
    st = AdamState()
    with pytest.raises(NonFiniteGradient) as err:
        adam_step(st, {"a": np.zeros(2), "b": np.zeros(1)}, {"a": np.array([1.0, np.nan]), "b": np.ones(1)})
    assert err.value.names == ["a"]
    assert st.step == 0 and not st.m


def test_adam_keeps_dtype():
    new = adam_step(AdamState(), {"w": np.ones(3, np.float32)}, {"w": np.ones(3)})
    assert new["w"].dtype == np.float32


# -- plateau schedule


def test_schedule_never_decays_while_improving():
    st = ScheduleState(lr=4e-3)
    for acc in np.linspace(0.8, 0.95, 20):
        lr, stop = schedule_update(st, float(acc))
        assert lr == 4e-3 and not stop


def test_schedule_decay_then_stop():
    st = ScheduleState(lr=4e-3)
    schedule_update(st, 0.7)
    out = [schedule_update(st, 0.7) for _ in range(8)]
    assert [lr for lr, _ in out[:3]] == [4e-3] * 3
    assert out[3] == (1e-3, False)
    assert [s for _, s in out] == [False] * 7 + [True]
    assert out[-1][0] == 1e-3


def test_schedule_improvement_resets_patience():
    st = ScheduleState(lr=1.0)
    for acc in (0.5, 0.5, 0.5, 0.6, 0.6, 0.6, 0.6):
        lr, _ = schedule_update(st, acc)
    assert lr == 1.0
    lr, _ = schedule_update(st, 0.6)
    assert lr == 0.25


# -- batch streams


def test_batch_stream_covers_each_pass(prepared):
    data = prepared()
    s = BatchStream(data.train, 16, seed=0, stream_id=1)
    seen = [r.tobytes() for k in range(s.per_pass) for r in _rows(s.batch(k))]
    assert sorted(seen) == sorted(r.tobytes() for r in data.train.rows)


def test_batch_stream_indexing_is_stateless(prepared):
    data = prepared()
    a, b = BatchStream(data.train, 16, 3, 1), BatchStream(data.train, 16, 3, 1)
    later = a.batch(7).ids
    assert np.array_equal(b.batch(7).ids, later)


def _rows(batch):
    return [batch.ids[i, : batch.lengths[i]] for i in range(len(batch))]


# -- training runs


def test_rejects_vocab_mismatch(prepared):
    data = prepared()
    data.dev.rows[0] = np.array([len(data.vocab) + 5])
    with pytest.raises(ValueError):
        Trainer(cfg(), data)


def test_rejects_unlabeled_test_split(prepared):
    data = prepared()
    data.test.labels = None
    with pytest.raises(ValueError):
        Trainer(cfg(), data)


def test_supervised_reaches_separable_accuracy(prepared):
    data = prepared(purity=1.0, n_train=120)
    rep = train(cfg("supervised", max_epochs=20, lr=1e-2, dropout=0.0), data)
    assert max(rep.dev_accuracies) >= 0.95
    assert rep.test_accuracy >= 0.9


def test_seeded_rerun_is_bitwise_identical(prepared, tmp_path):
    data = prepared()
    c = cfg("ssvae", max_epochs=3)
    a = train(c, data, tmp_path / "a")
    b = train(c, data, tmp_path / "b")
    assert a.without_timing() == b.without_timing()
    assert (tmp_path / "a" / "steps.csv").read_bytes() == (tmp_path / "b" / "steps.csv").read_bytes()


def test_checkpoint_resume_is_bitwise(prepared, tmp_path):
    data = prepared()
    c = cfg("ssvae", max_epochs=4)
    full = Trainer(c, data)
    full.run_epoch()
    full.save(tmp_path / "ckpt")
    later = [full.train_step() for _ in range(6)]
    resumed = Trainer.load(tmp_path / "ckpt", c, data)
    assert resumed.step == full.step - 6
    assert [resumed.train_step() for _ in range(6)] == later
    for k, v in full.params.arrays().items():
        assert resumed.params.arrays()[k].tobytes() == v.tobytes()


def test_variants_share_components_at_step_zero(prepared):
    data = prepared()
    out = {s: Trainer(cfg(s), data).train_step() for s in O.VARIANTS}
    ce = {out[s][0]["supervised_ce"] for s in O.VARIANTS}
    assert len(ce) == 1
    # same architecture and noise: only KL terms may differ
    for a, b in (("ssvae", "ssvae-kl"), ("ssvae-z", "ssvae-kl-z")):
        for part in (0, 1):
            assert out[a][part]["reconstruction"] == out[b][part]["reconstruction"]


def test_nonfinite_gradient_skips_step(prepared, monkeypatch):
    import ssvae.training as TR

    data = prepared()
    tr = Trainer(cfg("supervised"), data)
    before = {k: v.copy() for k, v in tr.params.arrays().items()}

    def boom(state, params, grads):
        raise NonFiniteGradient(["embedding"])

    monkeypatch.setattr(TR, "adam_step", boom)
    tr.train_step()
    assert tr.skipped == 1 and tr.step == 1
    for k, v in tr.params.arrays().items():
        assert np.array_equal(v, before[k])


def test_report_csv_round_trip(prepared):
    rep = train(cfg("ssvae-z", max_epochs=2), prepared())
    back = RunReport.from_row(rep.to_row())
    assert back.without_timing() == rep.without_timing()
    assert back.ms_mean == rep.ms_mean


def test_alpha_sweep_returns_dev_maximizer(prepared):
    data = prepared()
    best, runs = sweep_alpha(cfg("ssvae-kl-z", max_epochs=2), data, grid=(1.0, 0.1, 0.01, 0.001))
    assert [r.alpha for r in runs] == [1.0, 0.1, 0.01, 0.001]
    top = max(r.best_dev for r in runs)
    assert best.best_dev == top
    assert best is next(r for r in runs if r.best_dev == top)


def test_large_alpha_wins_when_unlabeled_is_noise(prepared):
    data = prepared(purity=0.9, n_train=90, n_dev=60, noise_unlabeled=True, seed=4)
    runs = {a: train(cfg("ssvae-kl-z", alpha=a, max_epochs=8, lr=1e-2), data) for a in (1.0, 0.001)}
    assert runs[1.0].best_dev >= runs[0.001].best_dev


def test_epoch_unit_unlabeled(prepared):
    data = prepared()
    tr = Trainer(cfg("ssvae", epoch_unit="unlabeled"), data)
    assert tr.steps_per_epoch == math.ceil(len(data.unlabeled) / 16)
    assert Trainer(cfg("ssvae"), data).steps_per_epoch == math.ceil(len(data.train) / 16)


# -- timing


def test_timing_needs_thirty_iterations(prepared):
    with pytest.raises(ValueError):
        time_iterations(cfg(), prepared(), n=29)


def test_timing_self_ratio_near_one(prepared):
    data = prepared()
    mean, std, ratio = time_iterations(cfg(), data, n=30, warmup=3, reference=cfg())
    assert mean > 0 and std >= 0
    assert 0.7 < ratio < 1.3


# -- Welch test


def test_welch_identical_samples():
    assert welch_t_test([0.8, 0.82, 0.81], [0.8, 0.82, 0.81]) == pytest.approx(1.0)
    assert welch_t_test([0.5] * 5, [0.5] * 5) == 1.0


def test_welch_zero_variance_different_means():
    assert welch_t_test([0.0] * 5, [1.0] * 5) == 0.0


def test_welch_separated_with_jitter():
    rng = np.random.default_rng(0)
    assert welch_t_test(rng.normal(0, 1e-3, 5), 1 + rng.normal(0, 1e-3, 5)) < 1e-6


def test_welch_matches_scipy():
    rng = np.random.default_rng(1)
    a, b = rng.normal(0.8, 0.02, 5), rng.normal(0.82, 0.05, 5)
    assert welch_t_test(a, b) == pytest.approx(stats.ttest_ind(a, b, equal_var=False).pvalue, rel=1e-10)


def test_welch_too_few_values():
    with pytest.raises(ValueError):
        welch_t_test([1.0], [1.0, 2.0])


def test_report_without_timing_drops_only_timing():
    r = RunReport("SSVAE", "d", 1.0, 0.1, 0)
    assert set(r.without_timing()) == set(vars(r)) - {"ms_mean", "ms_std"}


def test_trainconfig_architecture():
    arch = replace(cfg("ssvae-z"), embed_dim=10).architecture(50, 4)
    assert arch.drop_z and arch.embed_dim == 10 and arch.vocab_size == 50
