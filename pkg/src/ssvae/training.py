"""Optimization loop, timing instrumentation and the variant significance test."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from .data import EncodedSet, Vocabulary
from .model import Architecture, ModelParams, TokenBatch, accuracy, load_arrays, save_arrays
from .objectives import ALPHA_GRID, LossBreakdown, VariantConfig, step_objective
from .tensor import Tape, precision

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Adam


class NonFiniteGradient(FloatingPointError):
    def __init__(self, names: list[str]) -> None:
        super().__init__(f"non-finite gradient in {', '.join(names)}")
        self.names = names


@dataclass
class AdamState:
    lr: float = 4e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays.

    Raises :class:`NonFiniteGradient` (leaving ``state`` untouched) when any
    gradient holds inf or nan.
    """
    bad = [k for k in params if not np.all(np.isfinite(grads[k]))]
    if bad:
        raise NonFiniteGradient(bad)
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise ValueError(f"gradient shape {grads[k].shape} does not match parameter {k} {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    new = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * (g * g) if v is None else b2 * v + (1.0 - b2) * (g * g)
        state.m[k], state.v[k] = m, v
        update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        new[k] = (p - update).astype(p.dtype, copy=False)
    return new


# ---------------------------------------------------------------------------
# plateau schedule


@dataclass
class ScheduleState:
    lr: float = 4e-3
    best: float = -math.inf
    since: int = 0
    lr_patience: int = 4
    stop_patience: int = 8
    decay: float = 4.0


def schedule_update(state: ScheduleState, dev_accuracy: float) -> tuple[float, bool]:
    """Divide the learning rate after ``lr_patience`` flat epochs; stop after ``stop_patience``."""
    if dev_accuracy > state.best:
        state.best = dev_accuracy
        state.since = 0
    else:
        state.since += 1
        if state.since == state.lr_patience:
            state.lr /= state.decay
    return state.lr, state.since >= state.stop_patience


# ---------------------------------------------------------------------------
# runs


@dataclass
class TrainConfig:
    variant: VariantConfig = field(default_factory=VariantConfig)
    embed_dim: int = 300
    enc_hidden: int = 100
    dec_hidden: int = 200
    z_dim: int = 32
    batch_size: int = 32
    unlabeled_batch_size: int | None = None
    lr: float = 4e-3
    dropout: float = 0.5
    max_epochs: int = 100
    max_len: int = 400
    seed: int = 0
    lr_patience: int = 4
    stop_patience: int = 8
    lr_decay: float = 4.0
    precision: str = "float32"
    # "labeled": one epoch is a pass over the labeled set; "unlabeled": over the unlabeled set
    epoch_unit: str = "labeled"
    eval_batch_size: int = 256

    def architecture(self, vocab_size: int, num_classes: int) -> Architecture:
        return Architecture(
            vocab_size=vocab_size,
            num_classes=num_classes,
            embed_dim=self.embed_dim,
            enc_hidden=self.enc_hidden,
            dec_hidden=self.dec_hidden,
            z_dim=self.z_dim,
            drop_z=self.variant.drop_z,
            supervised_only=self.variant.supervised_only,
        )


@dataclass
class PreparedData:
    vocab: Vocabulary
    classes: list[str]
    train: EncodedSet
    dev: EncodedSet
    test: EncodedSet
    unlabeled: EncodedSet
    dataset: str = "dataset"
    labeled_fraction: float = 1.0
    rotation: int = 0
    embeddings: np.ndarray | None = None

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def validate(self) -> None:
        V, K = len(self.vocab), self.num_classes
        for name in ("train", "dev", "test", "unlabeled"):
            part: EncodedSet = getattr(self, name)
            if any(len(r) and (r.min() < 0 or r.max() >= V) for r in part.rows):
                raise ValueError(f"{name} rows hold token ids outside the vocabulary of size {V}")
            if any(len(r) == 0 for r in part.rows):
                raise ValueError(f"{name} contains empty rows")
            if part.labels is not None and (np.any(part.labels < 0) or np.any(part.labels >= K)):
                raise ValueError(f"{name} labels outside the {K} classes")
        for name in ("train", "dev", "test"):
            if getattr(self, name).labels is None:
                raise ValueError(f"{name} split must be labeled")
        if self.embeddings is not None and self.embeddings.shape[0] != V:
            raise ValueError("embedding table does not match the vocabulary")


@dataclass
class RunReport:
    variant: str
    dataset: str
    labeled_fraction: float
    alpha: float
    seed: int
    rotation: int = 0
    dev_accuracies: list[float] = field(default_factory=list)
    best_dev: float = float("nan")
    best_epoch: int = -1
    test_accuracy: float = float("nan")
    param_count: int = 0
    ms_mean: float = float("nan")
    ms_std: float = float("nan")
    steps: int = 0
    skipped_steps: int = 0
    status: str = "ok"
    extra: dict[str, float] = field(default_factory=dict)

    TIMING_FIELDS = ("ms_mean", "ms_std")

    def to_row(self) -> dict[str, str]:
        row = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "dev_accuracies":
                value = ";".join(repr(float(a)) for a in value)
            elif f.name == "extra":
                value = ";".join(f"{k}={v!r}" for k, v in sorted(value.items()))
            elif isinstance(value, float):
                value = repr(value)
            row[f.name] = str(value)
        return row

    @classmethod
    def from_row(cls, row: dict[str, str]) -> RunReport:
        kw = {}
        for f in fields(cls):
            raw = row.get(f.name, "")
            if f.name == "dev_accuracies":
                kw[f.name] = [float(a) for a in raw.split(";") if a]
            elif f.name == "extra":
                kw[f.name] = {k: float(v) for k, _, v in (p.partition("=") for p in raw.split(";") if p)}
            elif f.name in ("variant", "dataset", "status"):
                kw[f.name] = raw
            elif f.name in ("seed", "rotation", "best_epoch", "param_count", "steps", "skipped_steps"):
                kw[f.name] = int(raw) if raw else 0
            else:
                kw[f.name] = float(raw) if raw else float("nan")
        return cls(**kw)

    def without_timing(self) -> dict:
        d = asdict(self)
        for k in self.TIMING_FIELDS:
            d.pop(k)
        return d


REPORT_COLUMNS = [f.name for f in fields(RunReport)]
STEP_LOG_COLUMNS = ["step", "stream", "total", "reconstruction", "kl_z", "kl_y", "supervised_ce", "anneal_coeff"]


class BatchStream:
    """Endless batches over a set, reshuffled each pass.

    The k-th batch depends only on ``(seed, stream_id, k)``, so a resumed run
    sees exactly the batches the uninterrupted run would have.
    """

    def __init__(self, data: EncodedSet, batch_size: int, seed: int, stream_id: int, max_len: int | None = None):
        if len(data) == 0:
            raise ValueError("cannot stream an empty set")
        self.data = data
        self.batch_size = batch_size
        self.seed = seed
        self.stream_id = stream_id
        self.max_len = max_len
        self.per_pass = math.ceil(len(data) / batch_size)
        self._cached: tuple[int, np.ndarray] | None = None

    def _order(self, cycle: int) -> np.ndarray:
        if self._cached is None or self._cached[0] != cycle:
            rng = np.random.default_rng([self.seed, self.stream_id, cycle])
            self._cached = (cycle, rng.permutation(len(self.data)))
        return self._cached[1]

    def batch(self, k: int) -> TokenBatch:
        cycle, pos = divmod(k, self.per_pass)
        idx = self._order(cycle)[pos * self.batch_size:(pos + 1) * self.batch_size]
        labels = None if self.data.labels is None else self.data.labels[idx]
        return TokenBatch.from_rows([self.data.rows[i] for i in idx], labels, self.max_len)


class Trainer:
    """Holds one run's mutable state: parameters, optimizer, schedule, history."""

    def __init__(self, cfg: TrainConfig, data: PreparedData, log_dir: str | Path | None = None) -> None:
        data.validate()
        self.cfg = cfg
        self.data = data
        self.arch = cfg.architecture(len(data.vocab), data.num_classes)
        with precision(cfg.precision):
            self.params = ModelParams.initialize(self.arch, np.random.default_rng([cfg.seed, 0]), data.embeddings)
        self.adam = AdamState(lr=cfg.lr)
        self.sched = ScheduleState(lr=cfg.lr, lr_patience=cfg.lr_patience, stop_patience=cfg.stop_patience,
                                   decay=cfg.lr_decay)
        self.step = 0
        self.epoch = 0
        self.dev_history: list[float] = []
        self.best_arrays: dict[str, np.ndarray] | None = None
        self.best_epoch = -1
        self.skipped = 0
        self.step_ms: list[float] = []
        self.last_losses: tuple[dict, dict | None] | None = None
        ub = cfg.unlabeled_batch_size or cfg.batch_size
        self.lab_stream = BatchStream(data.train, cfg.batch_size, cfg.seed, 1, cfg.max_len)
        self.unl_stream = None
        if not cfg.variant.supervised_only:
            self.unl_stream = BatchStream(data.unlabeled, ub, cfg.seed, 2, cfg.max_len)
        self.log_dir = Path(log_dir) if log_dir else None
        if self.log_dir:
            self.log_dir.mkdir(parents=True, exist_ok=True)

    @property
    def steps_per_epoch(self) -> int:
        if self.cfg.epoch_unit == "unlabeled" and self.unl_stream is not None:
            return self.unl_stream.per_pass
        return self.lab_stream.per_pass

    def batches(self, k: int) -> tuple[TokenBatch, TokenBatch | None]:
        return self.lab_stream.batch(k), (self.unl_stream.batch(k) if self.unl_stream else None)

    def train_step(self, batches: tuple[TokenBatch, TokenBatch | None] | None = None) -> tuple[dict, dict | None]:
        """Forward, backward and Adam update for one labeled (+ unlabeled) batch pair."""
        lab, unl = batches if batches is not None else self.batches(self.step)
        rng = np.random.default_rng([self.cfg.seed, self.step, 0])
        with precision(self.cfg.precision):
            params = self.params.trainable()
            with Tape() as tape:
                total, lb, ub = step_objective(params, lab, unl, self.cfg.variant, self.step, rng,
                                               train=True, dropout_rate=self.cfg.dropout)
            grads = tape.backward(total)
            g = {k: grads.array(t) for k, t in params.tensors.items()}
            try:
                new = adam_step(self.adam, self.params.arrays(), g)
            except NonFiniteGradient as err:
                log.warning("step %d skipped: %s", self.step, err)
                self.skipped += 1
            else:
                self.params = self.params.with_arrays(new)
        losses = (lb.as_floats(), ub.as_floats() if ub is not None else None)
        self.last_losses = losses
        self._log_step(losses)
        self.step += 1
        return losses

    def _log_step(self, losses) -> None:
        if not self.log_dir:
            return
        path = self.log_dir / "steps.csv"
        new_file = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new_file:
                w.writerow(STEP_LOG_COLUMNS)
            for stream, vals in zip(("labeled", "unlabeled"), losses):
                if vals is not None:
                    w.writerow([self.step, stream] + [repr(vals[c]) for c in STEP_LOG_COLUMNS[2:]])

    def evaluate(self, split: EncodedSet, arrays: dict[str, np.ndarray] | None = None) -> float:
        params = self.params if arrays is None else self.params.with_arrays(arrays)
        with precision(self.cfg.precision):
            return accuracy(params, split.rows, split.labels, self.cfg.eval_batch_size, self.cfg.max_len)

    def run_epoch(self) -> tuple[float, bool]:
        for _ in range(self.steps_per_epoch):
            t0 = time.perf_counter()
            self.train_step()
            self.step_ms.append((time.perf_counter() - t0) * 1e3)
        acc = self.evaluate(self.data.dev)
        improved = acc > self.sched.best
        lr, stop = schedule_update(self.sched, acc)
        self.adam.lr = lr
        if improved:
            self.best_arrays = {k: v.copy() for k, v in self.params.arrays().items()}
            self.best_epoch = self.epoch
        self.dev_history.append(acc)
        self.epoch += 1
        if self.log_dir:
            path = self.log_dir / "epochs.csv"
            new_file = not path.exists()
            with open(path, "a", newline="") as fh:
                w = csv.writer(fh)
                if new_file:
                    w.writerow(["epoch", "step", "dev_accuracy", "lr", "improved"])
                w.writerow([self.epoch - 1, self.step, repr(acc), repr(lr), int(improved)])
        return acc, stop

    def fit(self) -> RunReport:
        while self.epoch < self.cfg.max_epochs:
            _, stop = self.run_epoch()
            if stop:
                break
        return self.report()

    def report(self) -> RunReport:
        test_acc = self.evaluate(self.data.test, self.best_arrays) if self.best_arrays else float("nan")
        ms = np.array(self.step_ms) if self.step_ms else np.array([np.nan])
        return RunReport(
            variant=self.cfg.variant.name,
            dataset=self.data.dataset,
            labeled_fraction=self.data.labeled_fraction,
            alpha=self.cfg.variant.alpha,
            seed=self.cfg.seed,
            rotation=self.data.rotation,
            dev_accuracies=list(self.dev_history),
            best_dev=self.sched.best,
            best_epoch=self.best_epoch,
            test_accuracy=test_acc,
            param_count=self.params.count(),
            ms_mean=float(ms.mean()),
            ms_std=float(ms.std()),
            steps=self.step,
            skipped_steps=self.skipped,
        )

    def best_params(self) -> ModelParams:
        return self.params.with_arrays(self.best_arrays) if self.best_arrays else self.params

    # -- checkpointing

    def save(self, path: str | Path) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.arrays().items()}
        arrays.update({f"adam_m/{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in self.adam.v.items()})
        if self.best_arrays:
            arrays.update({f"best/{k}": v for k, v in self.best_arrays.items()})
        meta = {
            "step": self.step,
            "epoch": self.epoch,
            "adam_step": self.adam.step,
            "adam_lr": repr(self.adam.lr),
            "sched_lr": repr(self.sched.lr),
            "sched_best": repr(self.sched.best),
            "sched_since": self.sched.since,
            "best_epoch": self.best_epoch,
            "skipped": self.skipped,
            "dev_history": ";".join(repr(a) for a in self.dev_history),
        }
        save_arrays(path, arrays, {k: str(v) for k, v in meta.items()})

    @classmethod
    def load(cls, path: str | Path, cfg: TrainConfig, data: PreparedData, log_dir=None) -> Trainer:
        tr = cls(cfg, data, log_dir)
        arrays, meta = load_arrays(path)
        group = lambda prefix: {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}  # noqa: E731
        tr.params = tr.params.with_arrays(group("param/"))
        tr.adam.m, tr.adam.v = group("adam_m/"), group("adam_v/")
        best = group("best/")
        tr.best_arrays = best or None
        tr.step = int(meta["step"])
        tr.epoch = int(meta["epoch"])
        tr.adam.step = int(meta["adam_step"])
        tr.adam.lr = float(meta["adam_lr"])
        tr.sched.lr = float(meta["sched_lr"])
        tr.sched.best = float(meta["sched_best"])
        tr.sched.since = int(meta["sched_since"])
        tr.best_epoch = int(meta["best_epoch"])
        tr.skipped = int(meta["skipped"])
        tr.dev_history = [float(a) for a in meta["dev_history"].split(";") if a]
        return tr


def train(cfg: TrainConfig, data: PreparedData, log_dir: str | Path | None = None) -> RunReport:
    return Trainer(cfg, data, log_dir).fit()


def sweep_alpha(
    cfg: TrainConfig, data: PreparedData, grid=ALPHA_GRID, log_dir: str | Path | None = None
) -> tuple[RunReport, list[RunReport]]:
    """Train once per alpha; keep the run with the best dev accuracy (first wins ties)."""
    from dataclasses import replace

    reports = []
    for alpha in grid:
        run_cfg = replace(cfg, variant=replace(cfg.variant, alpha=alpha))
        sub = Path(log_dir) / f"alpha={alpha:g}" if log_dir else None
        reports.append(train(run_cfg, data, sub))
    best = max(reports, key=lambda r: r.best_dev)
    return best, reports


# ---------------------------------------------------------------------------
# timing


def time_configs(
    cfgs: list[TrainConfig], data: PreparedData, n: int = 200, warmup: int = 20
) -> list[tuple[float, float]]:
    """Mean/std wall-clock ms per optimization step for each config.

    All configs consume the same pre-built batch stream, and steps are
    interleaved (one step of each config per round) so slow drifts in machine
    load hit every config alike. BLAS is pinned to one thread.
    """
    if n < 30:
        raise ValueError("at least 30 timed iterations are required")
    trainers = [Trainer(c, data) for c in cfgs]
    ref = trainers[0]
    unl_stream = BatchStream(data.unlabeled, ref.cfg.unlabeled_batch_size or ref.cfg.batch_size,
                             ref.cfg.seed, 2, ref.cfg.max_len)
    stream = [(ref.lab_stream.batch(k), unl_stream.batch(k)) for k in range(warmup + n)]
    times = [[] for _ in trainers]
    with threadpool_limits(limits=1):
        for k in range(warmup + n):
            for i, tr in enumerate(trainers):
                lab, unl = stream[k]
                batch = (lab, None if tr.unl_stream is None else unl)
                t0 = time.perf_counter()
                tr.train_step(batch)
                if k >= warmup:
                    times[i].append((time.perf_counter() - t0) * 1e3)
    return [(float(np.mean(t)), float(np.std(t))) for t in times]


def time_iterations(
    cfg: TrainConfig,
    data: PreparedData,
    n: int = 200,
    warmup: int = 20,
    reference: TrainConfig | None = None,
) -> tuple[float, float, float]:
    """(mean ms, std ms, mean ratio to ``reference``) per full optimization step."""
    if reference is None:
        (mean, std), = time_configs([cfg], data, n, warmup)
        return mean, std, 1.0
    (ref_mean, _), (mean, std) = time_configs([reference, cfg], data, n, warmup)
    return mean, std, mean / ref_mean


# ---------------------------------------------------------------------------
# significance


def welch_t_test(a, b) -> float:
    """Two-sided Welch t-test p-value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    if va == 0 and vb == 0:
        return 1.0 if diff == 0 else 0.0
    sa, sb = va / len(a), vb / len(b)
    t = diff / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa ** 2 / (len(a) - 1) + sb ** 2 / (len(b) - 1))
    return float(2.0 * stats.t.sf(abs(t), df))


__all__ = [
    "AdamState",
    "adam_step",
    "NonFiniteGradient",
    "ScheduleState",
    "schedule_update",
    "TrainConfig",
    "PreparedData",
    "RunReport",
    "REPORT_COLUMNS",
    "STEP_LOG_COLUMNS",
    "BatchStream",
    "Trainer",
    "train",
    "sweep_alpha",
    "time_configs",
    "time_iterations",
    "welch_t_test",
    "LossBreakdown",
]
