"""Experiment orchestration: accuracy matrices, alpha sweeps, speed and out-of-domain runs."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    Corpus,
    SynthSpec,
    Splits,
    Vocabulary,
    build_vocab,
    corpus_stats,
    disjoint_dominant_probs,
    encode_corpus,
    load_pretrained_vectors,
    load_tsv_dataset,
    make_splits,
    pool_unlabeled,
    synth_generate,
)
from .model import accuracy, parameter_count
from .objectives import ALPHA_GRID, VARIANTS, variant
from .stochastic import AnnealSchedule
from .tensor import precision
from .training import (
    REPORT_COLUMNS,
    PreparedData,
    RunReport,
    TrainConfig,
    Trainer,
    time_configs,
    welch_t_test,
)

log = logging.getLogger(__name__)

WORKERS_ENV = "SSVAE_WORKERS"
DEFAULT_FRACTIONS = (0.01, 0.03, 0.1, 0.3, 1.0)
VARIANT_ORDER = ("Supervised", "SSVAE", "SSVAE-{KL}", "SSVAE-{z}", "SSVAE-{KL, z}")
SIGNIFICANCE = 0.05
TIMING_NOISE_LIMIT = 0.2

# Published speed ratios relative to the standard model, shown next to local measurements.
REFERENCE_RATIOS = {
    "AGNEWS": {"SSVAE-{KL}": 0.911, "SSVAE-{z}": 0.742, "SSVAE-{KL, z}": 0.742},
    "DBPedia": {"SSVAE-{KL}": 1.03, "SSVAE-{z}": 0.861, "SSVAE-{KL, z}": 0.867},
    "IMDB": {"SSVAE-{KL}": 1.018, "SSVAE-{z}": 0.822, "SSVAE-{KL, z}": 0.816},
    "Yelp": {"SSVAE-{KL}": 0.986, "SSVAE-{z}": 0.819, "SSVAE-{KL, z}": 0.819},
}


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to exit code 3)."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DatasetSource:
    """Where a dataset comes from: TSV files or a synthetic generator."""

    name: str
    train: str | None = None
    test: str | None = None
    unlabeled: str | None = None
    vectors: str | None = None
    synthetic: bool = False
    classes: int = 4
    vocab: int = 100
    purity: float = 0.8
    n_labeled: int = 200
    n_unlabeled: int = 5000
    n_test: int = 2000
    mean_length: float = 12.0
    std_length: float = 3.0
    synth_seed: int = 0

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            token_probs=disjoint_dominant_probs(self.classes, self.vocab, self.purity),
            mean_length=self.mean_length,
            std_length=self.std_length,
            n_labeled=self.n_labeled,
            n_unlabeled=self.n_unlabeled,
            n_test=self.n_test,
        )

    def paths(self) -> list[str]:
        return [p for p in (self.train, self.test, self.unlabeled, self.vectors) if p]


@dataclass
class ExperimentConfig:
    datasets: list[DatasetSource] = field(default_factory=list)
    variants: tuple[str, ...] = VARIANTS
    alpha_grid: tuple[float, ...] = ALPHA_GRID
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    rotations: int = 5
    seed: int = 0
    outdir: str = "runs"
    precision: str = "float32"
    # model / optimization
    embed_dim: int = 300
    enc_hidden: int = 100
    dec_hidden: int = 200
    z_dim: int = 32
    batch_size: int = 32
    lr: float = 4e-3
    dropout: float = 0.5
    max_epochs: int = 100
    max_len: int = 400
    anneal_flat: int = 3000
    anneal_ramp: int = 3000
    tau: float = 1.0
    kl_scope: str = "all"
    kl_estimator: str = "analytic"
    epoch_unit: str = "labeled"
    # data protocol
    split_size: int = 1000
    unlabeled_size: int = 10000
    min_count: int = 1
    # speed bench
    speed_iters: int = 200
    speed_warmup: int = 20
    # out-of-domain
    source: str | None = None
    target: str | None = None

    def validate(self) -> None:
        if not self.datasets:
            raise ConfigError("no datasets configured")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique")
        for d in self.datasets:
            if not d.synthetic and (not d.train or not d.test):
                raise ConfigError(f"dataset {d.name}: needs train and test paths, or synthetic = true")
            for p in d.paths():
                if not Path(p).exists():
                    raise ConfigError(f"dataset {d.name}: path {p} does not exist")
        for f in self.fractions:
            if not 0 < f <= 1:
                raise ConfigError(f"labeled fraction {f} outside (0, 1]")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
        if not self.alpha_grid or any(a <= 0 for a in self.alpha_grid):
            raise ConfigError("alpha grid must hold positive values")
        if self.rotations < 1:
            raise ConfigError("need at least one rotation")
        for key in ("source", "target"):
            name = getattr(self, key)
            if name is not None and name not in names:
                raise ConfigError(f"{key} dataset {name!r} is not configured")
        try:
            self.train_config("ssvae", 0)
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def dataset(self, name: str) -> DatasetSource:
        for d in self.datasets:
            if d.name == name:
                return d
        raise ConfigError(f"unknown dataset {name!r}")

    def train_config(self, slug: str, seed: int, alpha: float = 1.0) -> TrainConfig:
        v = variant(
            slug,
            alpha=alpha,
            anneal=AnnealSchedule(self.anneal_flat, self.anneal_ramp),
            tau=self.tau,
            kl_scope=self.kl_scope,
            kl_estimator=self.kl_estimator,
        )
        if self.epoch_unit not in ("labeled", "unlabeled"):
            raise ValueError(f"epoch_unit must be labeled or unlabeled, got {self.epoch_unit!r}")
        return TrainConfig(
            variant=v,
            embed_dim=self.embed_dim,
            enc_hidden=self.enc_hidden,
            dec_hidden=self.dec_hidden,
            z_dim=self.z_dim,
            batch_size=self.batch_size,
            lr=self.lr,
            dropout=self.dropout,
            max_epochs=self.max_epochs,
            max_len=self.max_len,
            seed=seed,
            precision=self.precision,
            epoch_unit=self.epoch_unit,
        )


def _coerce(raw: str, annotation: str, key: str):
    raw = raw.strip()
    try:
        if annotation.startswith("tuple") or annotation.startswith("list"):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if "float" in annotation:
                return tuple(float(s) for s in items)
            return tuple(items)
        if annotation.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if annotation.startswith("int"):
            return int(raw)
        if annotation.startswith("float"):
            return float(raw)
        if raw.lower() in ("", "none"):
            return None
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {annotation}") from None


def parse_config(pairs: dict[str, str]) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from flat ``key -> value`` strings.

    Dataset settings use dotted keys, e.g. ``agnews.train = data/train.tsv``;
    the ``datasets`` key lists the dataset names in order.
    """
    top = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    ds_fields = {f.name: f for f in dataclasses.fields(DatasetSource)}
    names = [s.strip() for s in pairs.get("datasets", "").split(",") if s.strip()]
    per_ds: dict[str, dict] = {n: {} for n in names}
    kw = {}
    for key, raw in pairs.items():
        if key == "datasets":
            continue
        if "." in key:
            ds, _, sub = key.partition(".")
            if ds not in per_ds:
                names.append(ds)
                per_ds[ds] = {}
            if sub not in ds_fields or sub == "name":
                raise ConfigError(f"unknown dataset setting {key!r}")
            per_ds[ds][sub] = _coerce(raw, str(ds_fields[sub].type), key)
        elif key in top:
            kw[key] = _coerce(raw, str(top[key].type), key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    kw["datasets"] = [DatasetSource(name=n, **per_ds[n]) for n in names]
    return ExperimentConfig(**kw)


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    pairs = {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    for no, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{no}: expected key = value")
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    pairs = read_config_file(path) if path else {}
    pairs.update(overrides or {})
    cfg = parse_config(pairs)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetBundle:
    name: str
    labeled: Corpus
    unlabeled: Corpus
    test: Corpus
    splits: Splits
    vocab: Vocabulary
    embeddings: np.ndarray | None = None
    coverage: float | None = None

    @property
    def classes(self) -> list[str]:
        return self.labeled.classes

    def prepared(self, rotation: int, fraction: float, max_len: int | None = None) -> PreparedData:
        train_idx, dev_idx = self.splits.rotation(rotation, fraction)
        enc = lambda c: encode_corpus(c, self.vocab, max_len)  # noqa: E731
        return PreparedData(
            vocab=self.vocab,
            classes=self.classes,
            train=enc(self.labeled.subset(train_idx, "train")),
            dev=enc(self.labeled.subset(dev_idx, "dev")),
            test=enc(self.test),
            unlabeled=enc(self.unlabeled),
            dataset=self.name,
            labeled_fraction=fraction,
            rotation=rotation,
            embeddings=self.embeddings,
        )

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.splits.save(d / "splits.txt")
        self.vocab.save(d / "vocab.tsv")


def load_bundle(src: DatasetSource, cfg: ExperimentConfig) -> DatasetBundle:
    """Read (or generate) a dataset and apply the split protocol."""
    if src.synthetic:
        labeled, unl_pool, test = synth_generate(src.synth_spec(), src.synth_seed)
    else:
        labeled = load_tsv_dataset(src.train, "train")
        test = load_tsv_dataset(src.test, "test", classes=labeled.classes)
        unl_pool = load_tsv_dataset(src.unlabeled, "unlabeled").unlabeled() if src.unlabeled else None
    n_splits = 5
    if unl_pool is None:
        # rows beyond the five dev splits become the unlabeled pool
        probe = make_splits(len(labeled), 1, cfg.seed, cfg.split_size, 1, n_splits)
        unl_pool = pool_unlabeled(labeled, np.concatenate(probe.dev))
        if len(unl_pool) == 0:
            raise ConfigError(f"dataset {src.name}: no rows left for the unlabeled pool")
    splits = make_splits(len(labeled), len(unl_pool), cfg.seed, cfg.split_size, cfg.unlabeled_size, n_splits)
    if cfg.rotations > len(splits.dev):
        raise ConfigError(f"{cfg.rotations} rotations requested but only {len(splits.dev)} splits exist")
    unlabeled = unl_pool.subset(splits.unlabeled, "unlabeled")
    dev_rows = labeled.subset(np.concatenate(splits.dev))
    vocab = build_vocab([dev_rows, unlabeled], cfg.min_count)
    emb, coverage = None, None
    if src.vectors:
        table, coverage = load_pretrained_vectors(src.vectors, vocab, cfg.embed_dim, np.random.default_rng(cfg.seed))
        emb = table.weights.data
        log.info("%s: pretrained vectors cover %.1f%% of the vocabulary", src.name, 100 * coverage)
    return DatasetBundle(src.name, labeled, unlabeled, test, splits, vocab, emb, coverage)


_BUNDLES: dict[tuple, DatasetBundle] = {}


def _bundle(cfg: ExperimentConfig, name: str) -> DatasetBundle:
    src = cfg.dataset(name)
    key = (repr(src), cfg.seed, cfg.split_size, cfg.unlabeled_size, cfg.min_count, cfg.embed_dim)
    if key not in _BUNDLES:
        try:
            _BUNDLES[key] = load_bundle(src, cfg)
        except ConfigError:
            raise
        except (ValueError, OSError) as err:
            raise ConfigError(f"dataset {name}: {err}") from err
    return _BUNDLES[key]


# ---------------------------------------------------------------------------
# single cells


def fit_with_alpha_selection(
    cfg: ExperimentConfig, slug: str, data: PreparedData, seed: int, log_dir: Path | None = None
) -> tuple[Trainer, RunReport]:
    """Train one run per alpha and keep the one with the best dev accuracy.

    The supervised baseline has no unlabeled term, so only the first alpha
    is tried for it. Ties go to the earlier grid entry.
    """
    grid = cfg.alpha_grid[:1] if slug == "supervised" else cfg.alpha_grid
    best: tuple[Trainer, RunReport] | None = None
    devs = {}
    for alpha in grid:
        sub = log_dir / f"alpha={alpha:g}" if log_dir else None
        tr = Trainer(cfg.train_config(slug, seed, alpha), data, sub)
        rep = tr.fit()
        devs[f"dev@{alpha:g}"] = rep.best_dev
        if best is None or rep.best_dev > best[1].best_dev:
            best = (tr, rep)
    tr, rep = best
    rep.extra.update(devs)
    return tr, rep


def cell_key(report: RunReport) -> tuple:
    return (report.variant, report.dataset, float(report.labeled_fraction), int(report.rotation))


def _failed(slug: str, dataset: str, fraction: float, rotation: int, seed: int, err: Exception) -> RunReport:
    msg = f"failed: {type(err).__name__}: {err}".replace("\n", " ")
    return RunReport(variant(slug).name, dataset, fraction, float("nan"), seed, rotation, status=msg)


def run_cell(cfg: ExperimentConfig, slug: str, dataset: str, fraction: float, rotation: int) -> RunReport:
    seed = cfg.seed + rotation
    try:
        bundle = _bundle(cfg, dataset)
        data = bundle.prepared(rotation, fraction, cfg.max_len)
        log_dir = Path(cfg.outdir) / "logs" / f"{dataset}_{slug}_f{fraction:g}_r{rotation}"
        _, rep = fit_with_alpha_selection(cfg, slug, data, seed, log_dir)
        return rep
    except Exception as err:  # one failing cell must not abort the matrix
        log.exception("cell %s/%s/%g/%d failed", dataset, slug, fraction, rotation)
        return _failed(slug, dataset, fraction, rotation, seed, err)


def _run_cell_args(args) -> RunReport:
    return run_cell(*args)


# ---------------------------------------------------------------------------
# raw results


def read_raw(path: str | os.PathLike) -> list[RunReport]:
    p = Path(path)
    if not p.exists():
        return []
    with open(p, newline="", encoding="utf-8") as fh:
        return [RunReport.from_row(row) for row in csv.DictReader(fh)]


def append_raw(path: str | os.PathLike, report: RunReport) -> None:
    p = Path(path)
    new_file = not p.exists()
    with open(p, "a", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        if new_file:
            w.writeheader()
        w.writerow(report.to_row())


def write_raw(path: str | os.PathLike, reports: list[RunReport]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.to_row())
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class Cell:
    accuracies: list[float]
    failed: int = 0
    p_value: float | None = None
    mark: str = ""
    best: bool = False

    @property
    def n(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if self.n > 1 else float("nan")

    def text(self) -> str:
        if not self.accuracies:
            return "failed" if self.failed else "-"
        s = f"{100 * self.mean:.2f}"
        if self.n > 1:
            s += f"({100 * self.std:.2f})"
        s += self.mark
        if self.failed:
            s += f" [{self.failed} failed]"
        return s


@dataclass
class ResultsTable:
    """Per-run reports plus the rules for aggregating them.

    Every aggregate is recomputed from ``reports`` on demand; nothing derived
    is stored. ``baseline`` names the variant the significance marks refer
    to: ``*`` significantly above it, ``†`` significantly below.
    """

    reports: list[RunReport]
    baseline: str = "SSVAE"

    def columns(self) -> list[tuple[str, float]]:
        datasets = list(dict.fromkeys(r.dataset for r in self.reports))
        cols = []
        for d in datasets:
            fracs = sorted({float(r.labeled_fraction) for r in self.reports if r.dataset == d})
            cols.extend((d, f) for f in fracs)
        return cols

    def variants(self) -> list[str]:
        present = {r.variant for r in self.reports}
        known = [v for v in VARIANT_ORDER if v in present]
        return known + sorted(present - set(known))

    def _accs(self, var: str, col: tuple[str, float]) -> tuple[list[float], int]:
        rows = [r for r in self.reports if r.variant == var and r.dataset == col[0] and float(r.labeled_fraction) == col[1]]
        rows.sort(key=lambda r: r.rotation)
        ok = [r.test_accuracy for r in rows if r.status == "ok" and not math.isnan(r.test_accuracy)]
        return ok, len(rows) - len(ok)

    def cell(self, var: str, col: tuple[str, float]) -> Cell | None:
        accs, failed = self._accs(var, col)
        if not accs and not failed:
            return None
        c = Cell(accs, failed)
        if var != self.baseline:
            base, _ = self._accs(self.baseline, col)
            if len(base) >= 2 and len(accs) >= 2:
                c.p_value = welch_t_test(accs, base)
                if c.p_value < SIGNIFICANCE:
                    c.mark = "*" if np.mean(accs) > np.mean(base) else "†"
        means = [cc.mean for cc in (Cell(self._accs(v, col)[0]) for v in self.variants()) if cc.accuracies]
        c.best = bool(accs) and c.mean == max(means)
        return c

    def grid(self) -> list[tuple[str, list[Cell | None]]]:
        cols = self.columns()
        return [(v, [self.cell(v, col) for col in cols]) for v in self.variants()]


def _fmt_float(x: float | None) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.6f}"


def render_markdown(table: ResultsTable) -> str:
    cols = table.columns()
    head = ["Variant"] + [f"{d} {100 * f:g}%" for d, f in cols]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join(["---"] * len(head)) + "|"]
    for var, cells in table.grid():
        texts = []
        for c in cells:
            if c is None:
                texts.append("-")
            else:
                texts.append(f"**{c.text()}**" if c.best else c.text())
        lines.append("| " + " | ".join([var] + texts) + " |")
    lines.append("")
    lines.append(
        f"Test accuracy (%), mean(std) over runs. Bold: best mean per column. "
        f"* / †: significantly above / below {table.baseline} (Welch t-test, p < {SIGNIFICANCE})."
    )
    return "\n".join(lines) + "\n"


def render_csv(table: ResultsTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "dataset", "labeled_fraction", "mean", "std", "n", "failed", "p_value", "mark", "best"])
    cols = table.columns()
    for var, cells in table.grid():
        for (d, f), c in zip(cols, cells):
            if c is None:
                continue
            w.writerow([var, d, f"{f:g}", _fmt_float(c.mean if c.n else None), _fmt_float(c.std if c.n > 1 else None),
                        c.n, c.failed, _fmt_float(c.p_value), c.mark, int(c.best)])
    return buf.getvalue()


def emit_report(table: ResultsTable, fmt: str, path: str | os.PathLike | None = None) -> str:
    """Render ``table`` as ``csv`` or ``markdown``; write to ``path`` when given."""
    if not table.reports:
        raise ValueError("cannot emit an empty table")
    if fmt == "csv":
        text = render_csv(table)
    elif fmt in ("markdown", "md"):
        text = render_markdown(table)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        Path(path).write_bytes(text.encode("utf-8"))
    return text


def write_tables(table: ResultsTable, outdir: str | os.PathLike) -> None:
    out = Path(outdir)
    emit_report(table, "csv", out / "table.csv")
    emit_report(table, "markdown", out / "table.md")


# ---------------------------------------------------------------------------
# experiments


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def run_matrix(cfg: ExperimentConfig, workers: int | None = None) -> ResultsTable:
    """Train every (variant, dataset, fraction, rotation) cell and aggregate.

    Completed cells already present in ``<outdir>/raw.csv`` are skipped, so an
    interrupted matrix resumes where it stopped. Failed cells are retried.
    """
    cfg.validate()
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    raw_path = out / "raw.csv"
    previous = read_raw(raw_path)
    done = {cell_key(r) for r in previous if r.status == "ok"}
    kept = [r for r in previous if r.status == "ok"]
    if len(kept) != len(previous):
        write_raw(raw_path, kept)

    tasks = []
    for d in cfg.datasets:
        for slug in cfg.variants:
            for f in cfg.fractions:
                for r in range(cfg.rotations):
                    if (variant(slug).name, d.name, float(f), r) not in done:
                        tasks.append((cfg, slug, d.name, float(f), r))
    for d in cfg.datasets:
        _bundle(cfg, d.name).save(out / "datasets" / d.name)

    workers = workers or _workers()
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rep in pool.map(_run_cell_args, tasks):
                append_raw(raw_path, rep)
    else:
        for task in tasks:
            append_raw(raw_path, run_cell(*task))

    wanted = {(variant(s).name, d.name, float(f), r) for d in cfg.datasets for s in cfg.variants
              for f in cfg.fractions for r in range(cfg.rotations)}
    reports = [r for r in read_raw(raw_path) if cell_key(r) in wanted]
    table = ResultsTable(reports)
    write_tables(table, out)
    return table


def run_sweep(cfg: ExperimentConfig, slug: str, dataset: str, fraction: float = 1.0, rotation: int = 0) -> list[RunReport]:
    """One run per alpha on a single cell; returns every report (best-dev first)."""
    cfg.validate()
    data = _bundle(cfg, dataset).prepared(rotation, fraction, cfg.max_len)
    reports = []
    for alpha in cfg.alpha_grid:
        log_dir = Path(cfg.outdir) / "logs" / f"sweep_{dataset}_{slug}_a{alpha:g}"
        reports.append(Trainer(cfg.train_config(slug, cfg.seed + rotation, alpha), data, log_dir).fit())
    return sorted(reports, key=lambda r: -r.best_dev)


@dataclass
class SpeedRow:
    dataset: str
    variant: str
    ms_mean: float
    ms_std: float
    ratio: float
    params: int
    noisy: bool = False
    reference: float | None = None


def run_speed_bench(cfg: ExperimentConfig, n: int | None = None, warmup: int | None = None) -> list[SpeedRow]:
    """Per-variant step time relative to the standard model, interleaved on one batch stream."""
    cfg.validate()
    n = n or cfg.speed_iters
    warmup = cfg.speed_warmup if warmup is None else warmup
    slugs = ["ssvae"] + [s for s in cfg.variants if s not in ("ssvae", "supervised")]
    rows = []
    for d in cfg.datasets:
        data = _bundle(cfg, d.name).prepared(0, 1.0, cfg.max_len)
        tcfgs = [cfg.train_config(s, cfg.seed) for s in slugs]
        timings = time_configs(tcfgs, data, n, warmup)
        ref_mean = timings[0][0]
        for tc, (mean, std) in zip(tcfgs, timings):
            arch = tc.architecture(len(data.vocab), data.num_classes)
            noisy = std / mean > TIMING_NOISE_LIMIT
            if noisy:
                log.warning("%s/%s: timing std/mean = %.2f; machine may be under background load",
                            d.name, tc.variant.name, std / mean)
            rows.append(SpeedRow(d.name, tc.variant.name, mean, std, mean / ref_mean, parameter_count(arch), noisy,
                                 REFERENCE_RATIOS.get(d.name, {}).get(tc.variant.name)))
    return rows


def render_speed(rows: list[SpeedRow], fmt: str = "markdown") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "variant", "ms_mean", "ms_std", "ratio", "params", "noisy", "reference_ratio"])
        for r in rows:
            w.writerow([r.dataset, r.variant, f"{r.ms_mean:.4f}", f"{r.ms_std:.4f}", f"{r.ratio:.4f}", r.params,
                        int(r.noisy), "" if r.reference is None else f"{r.reference:g}"])
        return buf.getvalue()
    variants = list(dict.fromkeys(r.variant for r in rows))
    lines = ["| Dataset | " + " | ".join(variants) + " |", "|" + "|".join(["---"] * (len(variants) + 1)) + "|"]
    for d in dict.fromkeys(r.dataset for r in rows):
        sub = {r.variant: r for r in rows if r.dataset == d}
        lowest = min(r.ratio for r in sub.values())
        cells = []
        for v in variants:
            r = sub[v]
            text = f"{r.ratio:.3f}({r.ms_std / sub['SSVAE'].ms_mean:.2f})"
            if r.ratio == lowest:
                text = f"**{text}**"
            if r.noisy:
                text += " !"
            cells.append(text)
        lines.append(f"| {d} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("Step time relative to SSVAE; std relative to the SSVAE mean in parentheses; ! marks std/mean > 0.2.")
    lines.append("")
    lines.append("| Dataset | Variant | ms/step | params |")
    lines.append("|---|---|---|---|")
    for r in rows:
        lines.append(f"| {r.dataset} | {r.variant} | {r.ms_mean:.2f}({r.ms_std:.2f}) | {r.params} |")
    refs = sorted({(d, v, x) for d, m in REFERENCE_RATIOS.items() for v, x in m.items()})
    if refs:
        lines.append("")
        lines.append("Published reference ratios (hardware dependent, shown for context only): "
                     + "; ".join(f"{d} {v} {x:g}" for d, v, x in refs))
    return "\n".join(lines) + "\n"


def run_ood(cfg: ExperimentConfig) -> ResultsTable:
    """Train on ``cfg.source`` with all labels, test on ``cfg.target``'s test set."""
    cfg.validate()
    if cfg.source is None or cfg.target is None:
        raise ConfigError("out-of-domain runs need both source and target")
    src = _bundle(cfg, cfg.source)
    tgt = _bundle(cfg, cfg.target)
    if len(src.classes) != len(tgt.classes):
        raise ConfigError(f"class count mismatch: {cfg.source} has {len(src.classes)}, {cfg.target} has {len(tgt.classes)}")
    target_labels = np.asarray(tgt.test.labels)
    if set(src.classes) == set(tgt.classes):
        remap = np.array([src.classes.index(c) for c in tgt.classes])
        target_labels = remap[target_labels]
    target = encode_corpus(Corpus(tgt.test.rows, list(target_labels), src.classes, "test"), src.vocab, cfg.max_len)
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    name = f"{cfg.source}->{cfg.target}"
    reports = []
    for slug in cfg.variants:
        for r in range(cfg.rotations):
            seed = cfg.seed + r
            try:
                data = src.prepared(r, 1.0, cfg.max_len)
                tr, rep = fit_with_alpha_selection(cfg, slug, data, seed, out / "logs" / f"ood_{slug}_r{r}")
                with precision(cfg.precision):
                    acc = accuracy(tr.best_params(), target.rows, target.labels, max_len=cfg.max_len)
                rep.extra["in_domain"] = rep.test_accuracy
                rep.test_accuracy = acc
                rep.dataset = name
            except Exception as err:
                log.exception("ood run %s/%d failed", slug, r)
                rep = _failed(slug, name, 1.0, r, seed, err)
            reports.append(rep)
    write_raw(out / "raw.csv", reports)
    table = ResultsTable(reports, baseline="Supervised")
    write_tables(table, out)
    return table


def dataset_stats(cfg: ExperimentConfig) -> str:
    lines = ["| Dataset | Classes | Rows | Av. length |", "|---|---|---|---|"]
    for d in cfg.datasets:
        b = _bundle(cfg, d.name)
        s = corpus_stats(b.labeled)
        lines.append(f"| {d.name} | {s.num_classes} | {s.num_rows} | {s} |")
    return "\n".join(lines) + "\n"


__all__ = [
    "ConfigError",
    "DatasetSource",
    "ExperimentConfig",
    "parse_config",
    "read_config_file",
    "load_config",
    "DatasetBundle",
    "load_bundle",
    "fit_with_alpha_selection",
    "run_cell",
    "read_raw",
    "append_raw",
    "write_raw",
    "Cell",
    "ResultsTable",
    "render_markdown",
    "render_csv",
    "emit_report",
    "run_matrix",
    "run_sweep",
    "SpeedRow",
    "run_speed_bench",
    "render_speed",
    "run_ood",
    "dataset_stats",
]
