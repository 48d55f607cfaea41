"""Corpora, vocabulary, split protocol, pretrained vectors and synthetic data."""

from __future__ import annotations

import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import EmbeddingTable
from .model import BOS_ID, EOS_ID, PAD_ID, UNK_ID
from .tensor import Tensor

log = logging.getLogger(__name__)

RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")


@dataclass
class Corpus:
    """Tokenized rows with optional integer labels indexing ``classes``."""

    rows: list[list[str]]
    labels: list[int] | None = None
    classes: list[str] = field(default_factory=list)
    tag: str = "train"
    dropped: int = 0

    def __post_init__(self) -> None:
        if self.labels is not None:
            if len(self.labels) != len(self.rows):
                raise ValueError("labels and rows differ in length")
            if any(not 0 <= y < len(self.classes) for y in self.labels):
                raise ValueError("label outside class table")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def subset(self, indices, tag: str | None = None) -> Corpus:
        idx = [int(i) for i in indices]
        labels = None if self.labels is None else [self.labels[i] for i in idx]
        return Corpus([self.rows[i] for i in idx], labels, list(self.classes), tag or self.tag)

    def unlabeled(self, tag: str = "unlabeled") -> Corpus:
        return Corpus(list(self.rows), None, list(self.classes), tag)


def tokenize_whitespace(text: str) -> list[str]:
    return text.split()


@dataclass
class Vocabulary:
    tokens: list[str]
    counts: list[int]

    def __post_init__(self) -> None:
        if tuple(self.tokens[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.counts == other.counts

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, tokens: list[str], max_len: int | None = None) -> np.ndarray:
        if max_len is not None:
            tokens = tokens[:max_len]
        return np.fromiter((self.index.get(t, UNK_ID) for t in tokens), dtype=np.int64, count=len(tokens))

    def save(self, path: str | os.PathLike) -> None:
        lines = [f"{t}\t{c}" for t, c in zip(self.tokens, self.counts)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> Vocabulary:
        tokens, counts = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            tok, _, cnt = line.rpartition("\t")
            tokens.append(tok)
            counts.append(int(cnt))
        return cls(tokens, counts)


def build_vocab(corpora: Corpus | list[Corpus], min_count: int = 1) -> Vocabulary:
    """Ids by descending frequency, ties by first occurrence; rarer tokens map to unknown."""
    if isinstance(corpora, Corpus):
        corpora = [corpora]
    counts: Counter[str] = Counter()
    for corpus in corpora:
        for row in corpus.rows:
            counts.update(row)
    # Counter preserves first-insertion order and sorted() is stable
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED), key=lambda t: -counts[t])
    return Vocabulary(list(RESERVED) + kept, [0] * len(RESERVED) + [counts[t] for t in kept])


def _read_lines(path: str | os.PathLike) -> list[str]:
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    return text.replace("\r\n", "\n").replace("\r", "\n").split("\n")


def load_tsv_dataset(path: str | os.PathLike, tag: str = "train", classes: list[str] | None = None) -> Corpus:
    """Parse ``label<TAB>text`` (labeled) or bare ``text`` (unlabeled) lines.

    Rows whose text has no tokens are dropped and counted in ``Corpus.dropped``.
    """
    rows: list[list[str]] = []
    labels: list[str] = []
    mode: str | None = None
    dropped = 0
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        has_tab = "\t" in line
        kind = "labeled" if has_tab else "unlabeled"
        if mode is None:
            mode = kind
        elif kind != mode:
            raise ValueError(f"{path}:{lineno}: {kind} line in a file of {mode} lines")
        if has_tab:
            label, _, text = line.partition("\t")
            if not label.strip() or "\t" in text:
                raise ValueError(f"{path}:{lineno}: malformed line, expected 'label<TAB>text'")
            label = label.strip()
        else:
            label, text = None, line
        tokens = tokenize_whitespace(text)
        if not tokens:
            dropped += 1
            continue
        rows.append(tokens)
        if label is not None:
            labels.append(label)
    if dropped:
        log.info("%s: dropped %d empty rows", path, dropped)
    if mode != "labeled":
        return Corpus(rows, None, list(classes or []), tag, dropped)
    table = list(classes) if classes is not None else []
    for lab in labels:
        if lab not in table:
            if classes is not None:
                raise ValueError(f"{path}: label {lab!r} not in the class table")
            table.append(lab)
    index = {c: i for i, c in enumerate(table)}
    return Corpus(rows, [index[lab] for lab in labels], table, tag, dropped)


def write_tsv_dataset(path: str | os.PathLike, corpus: Corpus) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, row in enumerate(corpus.rows):
            text = " ".join(row)
            if corpus.labels is not None:
                fh.write(f"{corpus.classes[corpus.labels[i]]}\t{text}\n")
            else:
                fh.write(text + "\n")


@dataclass
class Splits:
    """Five disjoint dev splits over the labeled pool, plus the unlabeled subsample."""

    dev: list[np.ndarray]
    unlabeled: np.ndarray
    seed: int = 0

    def rotation(self, r: int, fraction: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """(train indices, dev indices) for rotation ``r``; ``fraction`` subsamples train only."""
        if not 0 < fraction <= 1:
            raise ValueError("labeled fraction must be in (0, 1]")
        dev = self.dev[r]
        train = np.concatenate([s for i, s in enumerate(self.dev) if i != r])
        if fraction < 1.0:
            keep = max(1, int(round(fraction * len(train))))
            rng = np.random.default_rng([self.seed, r, int(round(fraction * 1e6))])
            train = np.sort(rng.choice(train, size=keep, replace=False))
        return train, dev

    def save(self, path: str | os.PathLike) -> None:
        lines = [f"# seed={self.seed}"]
        for r, split in enumerate(self.dev):
            lines.append(f"[dev-{r}]")
            lines.extend(str(int(i)) for i in split)
        lines.append("[unlabeled]")
        lines.extend(str(int(i)) for i in self.unlabeled)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> Splits:
        sections: dict[str, list[int]] = {}
        current = None
        seed = 0
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("# seed="):
                seed = int(line[7:])
            elif line.startswith("["):
                current = line.strip("[]")
                sections[current] = []
            else:
                sections[current].append(int(line))
        n_dev = sum(1 for k in sections if k.startswith("dev-"))
        dev = [np.array(sections[f"dev-{r}"], dtype=np.int64) for r in range(n_dev)]
        return cls(dev, np.array(sections.get("unlabeled", []), dtype=np.int64), seed)


def make_splits(
    n_labeled: int,
    n_unlabeled: int,
    seed: int,
    split_size: int = 1000,
    unlabeled_size: int = 10000,
    n_splits: int = 5,
) -> Splits:
    """Shuffle the labeled pool into ``n_splits`` disjoint dev splits.

    Pools smaller than ``n_splits * split_size`` shrink the split size to
    ``n_labeled // n_splits``; the unlabeled subsample is capped by the pool.
    """
    if isinstance(n_labeled, Corpus):
        n_labeled = len(n_labeled)
    if isinstance(n_unlabeled, Corpus):
        n_unlabeled = len(n_unlabeled)
    size = min(split_size, n_labeled // n_splits)
    if size < 10:
        raise ValueError(f"need at least {10 * n_splits} labeled rows, got {n_labeled}")
    if n_unlabeled < 1:
        raise ValueError("no unlabeled rows")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_labeled)
    dev = [np.sort(order[r * size:(r + 1) * size]) for r in range(n_splits)]
    unl = np.sort(rng.permutation(n_unlabeled)[: min(unlabeled_size, n_unlabeled)])
    return Splits(dev, unl, seed)


def load_pretrained_vectors(
    path: str | os.PathLike,
    vocab: Vocabulary,
    dim: int,
    rng: np.random.Generator,
) -> tuple[EmbeddingTable, float]:
    """Fill an embedding table from a ``token v1 ... v_dim`` text file.

    Returns the table and the coverage ratio over non-reserved vocabulary
    entries. Rows missing from the file are drawn uniform in [-0.1, 0.1].
    """
    table = rng.uniform(-0.1, 0.1, size=(len(vocab), dim))
    found = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\r\n").split(" ")
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                if int(parts[1]) != dim:
                    raise ValueError(f"{path}: vectors have dim {parts[1]}, expected {dim}")
                continue
            if not parts or not parts[0]:
                continue
            token, values = parts[0], [p for p in parts[1:] if p]
            if len(values) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(values)}")
            idx = vocab.index.get(token)
            if idx is None or idx < len(RESERVED):
                continue
            try:
                table[idx] = [float(v) for v in values]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed float") from None
            found.add(idx)
    table[PAD_ID] = 0.0
    n_regular = len(vocab) - len(RESERVED)
    coverage = len(found) / n_regular if n_regular else 0.0
    return EmbeddingTable(Tensor(table)), coverage


@dataclass(frozen=True)
class CorpusStats:
    mean_length: float
    std_length: float
    num_classes: int
    num_rows: int

    def __str__(self) -> str:
        return f"{self.mean_length:.2f}±{self.std_length:.2f}"


def corpus_stats(corpus: Corpus) -> CorpusStats:
    """Population mean/std of per-row token counts, class count, row count."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    lengths = np.array([len(r) for r in corpus.rows], dtype=np.float64)
    n_classes = len(set(corpus.labels)) if corpus.labels is not None else 0
    return CorpusStats(float(lengths.mean()), float(lengths.std()), n_classes, len(corpus))


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass
class SynthSpec:
    """Class-conditional unigram generator.

    ``token_probs[k]`` is the token distribution of class ``k`` over
    ``vocab_size`` tokens named ``w0 .. w{V-1}``. Lengths are drawn from a
    normal with the given mean/std, rounded and clipped to ``[1, max_length]``.
    """

    token_probs: np.ndarray
    mean_length: float = 12.0
    std_length: float = 3.0
    max_length: int = 64
    n_labeled: int = 200
    n_unlabeled: int = 5000
    n_test: int = 2000
    class_prior: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.token_probs = np.asarray(self.token_probs, dtype=np.float64)
        if self.token_probs.ndim != 2 or self.token_probs.shape[0] < 2:
            raise ValueError("need a (K >= 2, V) matrix of class token distributions")
        if np.any(self.token_probs < 0) or not np.allclose(self.token_probs.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("class token distributions must be normalized")
        prior = self.class_prior
        if prior is None:
            prior = np.full(self.num_classes, 1.0 / self.num_classes)
        prior = np.asarray(prior, dtype=np.float64)
        if prior.shape != (self.num_classes,) or np.any(prior < 0) or not np.isclose(prior.sum(), 1.0):
            raise ValueError("class prior must be a normalized distribution over the classes")
        self.class_prior = prior

    @property
    def num_classes(self) -> int:
        return self.token_probs.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.token_probs.shape[1]


def disjoint_dominant_probs(num_classes: int, vocab_size: int, purity: float = 0.6) -> np.ndarray:
    """Each class owns a contiguous block of tokens holding ``purity`` of its mass.

    The rest of the mass is spread uniformly over the whole vocabulary.
    ``purity = 1`` gives disjoint class vocabularies; ``purity = 0`` makes all
    classes identical.
    """
    block = vocab_size // num_classes
    probs = np.full((num_classes, vocab_size), (1.0 - purity) / vocab_size)
    for k in range(num_classes):
        probs[k, k * block:(k + 1) * block] += purity / block
    return probs / probs.sum(axis=1, keepdims=True)


def _sample_rows(spec: SynthSpec, n: int, rng: np.random.Generator) -> tuple[list[list[str]], list[int]]:
    labels = rng.choice(spec.num_classes, size=n, p=spec.class_prior)
    lengths = np.clip(np.rint(rng.normal(spec.mean_length, spec.std_length, size=n)), 1, spec.max_length).astype(int)
    rows = []
    for y, L in zip(labels, lengths):
        ids = rng.choice(spec.vocab_size, size=L, p=spec.token_probs[y])
        rows.append([f"w{i}" for i in ids])
    return rows, [int(y) for y in labels]


def synth_generate(spec: SynthSpec, seed: int) -> tuple[Corpus, Corpus, Corpus]:
    """(labeled, unlabeled, test) corpora drawn from the same class mixture."""
    rng = np.random.default_rng(seed)
    classes = [f"c{k}" for k in range(spec.num_classes)]
    lab_rows, lab_y = _sample_rows(spec, spec.n_labeled, rng)
    unl_rows, _ = _sample_rows(spec, spec.n_unlabeled, rng)
    test_rows, test_y = _sample_rows(spec, spec.n_test, rng)
    return (
        Corpus(lab_rows, lab_y, classes, "train"),
        Corpus(unl_rows, None, classes, "unlabeled"),
        Corpus(test_rows, test_y, list(classes), "test"),
    )


def bayes_accuracy(spec: SynthSpec, n_samples: int = 20000, seed: int = 0) -> float:
    """Monte Carlo accuracy of the Bayes-optimal classifier (exact class likelihoods)."""
    rng = np.random.default_rng(seed)
    rows, labels = _sample_rows(spec, n_samples, rng)
    with np.errstate(divide="ignore"):
        log_p = np.log(spec.token_probs)
        log_prior = np.log(spec.class_prior)
    correct = 0
    for row, y in zip(rows, labels):
        ids = [int(t[1:]) for t in row]
        scores = log_prior + log_p[:, ids].sum(axis=1)
        best = np.flatnonzero(scores == scores.max())
        correct += (y in best) / len(best)
    return correct / n_samples


@dataclass
class EncodedSet:
    rows: list[np.ndarray]
    labels: np.ndarray | None

    def __len__(self) -> int:
        return len(self.rows)


def encode_corpus(corpus: Corpus, vocab: Vocabulary, max_len: int | None = None) -> EncodedSet:
    rows = [vocab.encode(r, max_len) for r in corpus.rows]
    labels = None if corpus.labels is None else np.asarray(corpus.labels, dtype=np.int64)
    return EncodedSet(rows, labels)


def pool_unlabeled(labeled_pool: Corpus, exclude: np.ndarray) -> Corpus:
    """Unlabeled view of a labeled pool minus ``exclude`` (used when no unlabeled file exists)."""
    ex = set(int(i) for i in exclude)
    keep = [i for i in range(len(labeled_pool)) if i not in ex]
    return labeled_pool.subset(keep, tag="unlabeled").unlabeled()


__all__ = [
    "RESERVED",
    "Corpus",
    "Vocabulary",
    "tokenize_whitespace",
    "build_vocab",
    "load_tsv_dataset",
    "write_tsv_dataset",
    "Splits",
    "make_splits",
    "load_pretrained_vectors",
    "CorpusStats",
    "corpus_stats",
    "SynthSpec",
    "disjoint_dominant_probs",
    "synth_generate",
    "bayes_accuracy",
    "EncodedSet",
    "encode_corpus",
    "pool_unlabeled",
    "BOS_ID",
    "EOS_ID",
    "PAD_ID",
    "UNK_ID",
]
