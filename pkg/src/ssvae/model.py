"""The sequence SSVAE network.

A y-encoder (BiLSTM + linear head to class logits), an optional z-encoder
(BiLSTM + mean head + softplus scale head) and an autoregressive LSTM decoder
whose every step sees ``[previous token embedding ; y ; z]``. With ``drop_z``
the z tower does not exist at all; with ``supervised_only`` only the
embedding and the y tower exist.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import (
    EmbeddingTable,
    LstmCell,
    bilstm_encode,
    dropout,
    embed,
    init_linear,
    init_lstm,
    linear,
    lstm_step,
)
from .stochastic import GaussianPosterior
from .tensor import Tensor

PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3


@dataclass(frozen=True)
class Architecture:
    vocab_size: int
    num_classes: int
    embed_dim: int = 300
    enc_hidden: int = 100
    dec_hidden: int = 200
    z_dim: int = 32
    drop_z: bool = False
    supervised_only: bool = False

    @property
    def has_z(self) -> bool:
        return not (self.drop_z or self.supervised_only)

    @property
    def has_decoder(self) -> bool:
        return not self.supervised_only

    @property
    def decoder_input_size(self) -> int:
        return self.embed_dim + self.num_classes + (self.z_dim if self.has_z else 0)


@dataclass
class TokenBatch:
    ids: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return self.ids.shape[0]

    @classmethod
    def from_rows(cls, rows, labels=None, max_len: int | None = None) -> TokenBatch:
        rows = [np.asarray(r[:max_len] if max_len else r, dtype=np.int64) for r in rows]
        lengths = np.array([len(r) for r in rows], dtype=np.int64)
        ids = np.full((len(rows), int(lengths.max()) if rows else 0), PAD_ID, dtype=np.int64)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = r
        return cls(ids, lengths, None if labels is None else np.asarray(labels))


class ModelParams:
    """Named trainable tensors plus the architecture they realize."""

    def __init__(self, arch: Architecture, tensors: dict[str, Tensor]) -> None:
        self.arch = arch
        self.tensors = tensors

    @classmethod
    def initialize(
        cls,
        arch: Architecture,
        rng: np.random.Generator,
        embeddings: np.ndarray | None = None,
    ) -> ModelParams:
        E, H, K = arch.embed_dim, arch.enc_hidden, arch.num_classes
        arrays: dict[str, np.ndarray] = {}
        if embeddings is None:
            table = rng.uniform(-0.1, 0.1, size=(arch.vocab_size, E))
        else:
            table = np.array(embeddings, dtype=np.float64)
            if table.shape != (arch.vocab_size, E):
                raise ValueError(f"embedding table shape {table.shape} != {(arch.vocab_size, E)}")
        table[PAD_ID] = 0.0
        arrays["embedding"] = table
        # y tower first so every variant draws identical shared weights
        for direction in ("fwd", "bwd"):
            arrays[f"enc_y.{direction}.W"], arrays[f"enc_y.{direction}.b"] = init_lstm(rng, E, H)
        arrays["y_head.W"], arrays["y_head.b"] = init_linear(rng, 2 * H, K)
        if arch.has_z:
            for direction in ("fwd", "bwd"):
                arrays[f"enc_z.{direction}.W"], arrays[f"enc_z.{direction}.b"] = init_lstm(rng, E, H)
            arrays["mu_head.W"], arrays["mu_head.b"] = init_linear(rng, 2 * H, arch.z_dim)
            arrays["sigma_head.W"], arrays["sigma_head.b"] = init_linear(rng, 2 * H, arch.z_dim)
        if arch.has_decoder:
            arrays["dec.W"], arrays["dec.b"] = init_lstm(rng, arch.decoder_input_size, arch.dec_hidden)
            arrays["out.W"], arrays["out.b"] = init_linear(rng, arch.dec_hidden, arch.vocab_size)
        return cls(arch, {k: Tensor(v) for k, v in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def with_arrays(self, arrays: dict[str, np.ndarray], requires_grad: bool = False) -> ModelParams:
        return ModelParams(
            self.arch,
            {k: Tensor(arrays[k], requires_grad=requires_grad, dtype=np.asarray(arrays[k]).dtype) for k in self.tensors},
        )

    def trainable(self) -> ModelParams:
        """Fresh leaf copies (sharing data) that require gradients."""
        return ModelParams(self.arch, {k: Tensor._wrap(t.data, True) for k, t in self.tensors.items()})

    def embedding(self) -> EmbeddingTable:
        return EmbeddingTable(self.tensors["embedding"], PAD_ID)

    def cell(self, prefix: str) -> LstmCell:
        return LstmCell(self.tensors[f"{prefix}.W"], self.tensors[f"{prefix}.b"])


def parameter_count(arch: Architecture) -> int:
    """Closed-form parameter count; mirrors :meth:`ModelParams.initialize`."""
    E, H, K, V = arch.embed_dim, arch.enc_hidden, arch.num_classes, arch.vocab_size
    lstm = lambda n_in, n_h: (n_in + n_h) * 4 * n_h + 4 * n_h  # noqa: E731
    n = V * E + 2 * lstm(E, H) + (2 * H + 1) * K
    if arch.has_z:
        n += 2 * lstm(E, H) + 2 * (2 * H + 1) * arch.z_dim
    if arch.has_decoder:
        n += lstm(arch.decoder_input_size, arch.dec_hidden) + (arch.dec_hidden + 1) * V
    return n


def _embedded(params: ModelParams, ids: np.ndarray, train: bool, rate: float, rng) -> Tensor:
    return dropout(embed(params.embedding(), ids), rate, train, rng)


def encode_y(params: ModelParams, batch: TokenBatch, train: bool = False, rate: float = 0.0, rng=None,
             emb: Tensor | None = None) -> Tensor:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if emb is None:
        emb = _embedded(params, batch.ids, train, rate, rng)
    h = bilstm_encode(params.cell("enc_y.fwd"), params.cell("enc_y.bwd"), emb, batch.lengths)
    h = dropout(h, rate, train, rng)
    return linear(h, params["y_head.W"], params["y_head.b"])


def encode(
    params: ModelParams,
    batch: TokenBatch,
    train: bool = False,
    rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, GaussianPosterior | None]:
    """Class logits from the y tower and, unless z is dropped, q(z|x) from the z tower."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    emb = _embedded(params, batch.ids, train, rate, rng)
    logits = encode_y(params, batch, train, rate, rng, emb=emb)
    if not params.arch.has_z:
        return logits, None
    h = bilstm_encode(params.cell("enc_z.fwd"), params.cell("enc_z.bwd"), emb, batch.lengths)
    h = dropout(h, rate, train, rng)
    mu = linear(h, params["mu_head.W"], params["mu_head.b"])
    sigma = T.softplus(linear(h, params["sigma_head.W"], params["sigma_head.b"]))
    return logits, GaussianPosterior(mu, sigma)


def decoder_io(batch: TokenBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing inputs ``[BOS, x...]``, targets ``[x..., EOS]`` and their mask."""
    B, L = batch.ids.shape
    steps = L + 1
    inputs = np.full((B, steps), PAD_ID, dtype=np.int64)
    targets = np.full((B, steps), PAD_ID, dtype=np.int64)
    inputs[:, 0] = BOS_ID
    inputs[:, 1:] = batch.ids
    targets[:, :L] = batch.ids
    targets[np.arange(B), batch.lengths] = EOS_ID
    mask = np.arange(steps)[None, :] <= batch.lengths[:, None]
    return inputs, targets, mask


def decode_logprob(
    params: ModelParams,
    batch: TokenBatch,
    y,
    z: Tensor | None = None,
    train: bool = False,
    rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-row teacher-forced log p(x | y[, z]), including the end-of-sequence token."""
    arch = params.arch
    if not arch.has_decoder:
        raise ValueError("model has no decoder")
    y = T.as_tensor(y)
    yd = y.data
    if yd.shape != (len(batch), arch.num_classes) or np.any(yd < -1e-6) or np.any(np.abs(yd.sum(-1) - 1.0) > 1e-4):
        raise ValueError("y must be a batch of distributions over the classes")
    if (z is not None) != arch.has_z:
        raise ValueError("z must be given exactly when the model has a z latent")
    inputs, targets, mask = decoder_io(batch)
    B, steps = inputs.shape
    emb = _embedded(params, inputs, train, rate, rng)
    cond = y if z is None else T.concat([y, z], axis=-1)
    cell = params.cell("dec")
    h = Tensor(np.zeros((B, cell.hidden_size)))
    c = Tensor(np.zeros((B, cell.hidden_size)))
    hs = []
    for t in range(steps):
        h, c = lstm_step(cell, T.concat([emb[:, t, :], cond], axis=-1), h, c)
        hs.append(h)
    # time-major rows: step t occupies rows [t*B, (t+1)*B)
    flat = T.concat(hs, axis=0)
    logp = T.log_softmax(linear(flat, params["out.W"], params["out.b"]))
    picked = T.pick(logp, targets.T.ravel()).reshape(steps, B)
    return (picked * mask.T.astype(picked.dtype)).sum(axis=0)


def classify(params: ModelParams, batch: TokenBatch) -> tuple[np.ndarray, np.ndarray]:
    """Predicted labels (ties go to the lowest index) and class probabilities; eval mode."""
    logits = encode_y(params, batch)
    probs = T.softmax(logits).data
    return np.argmax(logits.data, axis=-1), probs


def predict(params: ModelParams, rows, batch_size: int = 256, max_len: int | None = None) -> np.ndarray:
    preds = []
    for start in range(0, len(rows), batch_size):
        batch = TokenBatch.from_rows(rows[start:start + batch_size], max_len=max_len)
        preds.append(classify(params, batch)[0])
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(params: ModelParams, rows, labels, batch_size: int = 256, max_len: int | None = None) -> float:
    labels = np.asarray(labels)
    if len(rows) == 0:
        raise ValueError("cannot measure accuracy on an empty set")
    return float(np.mean(predict(params, rows, batch_size, max_len) == labels))


# ---------------------------------------------------------------------------
# checkpoints: <path>.bin holds raw array bytes back to back, <path>.manifest
# lists "name dtype shape offset nbytes" per array plus "# key=value" metadata


def save_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {k}={v}" for k, v in (meta or {}).items()]
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays.items():
            if any(ch.isspace() for ch in name):
                raise ValueError(f"array name {name!r} contains whitespace")
            arr = np.ascontiguousarray(arr)
            buf = arr.tobytes()
            fh.write(buf)
            shape = "x".join(str(d) for d in arr.shape) or "scalar"
            lines.append(f"{name} {arr.dtype.str} {shape} {offset} {len(buf)}")
            offset += len(buf)
    path.with_suffix(".manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    blob = path.with_suffix(".bin").read_bytes()
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for lineno, line in enumerate(path.with_suffix(".manifest").read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
            continue
        try:
            name, dtype, shape, offset, nbytes = line.split()
            dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            start, n = int(offset), int(nbytes)
        except ValueError:
            raise ValueError(f"malformed manifest line {lineno}: {line!r}") from None
        arrays[name] = np.frombuffer(blob[start:start + n], dtype=np.dtype(dtype)).reshape(dims).copy()
    return arrays, meta


def save_params(path, params: ModelParams) -> None:
    meta = {f"arch.{k}": str(v) for k, v in vars(params.arch).items()}
    save_arrays(path, params.arrays(), meta)


def load_params(path) -> ModelParams:
    arrays, meta = load_arrays(path)
    fields = {}
    for key, value in meta.items():
        if key.startswith("arch."):
            name = key[5:]
            fields[name] = value == "True" if value in ("True", "False") else int(value)
    arch = Architecture(**fields)
    return ModelParams(arch, {k: Tensor(v, dtype=v.dtype) for k, v in arrays.items()})


__all__ = [
    "Architecture",
    "TokenBatch",
    "ModelParams",
    "parameter_count",
    "encode",
    "encode_y",
    "decode_logprob",
    "decoder_io",
    "classify",
    "predict",
    "accuracy",
    "save_arrays",
    "load_arrays",
    "save_params",
    "load_params",
    "PAD_ID",
    "UNK_ID",
    "BOS_ID",
    "EOS_ID",
]
