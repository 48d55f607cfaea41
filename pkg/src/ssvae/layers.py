"""Embedding lookup, LSTM cells, bidirectional encoding and dropout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PAD_ID = 0


@dataclass
class EmbeddingTable:
    weights: Tensor
    padding_idx: int = PAD_ID

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class LstmCell:
    """Gate weights act on ``[x ; h]``; gate column order is input, forget, output, candidate."""

    W: Tensor
    b: Tensor

    def __post_init__(self) -> None:
        rows, cols = self.W.shape
        if cols % 4 or self.b.shape != (cols,) or rows <= cols // 4:
            raise ShapeError(f"inconsistent LSTM parameter shapes W{self.W.shape} b{self.b.shape}")

    @property
    def hidden_size(self) -> int:
        return self.W.shape[1] // 4

    @property
    def input_size(self) -> int:
        return self.W.shape[0] - self.hidden_size


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_lstm(rng: np.random.Generator, input_size: int, hidden_size: int) -> tuple[np.ndarray, np.ndarray]:
    fan_in = input_size + hidden_size
    W = uniform_init(rng, (fan_in, 4 * hidden_size), fan_in)
    b = np.zeros(4 * hidden_size)
    b[hidden_size:2 * hidden_size] = 1.0
    return W, b


def init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    return uniform_init(rng, (n_in, n_out), n_in), np.zeros(n_out)


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return x @ W + b


def embed(table: EmbeddingTable, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    bad = np.argwhere((ids < 0) | (ids >= table.vocab_size))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise IndexError(f"token id {int(ids[pos])} at position {pos} outside vocabulary of size {table.vocab_size}")
    return T.gather_rows(table.weights, ids, padding_idx=table.padding_idx)


def lstm_step(cell: LstmCell, x_t: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    H = cell.hidden_size
    if x_t.shape[-1] != cell.input_size or h.shape[-1] != H or c.shape[-1] != H:
        raise ShapeError(
            f"lstm_step: cell expects input {cell.input_size} / hidden {H}, "
            f"got x{x_t.shape} h{h.shape} c{c.shape}"
        )
    gates = T.concat([x_t, h], axis=-1) @ cell.W + cell.b
    ifo = T.sigmoid(gates[:, : 3 * H])
    cand = T.tanh(gates[:, 3 * H:])
    c_new = ifo[:, H:2 * H] * c + ifo[:, :H] * cand
    h_new = ifo[:, 2 * H:] * T.tanh(c_new)
    return h_new, c_new


def _zeros_state(batch: int, hidden: int) -> Tensor:
    return Tensor(np.zeros((batch, hidden)))


def _masked(new: Tensor, old: Tensor, active: np.ndarray) -> Tensor:
    keep = np.broadcast_to(active[:, None], new.shape).astype(new.dtype)
    return new * keep + old * (1.0 - keep)


def run_lstm(cell: LstmCell, seq: Tensor, lengths: np.ndarray, reverse: bool = False) -> tuple[Tensor, Tensor]:
    """Final (h, c) of ``cell`` over each row's first ``lengths[i]`` steps.

    Rows whose sequence has ended (or, in reverse, not yet started) keep
    their state exactly, so trailing padding never touches the result.
    """
    B = seq.shape[0]
    h = _zeros_state(B, cell.hidden_size)
    c = _zeros_state(B, cell.hidden_size)
    t_max, t_min = int(lengths.max()), int(lengths.min())
    steps = range(t_max - 1, -1, -1) if reverse else range(t_max)
    for t in steps:
        h_new, c_new = lstm_step(cell, seq[:, t, :], h, c)
        if t < t_min:
            h, c = h_new, c_new
        else:
            active = t < lengths
            h, c = _masked(h_new, h, active), _masked(c_new, c, active)
    return h, c


def bilstm_encode(fwd: LstmCell, bwd: LstmCell, seq: Tensor, lengths) -> Tensor:
    """Concatenate the forward state at each row's last token with the backward state at token 0."""
    lengths = np.asarray(lengths)
    if lengths.shape != (seq.shape[0],):
        raise ShapeError(f"lengths shape {lengths.shape} does not match batch {seq.shape[0]}")
    if np.any(lengths < 1):
        raise ValueError("bilstm_encode: zero-length sequence")
    if np.any(lengths > seq.shape[1]):
        raise ValueError("bilstm_encode: length exceeds sequence width")
    h_f, _ = run_lstm(fwd, seq, lengths)
    h_b, _ = run_lstm(bwd, seq, lengths, reverse=True)
    return T.concat([h_f, h_b], axis=-1)


def dropout(t: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return t
    keep = rng.random(t.shape) >= rate
    return t * (keep * (1.0 / (1.0 - rate))).astype(t.dtype)
