"""Training objectives: angular prototypical metric loss plus softmax
cross-entropy over speaker labels, combined additively.

Batches are arranged (N speakers, M utterances, D dims) with unit-norm
embeddings; the last utterance of each speaker is the query, the mean of
the others its prototype.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import NumericalError, ShapeError
from .tensor import Tensor


class ProtoParams:
    """Learnable similarity scale/bias of the prototypical softmax. The
    scale must stay positive; the trainer clamps it after every step."""

    W_FLOOR = 1e-6

    def __init__(self, scale_init: float = 10.0, bias_init: float = -5.0):
        self.scale = Tensor(np.array([float(scale_init)]), requires_grad=True)
        self.bias = Tensor(np.array([float(bias_init)]), requires_grad=True)

    def named_parameters(self, prefix: str = "proto"):
        return [(f"{prefix}.scale", self.scale), (f"{prefix}.bias", self.bias)]

    def clamp_(self) -> None:
        np.maximum(self.scale.data, self.W_FLOOR, out=self.scale.data)


class ClassifierHead:
    """Last linear layer for the speaker classification loss."""

    def __init__(self, num_speakers: int, embed_dim: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_speakers = num_speakers
        self.weight = Tensor(rng.normal(0.0, 1.0 / math.sqrt(embed_dim), (num_speakers, embed_dim)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(num_speakers), requires_grad=True)

    def named_parameters(self, prefix: str = "head"):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


def _check_batch(batch: Tensor) -> tuple[int, int, int]:
    if batch.ndim != 3:
        raise ShapeError(f"expected (N, M, D) batch, got {batch.shape}")
    n, m, d = batch.shape
    if m < 2:
        raise ShapeError(f"need at least 2 utterances per speaker, got M={m}")
    return n, m, d


def speaker_prototype(batch: Tensor, speaker: int) -> Tensor:
    """Mean of the first M-1 utterances of one speaker."""
    n, m, _ = _check_batch(batch)
    if not 0 <= speaker < n:
        raise IndexError(f"speaker {speaker} out of range [0, {n})")
    row = T.narrow(batch, 0, speaker, 1)
    support = T.narrow(row, 1, 0, m - 1)
    return T.reshape(T.reduce(support, (1,), "mean"), (batch.shape[2],))


def _unit_rows(x: Tensor, what: str) -> Tensor:
    sq = T.reduce(T.mul(x, x), (1,), "sum", keepdims=True)
    if np.any(sq.data <= 0.0):
        raise NumericalError(f"zero-norm {what} in prototypical loss")
    return T.div(x, T.sqrt(sq))


def _log_sum_exp_rows(logits: Tensor) -> Tensor:
    peak = T.reduce(logits, (1,), "max", keepdims=True)
    return T.add(peak, T.log(T.reduce(T.exp(T.add(logits, T.mul(peak, -1.0))), (1,), "sum", keepdims=True)))


def angular_proto_loss(batch: Tensor, params: ProtoParams) -> Tensor:
    """Softmax over scaled cosines between each query and all prototypes."""
    n, m, d = _check_batch(batch)
    queries = T.reshape(T.narrow(batch, 1, m - 1, 1), (n, d))
    prototypes = T.reduce(T.narrow(batch, 1, 0, m - 1), (1,), "mean")
    cosines = T.matmul(_unit_rows(queries, "query"),
                       T.moveaxis(_unit_rows(prototypes, "prototype"), 0, 1))
    logits = T.add(T.mul(cosines, params.scale), params.bias)
    lse = T.reshape(_log_sum_exp_rows(logits), (n,))
    own = T.reduce(T.mul(logits, Tensor(np.eye(n))), (1,), "sum")
    return T.reduce(T.add(lse, T.mul(own, -1.0)), (0,), "mean")


def softmax_ce_loss(embeddings: Tensor, labels, head: ClassifierHead) -> Tensor:
    """Mean negative log-likelihood of the labelled speakers."""
    if embeddings.ndim != 2:
        raise ShapeError(f"expected (B, D) embeddings, got {embeddings.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b = embeddings.shape[0]
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= head.num_speakers:
        raise ValueError(f"label out of range [0, {head.num_speakers})")
    logits = T.add(T.matmul(embeddings, T.moveaxis(head.weight, 0, 1)),
                   T.reshape(head.bias, (1, head.num_speakers)))
    lse = T.reshape(_log_sum_exp_rows(logits), (b,))
    onehot = np.zeros((b, head.num_speakers))
    onehot[np.arange(b), labels] = 1.0
    own = T.reduce(T.mul(logits, Tensor(onehot)), (1,), "sum")
    return T.reduce(T.add(lse, T.mul(own, -1.0)), (0,), "mean")


def combined_loss(batch: Tensor, labels, head: ClassifierHead,
                  params: ProtoParams) -> tuple[Tensor, float, float]:
    """Classification + prototypical loss; returns the summed scalar and the
    two component values for logging."""
    n, m, d = _check_batch(batch)
    flat = T.reshape(batch, (n * m, d))
    ce = softmax_ce_loss(flat, labels, head)
    proto = angular_proto_loss(batch, params)
    return T.add(ce, proto), ce.item(), proto.item()
