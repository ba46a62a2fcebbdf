"""Relaxed token sequences: one probability simplex per output position."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad

HardSequence = tuple  # tuple[int, ...] of token ids


def as_hard(tokens: Sequence[int], vocab_size: int | None = None) -> HardSequence:
    ids = tuple(int(t) for t in tokens)
    if not ids:
        raise ValueError("token sequence must be nonempty")
    if vocab_size is not None and any(t < 0 or t >= vocab_size for t in ids):
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    return ids


def one_hot(tokens: Sequence[int], vocab_size: int) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    out = np.zeros((len(ids), vocab_size))
    out[np.arange(len(ids)), ids] = 1.0
    return out


@dataclass
class SoftSequence:
    """``T`` rows, each a distribution over a vocabulary of size ``V``."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[0] < 1 or self.probs.shape[1] < 2:
            raise ValueError(f"expected a (T>=1, V>=2) matrix, got {self.probs.shape}")

    @property
    def length(self) -> int:
        return self.probs.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def from_tokens(cls, tokens: Sequence[int], vocab_size: int) -> "SoftSequence":
        return cls(one_hot(as_hard(tokens, vocab_size), vocab_size))

    def check(self, tol: float = 1e-6) -> None:
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ValueError("simplex entries must lie in [0, 1]")
        if np.any(np.abs(self.probs.sum(axis=1) - 1.0) > tol):
            raise ValueError("simplex rows must sum to 1")


def init_uniform(length: int, vocab_size: int) -> SoftSequence:
    if vocab_size < 2:
        raise ValueError("vocabulary must have at least 2 tokens")
    if length < 1:
        raise ValueError("length must be positive")
    return SoftSequence(np.full((length, vocab_size), 1.0 / vocab_size))


def argmax_decode(y: SoftSequence) -> HardSequence:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest id
    return tuple(int(i) for i in np.argmax(y.probs, axis=1))


def straight_through(y_node: ad.Node) -> ad.Node:
    """Hard one-hot forward value, identity Jacobian backward.

    Computed as ``onehot + (y - stop_gradient(y))``; the bracket is exactly
    zero in floating point, so the forward value is an exact one-hot.
    """
    probs = y_node.value
    hard = one_hot(np.argmax(probs, axis=1), probs.shape[1])
    return ad.add(ad.constant(hard), ad.sub(y_node, ad.stop_gradient(y_node)))


def exponentiated_step(y: SoftSequence, grad: np.ndarray, eta: float) -> SoftSequence:
    """Multiplicative update ``y * exp(-eta * grad)`` renormalized per row.

    Done in log space with the row maximum subtracted, so the largest
    surviving entry is exactly 1 before normalization.  Zero entries stay zero.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != y.probs.shape:
        raise ValueError(f"gradient shape {grad.shape} != {y.probs.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient must be finite")
    with np.errstate(divide="ignore"):
        logits = np.log(y.probs) - eta * grad
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return SoftSequence(w / w.sum(axis=1, keepdims=True))
