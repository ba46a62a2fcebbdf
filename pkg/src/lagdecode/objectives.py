"""Differentiable decoding objectives over a relaxed output sequence.

Every graph-building function takes ``y_rows``: the (T, V) rows the models
consume.  During decoding these are straight-through one-hots; gradient
checks feed arbitrary soft rows directly.  ``discrete_eval`` recomputes each
objective in plain numpy from token ids and serves as the oracle path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .simplex import SoftSequence, one_hot, straight_through
from .toy_models import (EOS, ToyModel, classifier_logits, lm_logits,
                         pooled_embedding)

KINDS = ("primary-nll", "classifier", "cosine-dissim", "wmd")


@dataclass
class TransportPlan:
    plan: np.ndarray
    cost: np.ndarray
    value: float


@dataclass(frozen=True)
class ObjectiveHandle:
    kind: str
    model: ToyModel = field(compare=False)
    label: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.kind == "classifier":
            self.model.require("classifier")
            if self.label is None or not 0 <= self.label < self.model.n_classes:
                raise ValueError(f"invalid class label {self.label}")
        if self.kind == "primary-nll":
            self.model.require("lm")

    @property
    def arity(self) -> str:
        """'target' for f(y) objectives, 'source-target' for g(x, y)."""
        return "source-target" if self.kind in ("cosine-dissim", "wmd") else "target"

    @property
    def vocab_size(self) -> int:
        return self.model.vocab_size

    def build(self, x: Sequence[int], y_rows, plan: np.ndarray | None = None) -> ad.Node:
        if self.kind == "primary-nll":
            return primary_nll(self.model, x, y_rows)
        if self.kind == "classifier":
            return classifier_constraint(self.model, y_rows, self.label)
        if self.kind == "cosine-dissim":
            return cosine_dissimilarity(self.model, x, y_rows)
        return wmd(self.model, x, y_rows, plan=plan)

    def on_soft(self, x: Sequence[int], y: SoftSequence) -> tuple[ad.Node, ad.Node]:
        """Build on a soft sequence via the straight-through projection.

        Returns ``(objective, leaf)`` where ``leaf`` holds the simplex rows.
        """
        leaf = ad.leaf(y.probs, name="y_soft")
        return self.build(x, straight_through(leaf)), leaf


def _check_rows(model: ToyModel, y_rows) -> ad.Node:
    y_rows = ad.as_node(y_rows)
    if y_rows.value.ndim != 2 or y_rows.shape[1] != model.vocab_size:
        raise ValueError(f"rows of width {model.vocab_size} expected, got {y_rows.shape}")
    if y_rows.shape[0] == 0:
        raise ValueError("output sequence is empty")
    return y_rows


def primary_nll(model: ToyModel, x: Sequence[int], y_rows) -> ad.Node:
    """Sum over positions of cross-entropy between the LM prediction and y_k.

    The LM reads the start marker, then ``x``, then the output rows.
    """
    y_rows = _check_rows(model, y_rows)
    prefix = one_hot((EOS,) + tuple(x), model.vocab_size)
    P, T = prefix.shape[0], y_rows.shape[0]
    logits = lm_logits(model, ad.concat_rows(ad.constant(prefix), y_rows))
    return ad.cross_entropy(ad.take_rows(logits, P - 1, P - 1 + T), y_rows)


def classifier_constraint(model: ToyModel, y_rows, label: int) -> ad.Node:
    """``-log p(label | y)``; satisfied at the 0.5-probability level when <= ln 2."""
    if label is None or not 0 <= label < (model.n_classes or 0):
        raise ValueError(f"invalid class label {label}")
    y_rows = _check_rows(model, y_rows)
    target = one_hot([label], model.n_classes)[0]
    return ad.cross_entropy(classifier_logits(model, y_rows), target)


def cosine_dissimilarity(model: ToyModel, x: Sequence[int], y_rows) -> ad.Node:
    y_rows = _check_rows(model, y_rows)
    px = pooled_embedding(model, one_hot(x, model.vocab_size))
    py = pooled_embedding(model, y_rows)
    return 1.0 - ad.cosine(px, py)


# --- word mover's distance --------------------------------------------------

def _half_sq_dist_fwd(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return 0.5 * np.einsum("ijk,ijk->ij", diff, diff)


def _half_sq_dist_vjp(g, out, a, b):
    diff = a[:, None, :] - b[None, :, :]
    wd = g[:, :, None] * diff
    return wd.sum(axis=1), -wd.sum(axis=0)


_half_sq_dist = ad.Primitive("half_sq_dist", _half_sq_dist_fwd, _half_sq_dist_vjp)


def cosine_cost(a, b) -> ad.Node:
    """Pairwise ``1 - cos`` between the rows of ``a`` and ``b``.

    Computed as half the squared distance between unit-normalized rows, which
    is algebraically identical and exactly zero for identical rows.
    """
    return _half_sq_dist(ad.normalize_rows(a), ad.normalize_rows(b))


def solve_transport(cost) -> TransportPlan:
    """Exact optimal coupling with uniform marginals 1/n (rows), 1/m (columns).

    With ``L = lcm(n, m)`` every row is split into ``L/n`` unit sources and
    every column into ``L/m`` unit sinks; the integral transport polytope's
    optimum is then an assignment problem solved exactly.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or min(cost.shape) < 1:
        raise ValueError(f"cost must be a nonempty matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost must be finite")
    n, m = cost.shape
    L = math.lcm(n, m)
    rows = np.repeat(np.arange(n), L // n)
    cols = np.repeat(np.arange(m), L // m)
    r, c = linear_sum_assignment(cost[np.ix_(rows, cols)])
    counts = np.zeros((n, m))
    np.add.at(counts, (rows[r], cols[c]), 1.0)
    plan = counts / L
    return TransportPlan(plan, cost, float(np.sum(plan * cost)))


def wmd(model: ToyModel, x: Sequence[int], y_rows, plan: np.ndarray | None = None) -> ad.Node:
    """Word mover's distance with the transport plan held constant.

    The plan is solved on the forward cost unless given; gradients reach
    ``y_rows`` only through the cost matrix.
    """
    y_rows = _check_rows(model, y_rows)
    if len(x) == 0:
        raise ValueError("source sequence is empty")
    E = model.embedding
    cost = cosine_cost(ad.constant(E[np.asarray(x)]), y_rows @ E)
    if plan is None:
        plan = solve_transport(cost.value).plan
    return ad.sum(ad.mul(ad.constant(plan), cost))


# --- discrete oracle path ---------------------------------------------------

def _np_log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def discrete_nll(model: ToyModel, x: Sequence[int], y: Sequence[int]) -> float:
    p = model.params
    seq = np.asarray((EOS,) + tuple(x) + tuple(y))
    emb = p["E"][seq]
    ctx = np.cumsum(emb, axis=0) / np.arange(1, len(seq) + 1)[:, None]
    h = np.tanh(emb @ p["Wp"] + ctx @ p["Wc"] + p["b1"])
    logp = _np_log_softmax(h @ p["Wo"] + p["bo"])
    P = len(x) + 1
    return float(-sum(logp[P - 1 + k, t] for k, t in enumerate(y)))


def discrete_classifier_logp(model: ToyModel, y: Sequence[int]) -> np.ndarray:
    p = model.params
    pooled = p["E"][np.asarray(y)].mean(axis=0)
    return _np_log_softmax(np.tanh(pooled @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"])


def discrete_eval(obj: ObjectiveHandle, x: Sequence[int], y: Sequence[int]) -> float:
    V = obj.vocab_size
    if any(t < 0 or t >= V for t in y) or not len(y):
        raise ValueError(f"output tokens must be a nonempty sequence of ids in [0, {V})")
    if any(t < 0 or t >= V for t in x):
        raise ValueError(f"input tokens must lie in [0, {V})")
    E = obj.model.params["E"]
    if obj.kind == "primary-nll":
        return discrete_nll(obj.model, x, y)
    if obj.kind == "classifier":
        return float(-discrete_classifier_logp(obj.model, y)[obj.label])
    if obj.kind == "cosine-dissim":
        a, b = E[np.asarray(x)].mean(axis=0), E[np.asarray(y)].mean(axis=0)
        na = np.sqrt(a @ a) + ad.COSINE_EPS
        nb = np.sqrt(b @ b) + ad.COSINE_EPS
        return float(1.0 - (a @ b) / (na * nb))
    ex, ey = E[np.asarray(x)], E[np.asarray(y)]
    ux = ex / np.maximum(np.linalg.norm(ex, axis=1, keepdims=True), ad.COSINE_EPS)
    uy = ey / np.maximum(np.linalg.norm(ey, axis=1, keepdims=True), ad.COSINE_EPS)
    diff = ux[:, None, :] - uy[None, :, :]
    return solve_transport(0.5 * (diff * diff).sum(axis=-1)).value
