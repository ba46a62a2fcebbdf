"""Constrained decoding by simultaneous descent on the output simplexes and
ascent on the Lagrange multipliers, with damping and threshold annealing.

A linear-combination (fixed weights) baseline shares the same primal loop.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .objectives import ObjectiveHandle, discrete_eval, primary_nll
from .simplex import (HardSequence, SoftSequence, argmax_decode, exponentiated_step,
                      init_uniform, straight_through)
from .toy_models import ToyModel, lm_next_log_probs

log = logging.getLogger(__name__)

MODES = ("mdmm", "mdmm-undamped", "linear-combination")

# Threshold defaults per objective kind: (relaxed start, target).
DEFAULT_EPSILON_INIT = {"classifier": 10.0, "cosine-dissim": 2.0, "wmd": 2.0}
DEFAULT_EPSILON_FINAL = {"classifier": math.log(2.0), "cosine-dissim": 0.15, "wmd": 0.4}


class DecodeError(RuntimeError):
    pass


@dataclass(frozen=True)
class AnnealSchedule:
    hold_until: int = 40
    reach_final: int = 80

    def __post_init__(self):
        if not 0 <= self.hold_until < self.reach_final:
            raise ValueError("need 0 <= hold_until < reach_final")


@dataclass(frozen=True)
class Constraint:
    objective: ObjectiveHandle
    epsilon_final: float
    epsilon_init: float
    multiplier: float = 0.0
    damping: float | None = None  # None: use DecoderConfig.damping

    def __post_init__(self):
        if self.multiplier < 0:
            raise ValueError("multiplier must be nonnegative")
        if self.damping is not None and self.damping < 0:
            raise ValueError("damping must be nonnegative")

    @classmethod
    def default(cls, objective: ObjectiveHandle, **overrides) -> "Constraint":
        kw = dict(epsilon_final=DEFAULT_EPSILON_FINAL[objective.kind],
                  epsilon_init=DEFAULT_EPSILON_INIT[objective.kind])
        kw.update(overrides)
        return cls(objective, **kw)

    @property
    def active(self) -> bool:
        return math.isfinite(self.epsilon_final)


@dataclass(frozen=True)
class DecoderConfig:
    eta1: float = 50.0
    eta2: float = 2.0
    max_steps: int = 100
    length_window: int = 5
    damping: float = 1.0
    mode: str = "mdmm"
    uniform_mix: float = 1e-3
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)

    def __post_init__(self):
        if not (self.eta1 > 0 and self.eta2 > 0):
            raise ValueError("step sizes must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.length_window < 0:
            raise ValueError("length_window must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.schedule.reach_final > self.max_steps:
            raise ValueError("annealing must finish within max_steps")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["anneal_hold_until"] = d["schedule"]["hold_until"]
        d["anneal_reach_final"] = d["schedule"]["reach_final"]
        del d["schedule"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        d = dict(d)
        sched = AnnealSchedule(d.pop("anneal_hold_until", 40), d.pop("anneal_reach_final", 80))
        return cls(schedule=sched, **d)

    def damping_for(self, c: Constraint) -> float:
        if self.mode == "mdmm-undamped":
            return 0.0
        return self.damping if c.damping is None else c.damping


@dataclass(frozen=True)
class LinearWeights:
    alpha: float
    weights: tuple[float, ...]

    def __post_init__(self):
        if self.alpha < 0 or any(w < 0 for w in self.weights):
            raise ValueError("weights must be nonnegative")
        if abs(self.alpha + sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")


@dataclass(frozen=True)
class StepRecord:
    step: int
    primary_loss: float
    losses: tuple[float, ...]
    multipliers: tuple[float, ...]
    thresholds: tuple[float, ...]
    tokens: HardSequence
    num_satisfied: int


@dataclass
class DecodeTrace:
    epsilon_final: tuple[float, ...]
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def series(self, attr: str, k: int | None = None) -> np.ndarray:
        vals = [getattr(r, attr) for r in self.records]
        return np.array([v[k] for v in vals] if k is not None else vals, dtype=float)


@dataclass
class DecodeResult:
    tokens: HardSequence
    length: int
    primary_loss: float
    num_satisfied: int
    satisfied: bool
    trace: DecodeTrace
    greedy: HardSequence = ()
    per_length: dict = field(default_factory=dict)

    @property
    def per_token_loss(self) -> float:
        return self.primary_loss / self.length


# --- Lagrangian pieces ------------------------------------------------------

def lagrangian_value(primary, values: Sequence, multipliers: Sequence, thresholds: Sequence[float],
                     dampings: Sequence[float]) -> ad.Node:
    """Damped Lagrangian ``primary - sum_i (lam_i - zeta_i) * (eps_i - f_i)``.

    ``zeta_i = d_i * stop_gradient(eps_i - f_i)``; with ``d_i = 0`` this is the
    plain Lagrangian.  Constraints with an infinite threshold contribute nothing.
    """
    L = ad.as_node(primary)
    for f, lam, eps, d in zip(values, multipliers, thresholds, dampings):
        if not math.isfinite(eps):
            continue
        slack = ad.sub(eps, f)
        zeta = ad.mul(d, ad.stop_gradient(slack))
        L = ad.sub(L, ad.mul(ad.sub(lam, zeta), slack))
    return L


def multiplier_ascent_step(constraints: Sequence[Constraint], gradients: Sequence[float],
                           eta2: float) -> list[Constraint]:
    """Projected ascent ``lam <- max(0, lam + eta2 * dL/dlam)``."""
    if not eta2 > 0:
        raise ValueError("eta2 must be positive")
    out = []
    for c, g in zip(constraints, gradients):
        lam = max(0.0, c.multiplier + eta2 * g)
        out.append(dataclasses.replace(c, multiplier=lam))
    return out


def threshold_at(schedule: AnnealSchedule, c: Constraint, t: int) -> float:
    if c.epsilon_init == c.epsilon_final or t >= schedule.reach_final:
        return c.epsilon_final
    if t <= schedule.hold_until:
        return c.epsilon_init
    frac = (t - schedule.hold_until) / (schedule.reach_final - schedule.hold_until)
    return c.epsilon_init + (c.epsilon_final - c.epsilon_init) * frac


def count_satisfied(losses: Sequence[float], thresholds: Sequence[float]) -> int:
    return int(sum(f <= eps for f, eps in zip(losses, thresholds)))


# --- fixed-length decode ----------------------------------------------------

def decode_fixed_length(x: Sequence[int], T: int, lm: ToyModel, constraints: Sequence[Constraint],
                        config: DecoderConfig = DecoderConfig(),
                        weights: LinearWeights | None = None,
                        y0: SoftSequence | None = None,
                        observer=None) -> tuple[HardSequence, DecodeTrace]:
    """Run ``config.max_steps`` primal/dual iterations at output length ``T``.

    In ``linear-combination`` mode ``weights`` scale the primary loss and each
    constraint; multipliers and thresholds are then frozen.  ``observer`` is
    called as ``observer(step, soft_sequence, constraints)`` after each update.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    linear = config.mode == "linear-combination"
    if linear and (weights is None or len(weights.weights) != len(constraints)):
        raise ValueError("linear-combination mode needs one weight per constraint")
    x = tuple(x)
    cons = [dataclasses.replace(c, multiplier=0.0) for c in constraints]
    eps_final = tuple(c.epsilon_final for c in cons)
    dampings = [config.damping_for(c) for c in cons]
    y = y0 if y0 is not None else init_uniform(T, lm.vocab_size)
    trace = DecodeTrace(eps_final)

    for t in range(config.max_steps):
        if linear:
            thresholds = list(eps_final)
        else:
            thresholds = [threshold_at(config.schedule, c, t) for c in cons]
        y_leaf = ad.leaf(y.probs, name="y_soft")
        y_hat = straight_through(y_leaf)
        try:
            primary = primary_nll(lm, x, y_hat)
        except ad.NonFiniteError as exc:
            raise DecodeError(f"step {t}: primary objective non-finite ({exc})") from exc
        values = []
        for i, c in enumerate(cons):
            try:
                values.append(c.objective.build(x, y_hat))
            except ad.NonFiniteError as exc:
                raise DecodeError(f"step {t}: constraint {i} ({c.objective.kind}) non-finite ({exc})") from exc

        losses = tuple(float(v.value) for v in values)
        if linear:
            total = ad.mul(weights.alpha, primary)
            for w, v in zip(weights.weights, values):
                total = ad.add(total, ad.mul(w, v))
            (g_y,) = ad.backward(total, [y_leaf])
            shown = tuple(weights.weights)
        else:
            lams = [ad.leaf(c.multiplier, name=f"lambda{i}") for i, c in enumerate(cons)]
            L = lagrangian_value(primary, values, lams, thresholds, dampings)
            active = [i for i, eps in enumerate(thresholds) if math.isfinite(eps)]
            grads = ad.backward(L, [y_leaf] + [lams[i] for i in active])
            g_y = grads[0]
            g_lam = [-math.inf] * len(cons)
            for i, g in zip(active, grads[1:]):
                g_lam[i] = float(g)
            shown = tuple(c.multiplier for c in cons)

        if not (math.isfinite(float(primary.value)) and np.all(np.isfinite(g_y))):
            raise DecodeError(f"step {t}: non-finite gradient")
        tokens = tuple(int(i) for i in np.argmax(y_hat.value, axis=1))
        trace.records.append(StepRecord(
            step=t, primary_loss=float(primary.value), losses=losses, multipliers=shown,
            thresholds=tuple(thresholds), tokens=tokens,
            num_satisfied=count_satisfied(losses, eps_final)))

        y = exponentiated_step(y, g_y, config.eta1)
        if config.uniform_mix > 0:
            y = SoftSequence((1.0 - config.uniform_mix) * y.probs + config.uniform_mix / y.vocab_size)
        if not linear:
            cons = multiplier_ascent_step(cons, g_lam, config.eta2)
        if observer is not None:
            observer(t, y, cons)

    return select_candidate(trace), trace


def select_step(trace: DecodeTrace) -> StepRecord:
    """Most constraints satisfied (against the final thresholds), then lowest
    primary loss, then earliest step."""
    if not trace.records:
        raise ValueError("empty trace")
    return min(trace.records, key=lambda r: (-r.num_satisfied, r.primary_loss, r.step))


def select_candidate(trace: DecodeTrace) -> HardSequence:
    return select_step(trace).tokens


def linear_combination_decode(x: Sequence[int], T: int, lm: ToyModel,
                              constraints: Sequence[Constraint], weights: LinearWeights,
                              config: DecoderConfig = DecoderConfig()) -> tuple[HardSequence, DecodeTrace]:
    """Fixed-weight scalarization ``alpha * nll + sum_k w_k * f_k``."""
    cfg = dataclasses.replace(config, mode="linear-combination")
    return decode_fixed_length(x, T, lm, constraints, cfg, weights=weights)


# --- length search ----------------------------------------------------------

def greedy_decode(model: ToyModel, x: Sequence[int], max_len: int) -> HardSequence:
    """Argmax continuation of ``x`` until the end token or ``max_len`` tokens.

    The end token itself is not included, so the result may be empty.
    """
    out: list[int] = []
    context = [model.eos_id if model.eos_id is not None else 0] + list(x)
    while len(out) < max_len:
        tok = int(np.argmax(lm_next_log_probs(model, context + out)))
        if tok == model.eos_id:
            break
        out.append(tok)
    return tuple(out)


def decode(x: Sequence[int], lm: ToyModel, constraints: Sequence[Constraint],
           config: DecoderConfig = DecoderConfig(), max_len: int = 20,
           length: int | None = None) -> DecodeResult:
    """Decode at every length in ``[L - w, L + w]`` and keep the best.

    ``L`` is the greedy length (or ``length`` when given).  Lengths are ranked
    by constraints satisfied, then per-token primary loss; a length whose decode
    goes non-finite is skipped.
    """
    greedy = greedy_decode(lm, x, max_len)
    L = max(1, len(greedy)) if length is None else length
    w = config.length_window
    best, best_key, per_length = None, None, {}
    for T in range(max(1, L - w), L + w + 1):
        try:
            tokens, trace = decode_fixed_length(x, T, lm, constraints, config)
        except DecodeError as exc:
            log.warning("length %d skipped: %s", T, exc)
            continue
        rec = select_step(trace)
        key = (-rec.num_satisfied, rec.primary_loss / T, T)
        per_length[T] = (tokens, rec.primary_loss, rec.num_satisfied)
        if best_key is None or key < best_key:
            best_key = key
            best = DecodeResult(tokens, T, rec.primary_loss, rec.num_satisfied,
                                rec.num_satisfied == len(constraints), trace, greedy)
    if best is None:
        raise DecodeError("every length in the window failed")
    best.per_length = per_length
    return best


def sequence_losses(x, y, lm: ToyModel, constraints: Sequence[Constraint]) -> tuple[float, list[float]]:
    """Primary loss and constraint values of a discrete output."""
    primary = discrete_eval(ObjectiveHandle("primary-nll", lm), x, y)
    return primary, [discrete_eval(c.objective, x, y) for c in constraints]
