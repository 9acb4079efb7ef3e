"""Learning-rate schedules and the GD / AdamW / Muon update rules.

All optimizers apply decoupled weight decay (``W <- (1 - lr * wd) W``) before
the gradient step. ``W_C`` is never touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from sosd.model import TRAINABLE, GradientSet, ModelState
from sosd.spectral import as_matrix

__all__ = [
    "NS_COEFFS",
    "OptState",
    "OptimizerSpec",
    "ScheduleSpec",
    "clip_global_norm",
    "init_opt_state",
    "lr_at",
    "newton_schulz",
    "optimizer_step",
]

NS_COEFFS = (3.4445, -4.7750, 2.0315)

SCHEDULE_KINDS = ("constant", "step", "wsd", "cosine")
OPTIMIZER_KINDS = ("gd", "adamw", "muon")


@dataclass(frozen=True)
class ScheduleSpec:
    """Learning-rate schedule.

    ``milestones``/``factor`` drive ``step``; ``warmup``/``stable``/``decay``
    drive ``wsd``; ``warmup``/``min_ratio`` drive ``cosine``.
    """

    kind: str = "constant"
    base_lr: float = 0.05
    milestones: tuple[float, ...] = ()
    factor: float = 0.1
    warmup: int = 0
    stable: int = 0
    decay: int = 0
    min_ratio: float = 0.1

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        ms = tuple(float(m) for m in self.milestones)
        object.__setattr__(self, "milestones", ms)
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing fractions in (0, 1)")
        if min(self.warmup, self.stable, self.decay) < 0:
            raise ValueError("warmup, stable and decay must be nonnegative")
        if self.kind == "cosine" and not 0 < self.min_ratio <= 1:
            raise ValueError("min_ratio must lie in (0, 1]")

    def validate_total(self, total_steps: int):
        if self.kind == "wsd" and self.warmup + self.stable + self.decay != total_steps:
            raise ValueError(
                f"wsd phases {self.warmup}+{self.stable}+{self.decay} do not sum to {total_steps}"
            )
        if self.kind == "cosine" and self.warmup > total_steps:
            raise ValueError("cosine warmup exceeds total steps")


def lr_at(schedule: ScheduleSpec, t: int, total_steps: int) -> float:
    if t < 0 or t > total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    schedule.validate_total(total_steps)
    base = schedule.base_lr
    kind = schedule.kind
    if kind == "constant":
        return base
    if kind == "step":
        passed = sum(1 for m in schedule.milestones if t >= m * total_steps)
        return base * schedule.factor**passed
    if kind == "wsd":
        w, s = schedule.warmup, schedule.stable
        if t < w:
            return base * t / w
        if t < w + s or schedule.decay == 0:
            return base
        return base * (total_steps - t) / schedule.decay
    w = schedule.warmup
    if t < w:
        return base * t / w
    lo = schedule.min_ratio * base
    span = total_steps - w
    frac = 1.0 if span == 0 else (t - w) / span
    return lo + (base - lo) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "gd"
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    momentum: float = 0.95
    ns_steps: int = 5
    weight_decay: float = 0.0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZER_KINDS}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if int(self.ns_steps) != self.ns_steps or self.ns_steps < 1:
            raise ValueError("ns_steps must be a positive integer")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive when set")


@dataclass
class OptState:
    t: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def init_opt_state(spec: OptimizerSpec, state: ModelState) -> OptState:
    zeros = {k: np.zeros_like(v) for k, v in state.trainable().items()}
    if spec.kind == "adamw":
        return OptState(0, zeros, {k: np.zeros_like(v) for k, v in zeros.items()})
    if spec.kind == "muon":
        return OptState(0, zeros, {})
    return OptState(0)


def newton_schulz(M, steps: int = 5) -> np.ndarray:
    """Approximately orthogonalize ``M`` with the quintic Newton-Schulz map.

    The input is first divided by its Frobenius norm so every singular value
    starts in (0, 1]. Each iteration applies ``p(x) = a x + b x^3 + c x^5`` to the
    singular values. The map does not converge to 1: after five steps the
    singular values of a generic input land roughly in [0.68, 1.21].
    """
    X = as_matrix(M)
    if steps < 1:
        raise ValueError("steps must be at least 1")
    nrm = np.linalg.norm(X)
    if nrm == 0:
        raise ValueError("cannot orthogonalize a zero matrix")
    a, b, c = NS_COEFFS
    tall = X.shape[0] > X.shape[1]
    X = (X.T if tall else X) / nrm
    for _ in range(steps):
        A = X @ X.T
        X = a * X + (b * A + c * (A @ A)) @ X
    return X.T if tall else X


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def optimizer_step(
    state: ModelState,
    grads: GradientSet,
    spec: OptimizerSpec,
    opt_state: OptState,
    lr: float,
) -> tuple[ModelState, OptState]:
    """Return the updated weights and optimizer state; inputs are not modified."""
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    g = grads.for_weights()
    for name in TRAINABLE:
        if g[name].shape != getattr(state, name).shape:
            raise ValueError(f"gradient for {name} has shape {g[name].shape}")
    if spec.clip_norm is not None:
        g = clip_global_norm(g, spec.clip_norm)

    t = opt_state.t + 1
    first, second = dict(opt_state.first), dict(opt_state.second)
    new = {}
    for name in TRAINABLE:
        W = getattr(state, name)
        if spec.weight_decay:
            W = W * (1.0 - lr * spec.weight_decay)
        G = g[name]
        if spec.kind == "gd":
            W = W - lr * G
        elif spec.kind == "adamw":
            m = spec.beta1 * first[name] + (1 - spec.beta1) * G
            v = spec.beta2 * second[name] + (1 - spec.beta2) * G * G
            first[name], second[name] = m, v
            m_hat = m / (1 - spec.beta1**t)
            v_hat = v / (1 - spec.beta2**t)
            W = W - lr * m_hat / (np.sqrt(v_hat) + spec.eps)
        else:
            buf = spec.momentum * first[name] + G
            first[name] = buf
            if np.any(buf):
                W = W - lr * newton_schulz(buf, spec.ns_steps)
        new[name] = W
    return state.replace(**new), OptState(t, first, second)
