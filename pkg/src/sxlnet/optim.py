"""Adam with decoupled weight decay, learning-rate schedules and gradient accumulation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.param_name = name


@dataclass
class Schedule:
    kind: str = "linear_warmup_decay"
    warmup_steps: int = 100
    total_steps: int = 1000
    peak_lr: float = 6e-4
    k: float = 2.0
    d_model: int = 256
    exponent: float = -0.5

    def __post_init__(self):
        if self.kind not in ("linear_warmup_decay", "noam"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "linear_warmup_decay":
            if not 0 <= self.warmup_steps <= self.total_steps:
                raise ValueError("need 0 <= warmup_steps <= total_steps")
            if self.peak_lr <= 0:
                raise ValueError("peak_lr must be positive")
        elif self.warmup_steps < 1:
            raise ValueError("noam schedule needs warmup_steps >= 1")

    def __call__(self, step: int) -> float:
        return lr_linear(step, self) if self.kind == "linear_warmup_decay" else lr_noam(step, self)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown Schedule keys: {sorted(unknown)}")
        return cls(**d)


HYBRID_PRETRAIN_SCHEDULE = Schedule("linear_warmup_decay", warmup_steps=115_000, total_steps=1_000_000, peak_lr=6e-4)
HYBRID_FINETUNE_SCHEDULE = Schedule("linear_warmup_decay", warmup_steps=1_000, total_steps=10_000, peak_lr=1e-4)
E2E_PRETRAIN_SCHEDULE = Schedule("noam", warmup_steps=140_000, k=2.0, d_model=256)
E2E_FINETUNE_SCHEDULE = Schedule("noam", warmup_steps=140_000, k=11.0, d_model=256)


def lr_linear(step: int, schedule: Schedule) -> float:
    """Linear ramp to ``peak_lr`` at ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    s = schedule
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= s.total_steps:
        return 0.0
    if step <= s.warmup_steps:
        return s.peak_lr if step == s.warmup_steps else s.peak_lr * step / s.warmup_steps
    return s.peak_lr * (s.total_steps - step) / (s.total_steps - s.warmup_steps)


def lr_noam(step: int, schedule: Schedule) -> float:
    """``k * d_model**exponent * min(n**-0.5, n * warmup**-1.5)``."""
    if step < 1:
        raise ValueError("noam schedule is undefined for step < 1")
    s = schedule
    return s.k * s.d_model ** s.exponent * min(step ** -0.5, step * s.warmup_steps ** -1.5)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def init_adam_state(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState({n: np.zeros_like(p) for n, p in params.items()},
                     {n: np.zeros_like(p) for n, p in params.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-6, weight_decay: float = 0.01,
              no_decay=(), frozen=()) -> AdamState:
    """Update ``params`` in place.

    Weight decay is decoupled: ``theta -= lr * (m_hat/(sqrt(v_hat)+eps) + wd*theta)``.
    Names in ``no_decay`` skip the decay term, names in ``frozen`` are left
    untouched (their moments are not advanced either).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, theta in params.items():
        if name in frozen or name not in grads:
            continue
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and name not in no_decay:
            update = update + weight_decay * theta
        theta -= (lr * update).astype(theta.dtype)
    return state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for n in grads:
            grads[n] = grads[n] * scale
    return total


class GradAccumulator:
    """Average gradients over ``n_accum`` micro-batches."""

    def __init__(self, n_accum: int):
        if n_accum < 1:
            raise ValueError("n_accum must be >= 1")
        self.n_accum = n_accum
        self.buffer: dict[str, np.ndarray] | None = None
        self.count = 0

    def add(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray] | None:
        if self.buffer is None:
            self.buffer = {n: g.astype(np.float64, copy=True) for n, g in grads.items()}
        else:
            for n, g in grads.items():
                if g.shape != self.buffer[n].shape:
                    raise ValueError(f"{n}: gradient shape {g.shape} != buffer {self.buffer[n].shape}")
                self.buffer[n] += g
        self.count += 1
        if self.count < self.n_accum:
            return None
        out = {n: (b / self.n_accum).astype(grads[n].dtype) for n, b in self.buffer.items()}
        self.buffer = None
        self.count = 0
        return out


def accumulate(grad_buffer: GradAccumulator, grads, n_accum: int | None = None):
    if n_accum is not None and n_accum != grad_buffer.n_accum:
        raise ValueError("n_accum does not match the buffer")
    return grad_buffer.add(grads)
