"""Adam with decoupled weight decay, warmup/decay schedules, encoder gradient scaling."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

WARMUP_DECAY = "warmup-linear-then-decay"
WARMUP_CONSTANT = "warmup-then-constant"


class MissingGradError(RuntimeError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.step], dtype=np.int64).tobytes())
        for name in sorted(self.m):
            h.update(name.encode())
            h.update(self.m[name].tobytes())
            h.update(self.v[name].tobytes())
        return h.hexdigest()

    def copy(self) -> AdamState:
        return AdamState(self.beta1, self.beta2, self.eps, self.weight_decay, self.step,
                         {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def adam_step(params, state: AdamState, lr: float) -> None:
    """One decoupled-weight-decay Adam update of every parameter in ``params``.

    ``params`` is a mapping name -> Tensor whose ``.grad`` is populated.
    """
    items = list(params.items())
    for name, p in items:
        if p.grad is None:
            raise MissingGradError(f"parameter {name} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in items:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    peak: float
    warmup_updates: int
    total_updates: int
    kind: str = WARMUP_DECAY
    floor: float = 0.1

    def __post_init__(self):
        if self.kind not in (WARMUP_DECAY, WARMUP_CONSTANT):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.warmup_updates < 0 or self.total_updates < 0:
            raise ValueError("schedule lengths must be non-negative")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup 0 -> peak, then linear decay to floor*peak at total_updates (or constant)."""
    if step < 0:
        raise ValueError(f"negative step {step}")
    if step > schedule.total_updates:
        log.debug("step %d beyond schedule end %d; clamping", step, schedule.total_updates)
        step = schedule.total_updates
    w = schedule.warmup_updates
    if step < w:
        return schedule.peak * step / w
    if schedule.kind == WARMUP_CONSTANT:
        return schedule.peak
    span = schedule.total_updates - w
    if span <= 0:
        return schedule.peak
    frac = (step - w) / span
    if frac >= 1.0:
        return schedule.peak * schedule.floor
    return schedule.peak * (1.0 - (1.0 - schedule.floor) * frac)


def scale_encoder_grads(params, factor: float) -> None:
    for name in params.encoder_names():
        g = params[name].grad
        if g is not None:
            g *= factor
