from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, NumericError
from .params import ParamStore


@dataclass
class LrSchedule:
    """Step decay: ``initial * factor ** (step // period)``."""

    initial: float = 0.01
    factor: float = 0.1
    period: int = 50000

    def __post_init__(self):
        if self.initial <= 0 or self.factor <= 0 or self.period < 1:
            raise ConfigError("learning-rate schedule needs initial > 0, factor > 0, period >= 1")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ConfigError("step must be non-negative")
    return schedule.initial * math.pow(schedule.factor, step // schedule.period)


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update over every parameter of ``store``; gradients are zeroed after.

    Missing gradients count as zero. Any non-finite gradient aborts before a
    single value is touched.
    """
    bad = [n for n, t in store.params.items() if t.grad is not None and not np.isfinite(t.grad).all()]
    if bad:
        raise NumericError(f"non-finite gradient in {len(bad)} parameter(s): {', '.join(bad[:5])}")

    store.adam_t += 1
    t = store.adam_t
    dt = store.dtype.type
    c1 = dt(1.0 - beta1**t)
    c2 = dt(1.0 - beta2**t)
    b1, b2, lr_, eps_ = dt(beta1), dt(beta2), dt(lr), dt(eps)
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            g = g + dt(weight_decay) * p.data
        m = store.adam_m.get(name)
        if m is None:
            m = store.adam_m[name] = np.zeros_like(p.data)
            store.adam_v[name] = np.zeros_like(p.data)
        v = store.adam_v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= lr_ * (m / c1) / (np.sqrt(v / c2) + eps_)
        p.grad = None
