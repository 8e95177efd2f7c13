"""AdamW / SGD-with-momentum updates and the linear warmup-decay schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import MutableMapping

import numpy as np

from .errors import DimensionMismatch, InvalidInput, InvalidRatio, NonFiniteGradient

KINDS = ("adamw", "sgd_momentum")


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    # the 1e-9 slack keeps e.g. 0.06 * 100 from rounding up to 7
    return math.ceil(warmup_ratio * total_steps - 1e-9)


def schedule_lr(step: int, total_steps: int, warmup_ratio: float, lr_base: float) -> float:
    """Linear ramp from 0 to ``lr_base`` over the warmup, then linear decay to 0."""
    if not 0.0 <= warmup_ratio < 1.0:
        raise InvalidRatio(f"warmup_ratio must lie in [0, 1), got {warmup_ratio}")
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise InvalidInput(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, warmup_ratio)
    if step == total_steps:
        return 0.0
    if step < warm:
        return lr_base * step / warm
    return lr_base * (total_steps - step) / (total_steps - warm)


@dataclass
class OptimState:
    kind: str = "adamw"
    lr_base: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None
    decay_exempt: frozenset[str] = frozenset()
    step: int = 0
    moments: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown optimizer {self.kind!r}; expected one of {KINDS}")


def _exempt(name: str, patterns: frozenset[str]) -> bool:
    # exemptions match a full name or its last dotted component
    return name in patterns or name.rsplit(".", 1)[-1] in patterns


def apply_step(state: OptimState, buffers: MutableMapping[str, np.ndarray],
               grads: MutableMapping[str, np.ndarray], lr: float | None = None
               ) -> MutableMapping[str, np.ndarray]:
    """Update ``buffers`` in place from ``grads`` and advance ``state.step``.

    Weight decay is decoupled (``p -= lr * wd * p``) and skipped for names in
    ``state.decay_exempt``.  Buffers are visited in ``buffers`` order.
    """
    if set(buffers) != set(grads):
        raise DimensionMismatch(
            f"gradient names {sorted(grads)} do not match buffers {sorted(buffers)}")
    for name, p in buffers.items():
        g = grads[name]
        if np.shape(g) != p.shape:
            raise DimensionMismatch(f"{name}: gradient shape {np.shape(g)} != {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    lr = state.lr_base if lr is None else lr

    scale = 1.0
    if state.clip_norm is not None:
        total = math.sqrt(sum(float(np.vdot(grads[n], grads[n])) for n in buffers))
        if total > state.clip_norm:
            scale = state.clip_norm / total

    state.step += 1
    t = state.step
    for name, p in buffers.items():
        g = np.asarray(grads[name], dtype=np.float64) * scale
        slot = state.moments.setdefault(name, {})
        if state.weight_decay and not _exempt(name, state.decay_exempt):
            p -= lr * state.weight_decay * p
        if state.kind == "adamw":
            m = slot.setdefault("m", np.zeros_like(p))
            v = slot.setdefault("v", np.zeros_like(p))
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            buf = slot.setdefault("velocity", np.zeros_like(p))
            buf *= state.momentum
            buf += g
            p -= lr * buf
    return buffers
