"""AdamW, the warmup + cosine learning-rate schedule, and the EMA teacher update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


def warmup_lr(progress: float, lr_init: float, lr_peak: float) -> float:
    """Linear ramp; progress 0 -> lr_init, 1 -> lr_peak (both exact)."""
    return lr_init * (1.0 - progress) + lr_peak * progress


def cosine_lr(progress: float, lr_peak: float, lr_final: float) -> float:
    """Half cosine; progress 0 -> lr_peak, 1 -> lr_final (both exact)."""
    w = 0.5 * (1.0 + math.cos(math.pi * progress))
    return lr_final * (1.0 - w) + lr_peak * w


def lr_at(step: float, cfg, steps_per_epoch: int) -> float:
    """Learning rate at ``step`` for a config with epochs/warmup_epochs/lr_init/lr_peak/lr_final.

    The last step of the run lands exactly on ``lr_final``; later steps stay there.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    last = cfg.epochs * steps_per_epoch - 1
    if step < warm:
        return warmup_lr(step / warm, cfg.lr_init, cfg.lr_peak)
    if step >= last:
        return cfg.lr_final if last > warm else cfg.lr_peak
    return cosine_lr((step - warm) / (last - warm), cfg.lr_peak, cfg.lr_final)


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices; biases, norms, cls and 1-D tables are exempt."""
    return value.ndim >= 2 and name != "pos_embed"


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], lr: float, weight_decay: float) -> None:
        """Decoupled decay, param <- param * (1 - lr * wd), then the bias-corrected Adam move."""
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            data = p.data
            if weight_decay and decays(name, data):
                data = data * (1.0 - lr * weight_decay)
            p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor], momentum: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, tensor by tensor."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("EMA momentum must be in [0, 1]")
    if teacher.keys() != student.keys():
        raise KeyError(f"parameter trees differ: {sorted(set(teacher) ^ set(student))}")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name!r}: {t.shape} vs {s.shape}")
        t.data = momentum * t.data + (1.0 - momentum) * s.data


def global_grad_clip(params: dict[str, Tensor], max_norm: float) -> float:
    sq = sum(float((p.grad * p.grad).sum()) for p in params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
