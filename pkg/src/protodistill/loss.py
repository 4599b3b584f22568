"""Prototype bank, sample-to-prototype predictions and the distillation objective.

Teacher-side quantities are plain numpy arrays: they are computed without a
tape and never carry gradient.  Student-side quantities are tensors recorded
on the active tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import EPS_LOG, Tensor


@dataclass
class PrototypeBank:
    p: Tensor  # (K, d), rows are re-normalized inside every use

    @property
    def K(self) -> int:
        return self.p.shape[0]

    @property
    def d(self) -> int:
        return self.p.shape[1]

    def normalized(self) -> Tensor:
        return T.l2_normalize(self.p, axis=-1)


def init_prototypes(K: int, d: int, seed: int) -> PrototypeBank:
    """Entries i.i.d. uniform in [-1/sqrt(d), 1/sqrt(d)]."""
    if K < 1 or d < 1:
        raise ValueError("K and d must be positive")
    bound = 1.0 / math.sqrt(d)
    rng = np.random.default_rng(seed)
    return PrototypeBank(Tensor(rng.uniform(-bound, bound, size=(K, d)), requires_grad=True))


def prototype_logits(bank: PrototypeBank, features) -> Tensor:
    """Cosine similarity of unit features (..., d) to every prototype: (..., K)."""
    f = T.as_tensor(features)
    if f.shape[-1] != bank.d:
        raise ValueError(f"feature dim {f.shape[-1]} != prototype dim {bank.d}")
    squeeze = f.ndim == 1
    if squeeze:
        f = f.reshape(1, bank.d)
    out = T.matmul(f, bank.normalized().T)
    return out.reshape(bank.K) if squeeze else out


def predict(bank: PrototypeBank, features, tau: float) -> Tensor:
    """softmax(cos(p, f) / tau) over the K prototypes."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return T.softmax(prototype_logits(bank, features), tau)


def sinkhorn(logits: np.ndarray, tau: float, iters: int) -> np.ndarray:
    """exp(logits / tau) balanced by alternating row and column normalization.

    Rows (samples) end summing to one; columns (prototypes) approach rows/K.
    """
    if iters < 0:
        raise ValueError("sinkhorn_iters must be >= 0")
    z = logits / tau
    q = np.exp(z - z.max(axis=1, keepdims=True))
    rows, k = q.shape
    for _ in range(iters):
        q = q / q.sum(axis=1, keepdims=True)
        q = q * ((rows / k) / q.sum(axis=0, keepdims=True))
    return q / q.sum(axis=1, keepdims=True)


def softmax_rows(logits: np.ndarray, tau: float) -> np.ndarray:
    z = logits / tau
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class TeacherOp:
    mode: str = "sinkhorn"  # sinkhorn | centering
    sinkhorn_iters: int = 3
    center_momentum: float = 0.9
    center: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("sinkhorn", "centering"):
            raise ValueError(f"unknown teacher op {self.mode!r}")
        if self.sinkhorn_iters < 0:
            raise ValueError("sinkhorn_iters must be >= 0")

    def sharpen(self, logits: np.ndarray, tau_g: float, update: bool = True) -> np.ndarray:
        """Teacher targets for (rows, K) logits; centering mode advances its running center."""
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[0] == 0:
            raise ValueError("teacher_sharpen needs a non-empty (rows, K) matrix")
        if not tau_g > 0:
            raise ValueError("tau_g must be positive")
        if self.mode == "sinkhorn":
            return sinkhorn(logits, tau_g, self.sinkhorn_iters)
        if self.center is None:
            self.center = np.zeros(logits.shape[1])
        probs = softmax_rows(logits - self.center, tau_g)
        if update:
            m = self.center_momentum
            self.center = m * self.center + (1.0 - m) * logits.mean(axis=0)
        return probs


def teacher_sharpen(logits: np.ndarray, op: TeacherOp, tau_g: float) -> np.ndarray:
    return op.sharpen(logits, tau_g)


def entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -(p * np.log(np.maximum(p, EPS_LOG))).sum(axis=axis)


def cross_entropy_pairs(teacher: np.ndarray, student: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean of H(t_m, s_n) = -sum_k t_mk log s_nk over the (M, N) pairs selected by ``mask``."""
    t = np.asarray(teacher, dtype=np.float64)
    if t.ndim != 2 or student.ndim != 2 or t.shape[1] != student.shape[1]:
        raise ValueError(f"teacher {t.shape} and student {student.shape} must be (M,K) and (N,K)")
    pair = T.matmul(Tensor(t), T.log(student).T) * -1.0
    if mask is None:
        return pair.mean()
    w = np.asarray(mask, dtype=np.float64)
    return (pair * (w / w.sum())).sum()


def entropy_reg(student: Tensor, mode: str = "mean_entropy") -> Tensor:
    """Collapse regularizer over every student distribution (..., K).

    ``mean_entropy``: Shannon entropy of the average distribution.
    ``literal``: the unlogged batch average of raw probabilities,
    (1/(B*K)) * sum of all entries, which is the constant N/K.
    """
    flat = student.reshape(-1, student.shape[-1])
    if flat.shape[0] == 0:
        raise ValueError("entropy_reg needs at least one distribution")
    if mode == "mean_entropy":
        avg = flat.mean(axis=0)
        return (avg * T.log(avg)).sum() * -1.0
    if mode == "literal":
        b = student.shape[0] if student.ndim == 3 else 1
        return flat.sum() * (1.0 / (b * student.shape[-1]))
    raise ValueError(f"unknown entropy mode {mode!r}")


@dataclass
class LossBreakdown:
    total: Tensor
    ce: float
    entropy: float
    pair_ce: np.ndarray  # (B, M, N_student); NaN where a pair is excluded


def total_loss(
    teacher: np.ndarray,
    student: Tensor,
    lambda_reg: float = 1.0,
    pair_mask: np.ndarray | None = None,
    entropy_mode: str = "mean_entropy",
) -> LossBreakdown:
    """(1/B) sum_i CE_i - lambda_reg * H(mean student distribution).

    ``teacher`` is (B, M, K) targets, ``student`` (B, N, K) predictions on the
    tape, ``pair_mask`` an optional (M, N) 0/1 matrix of pairs that count.
    """
    t = np.asarray(teacher, dtype=np.float64)
    if t.ndim != 3 or student.ndim != 3 or t.shape[0] != student.shape[0] or t.shape[2] != student.shape[2]:
        raise ValueError(f"shape mismatch: teacher {t.shape} vs student {student.shape}")
    b, m, _ = t.shape
    n = student.shape[1]
    w = np.ones((m, n)) if pair_mask is None else np.asarray(pair_mask, dtype=np.float64)
    if w.shape != (m, n) or w.sum() <= 0:
        raise ValueError(f"pair mask must be ({m},{n}) with at least one pair")
    pair = T.matmul(Tensor(t), T.swap_last(T.log(student))) * -1.0  # (B, M, N)
    ce = (pair * (w / (w.sum() * b))).sum()
    reg = entropy_reg(student, entropy_mode)
    total = ce - reg * lambda_reg if lambda_reg else ce
    diag = np.where(w > 0, pair.data, np.nan)
    return LossBreakdown(total=total, ce=ce.item(), entropy=reg.item(), pair_ce=diag)


def usage_entropy(assignments: np.ndarray, K: int) -> float:
    """Entropy (nats) of the histogram of hard prototype assignments."""
    counts = np.bincount(np.asarray(assignments, dtype=np.int64), minlength=K).astype(np.float64)
    if counts.sum() == 0:
        return 0.0
    return float(entropy(counts / counts.sum()))
