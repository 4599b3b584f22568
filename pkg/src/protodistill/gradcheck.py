"""Finite-difference suite over every differentiable primitive and the full loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from . import vit
from .loss import PrototypeBank, TeacherOp, prototype_logits, total_loss
from .tensor import Tensor

TOLERANCE = 1e-4
POINTS = 10
EPS = 1e-5


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * w).sum()


def _case(shapes, fn, low=-2.0, high=2.0):
    """Random inputs of ``shapes`` plus fixed random output weights, as (f, inputs)."""

    def build(rng: np.random.Generator):
        xs = [Tensor(rng.uniform(low, high, size=s)) for s in shapes]
        probe_out = fn(*xs)
        w = rng.normal(size=probe_out.shape)
        return (lambda *a: _weighted(fn(*a), w)), xs

    return build


PRIMITIVES: dict[str, Callable] = {
    "add": _case([(3, 4), (4,)], T.add),
    "sub": _case([(2, 3, 4), (3, 4)], T.sub),
    "mul": _case([(3, 4), (3, 4)], T.mul),
    "scale": _case([(5,)], lambda a: a * 0.37),
    "matmul": _case([(2, 3, 4), (4, 5)], T.matmul),
    "matmul_batched": _case([(2, 3, 4), (2, 4, 2)], T.matmul),
    "gelu": _case([(4, 5)], T.gelu, -3.0, 3.0),
    "exp": _case([(6,)], T.exp),
    "log": _case([(6,)], T.log, 0.3, 3.0),
    "mean": _case([(3, 4)], lambda a: T.mean(a, axis=0)),
    "sum": _case([(3, 4)], lambda a: T.sum_(a, axis=1, keepdims=True)),
    "softmax": _case([(3, 5)], lambda a: T.softmax(a, 0.1)),
    "l2_normalize": _case([(3, 4)], T.l2_normalize),
    "layer_norm": _case([(3, 6), (6,), (6,)], T.layer_norm),
    "embedding_lookup": _case([(5, 3)], lambda a: T.take(a, [0, 3, 3, 1])),
    "concat": _case([(2, 3), (2, 2)], lambda a, b: T.concat([a, b], axis=1)),
    "getitem": _case([(3, 4, 2)], lambda a: a[:, 1]),
    "reshape_transpose": _case([(2, 3, 4)], lambda a: a.reshape(6, 4).T),
    "broadcast_to": _case([(3,)], lambda a: T.broadcast_to(a, (2, 4, 3))),
}

MICRO = vit.EncoderConfig(image_side=8, patch_side=2, channels=3, depth=1, width=8, heads=2,
                          mlp_ratio=2.0, proj_hidden=8, out_dim=4)
MICRO_LOCAL_SIDE = 4
MICRO_K = 4


def loss_case(rng: np.random.Generator, M: int = 1, N: int = 2, lambda_reg: float = 1.0):
    """Full objective on a B=1 micro instance as a function of every student parameter and the prototypes."""
    seed = int(rng.integers(2**31))
    student = vit.init_params(MICRO, seed)
    for p in student.values():  # move away from the symmetric init so every path carries signal
        p.data = p.data + rng.normal(0.0, 0.3, size=p.shape)
    teacher = {k: Tensor(v.data + rng.normal(0.0, 0.05, size=v.shape)) for k, v in student.items()}
    protos = Tensor(rng.uniform(-0.5, 0.5, size=(MICRO_K, MICRO.out_dim)))
    globals_ = rng.uniform(0, 1, size=(M, 3, MICRO.image_side, MICRO.image_side))
    locals_ = rng.uniform(0, 1, size=(N, 3, MICRO_LOCAL_SIDE, MICRO_LOCAL_SIDE))
    zt = vit.embed(teacher, MICRO, globals_).data
    targets = TeacherOp("sinkhorn", 3).sharpen(prototype_logits(PrototypeBank(protos), zt).data, 0.25)
    targets = targets.reshape(1, M, MICRO_K)
    names = list(student) + ["prototypes"]

    def f(*tensors):
        params = dict(zip(names[:-1], tensors[:-1]))
        bank = PrototypeBank(tensors[-1])
        zs = vit.embed(params, MICRO, locals_).reshape(1, N, MICRO.out_dim)
        probs = T.softmax(prototype_logits(bank, zs), 0.5)
        return total_loss(targets, probs, lambda_reg).total

    return f, [student[k] for k in names[:-1]] + [protos]


@dataclass
class CheckResult:
    op: str
    worst: float

    def __post_init__(self):
        self.worst = float(self.worst)

    @property
    def ok(self) -> bool:
        return bool(self.worst < TOLERANCE)


def run_suite(seed: int, scope: str = "all") -> list[CheckResult]:
    if scope not in ("primitives", "loss", "all"):
        raise ValueError(f"unknown scope {scope!r}")
    rng = np.random.default_rng(seed)
    results = []
    if scope in ("primitives", "all"):
        for name, build in PRIMITIVES.items():
            worst = 0.0
            for _ in range(POINTS):
                f, xs = build(rng)
                worst = max(worst, T.grad_check(f, xs, EPS))
            results.append(CheckResult(name, worst))
    if scope in ("loss", "all"):
        f, xs = loss_case(rng)
        results.append(CheckResult("total_loss", T.grad_check(f, xs, EPS)))
    return results
