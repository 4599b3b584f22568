"""Pre-training loop: multi-crop, gate, teacher targets, student update, EMA.

All randomness is derived from (run_seed, epoch, image, view, attempt)
counters, so the only state that needs saving is parameters, optimizer
moments, the centering vector and the step counters.  At every checkpoint
boundary the state is rounded to float32, which makes a resumed run
identical to an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import config as config_mod
from . import tensor as T
from . import vit
from .checkpoint import Checkpoint, atomic_write, save_checkpoint, to_f32
from .config import TrainConfig
from .data import ToyImage, make_view, multicrop, stream
from .loss import PrototypeBank, TeacherOp, init_prototypes, prototype_logits, softmax_rows, total_loss, usage_entropy
from .optim import AdamW, NonFiniteGradient, ema_update, global_grad_clip, lr_at
from .retrieval import FilterConfig, RandomProjectionEmbedder, TeacherEmbedder, filter_locals

log = logging.getLogger(__name__)

_SHUFFLE, _VIEWS, _STUDENT, _PROTOS, _EMBED = 11, 13, 17, 19, 23


class NumericAbort(FloatingPointError):
    def __init__(self, message: str, step: int, last_good: Checkpoint):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


@dataclass
class TrainState:
    cfg: TrainConfig
    student: vit.Params
    teacher: vit.Params
    bank: PrototypeBank
    opt: AdamW
    teacher_op: TeacherOp
    step: int = 0
    epoch: int = 0
    metrics: dict[str, float] = field(default_factory=dict)

    def trainable(self) -> vit.Params:
        return {**self.student, "prototypes": self.bank.p}


def init_state(cfg: TrainConfig) -> TrainState:
    enc = cfg.encoder()
    student_seed = int(stream(cfg.run_seed, _STUDENT).integers(2**63))
    proto_seed = int(stream(cfg.run_seed, _PROTOS).integers(2**63))
    student = vit.init_params(enc, student_seed)
    teacher = {k: T.Tensor(v.data.copy()) for k, v in student.items()}
    state = TrainState(
        cfg=cfg,
        student=student,
        teacher=teacher,
        bank=init_prototypes(cfg.num_prototypes, cfg.out_dim, proto_seed),
        opt=AdamW(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        teacher_op=TeacherOp(cfg.teacher_op, cfg.sinkhorn_iters, cfg.center_momentum),
    )
    round_state(state)
    return state


def round_state(state: TrainState) -> None:
    for tree in (state.student, state.teacher):
        for p in tree.values():
            p.data = to_f32(p.data)
    state.bank.p.data = to_f32(state.bank.p.data)
    for moments in (state.opt.m, state.opt.v):
        for k in moments:
            moments[k] = to_f32(moments[k])
    if state.teacher_op.center is not None:
        state.teacher_op.center = to_f32(state.teacher_op.center)


def expected_shapes(cfg: TrainConfig) -> dict[str, tuple[int, ...]]:
    params = vit.init_params(cfg.encoder(), 0)
    shapes = {f"student/{k}": v.shape for k, v in params.items()}
    shapes.update({f"teacher/{k}": v.shape for k, v in params.items()})
    shapes["prototypes"] = (cfg.num_prototypes, cfg.out_dim)
    return shapes


def to_checkpoint(state: TrainState) -> Checkpoint:
    return Checkpoint(
        config_text=config_mod.dumps(state.cfg),
        student={k: v.data.copy() for k, v in state.student.items()},
        teacher={k: v.data.copy() for k, v in state.teacher.items()},
        prototypes=state.bank.p.data.copy(),
        adam_m={k: v.copy() for k, v in state.opt.m.items()},
        adam_v={k: v.copy() for k, v in state.opt.v.items()},
        step=state.step,
        epoch=state.epoch,
        optim_step=state.opt.step_count,
        center=None if state.teacher_op.center is None else state.teacher_op.center.copy(),
        metrics={k: float(np.float32(v)) for k, v in state.metrics.items()},
    )


def from_checkpoint(ck: Checkpoint) -> TrainState:
    cfg = config_mod.loads(ck.config_text)
    from .checkpoint import check_shapes

    check_shapes(ck, expected_shapes(cfg))
    op = TeacherOp(cfg.teacher_op, cfg.sinkhorn_iters, cfg.center_momentum)
    op.center = None if ck.center is None else ck.center.copy()
    opt = AdamW(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, ck.optim_step,
                {k: v.copy() for k, v in ck.adam_m.items()}, {k: v.copy() for k, v in ck.adam_v.items()})
    return TrainState(
        cfg=cfg,
        student={k: T.Tensor(v.copy(), requires_grad=True) for k, v in ck.student.items()},
        teacher={k: T.Tensor(v.copy()) for k, v in ck.teacher.items()},
        bank=PrototypeBank(T.Tensor(ck.prototypes.copy(), requires_grad=True)),
        opt=opt,
        teacher_op=op,
        step=ck.step,
        epoch=ck.epoch,
        metrics=dict(ck.metrics),
    )


def steps_per_epoch(cfg: TrainConfig, corpus_size: int | None = None) -> int:
    return (corpus_size or cfg.corpus_size) // cfg.batch_size


def epoch_order(cfg: TrainConfig, epoch: int, n: int) -> np.ndarray:
    return stream(cfg.run_seed, _SHUFFLE, epoch).permutation(n)


def make_embedder(state: TrainState):
    if state.cfg.embedder == "teacher":
        return TeacherEmbedder(state.teacher, state.cfg.encoder())
    seed = int(stream(state.cfg.run_seed, _EMBED).integers(2**63))
    return RandomProjectionEmbedder(dim=64, seed=seed, channels=state.cfg.channels)


def pair_mask(cfg: TrainConfig) -> np.ndarray | None:
    if cfg.student_views == "locals_only":
        return None
    m, n = cfg.global_crops, cfg.local_crops
    mask = np.ones((m, m + n))
    mask[np.arange(m), np.arange(m)] = 0.0  # a global never distils into itself
    return mask


def _finite(x: np.ndarray, what: str, step: int) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite {what} at step {step}")
    return x


def train_step(state: TrainState, images: list[ToyImage], spe: int) -> dict:
    """One optimization step on a batch; returns the metrics record."""
    cfg = state.cfg
    enc = cfg.encoder()
    policy = cfg.policy()
    B, M, N = len(images), cfg.global_crops, cfg.local_crops
    view_seed = int(stream(cfg.run_seed, _VIEWS, state.epoch).integers(2**63))
    viewsets = [multicrop(im, M, N, policy, view_seed) for im in images]
    globals_ = np.stack([v for vs in viewsets for v in vs.globals])  # (B*M, C, G, G)
    locals_ = np.stack([v for vs in viewsets for v in vs.locals])

    # teacher branch: off-tape, so nothing here can receive gradient
    teacher_z = _finite(vit.embed(state.teacher, enc, globals_).data, "teacher embedding", state.step)
    replaced = 0
    if cfg.filter_enabled:
        embedder = make_embedder(state)
        gz = teacher_z if cfg.embedder == "teacher" else embedder(globals_)
        lz = embedder(locals_)
        fcfg = FilterConfig(cfg.filter_theta, cfg.filter_retries, embedder)
        curated = []
        for i, (im, vs) in enumerate(zip(images, viewsets)):
            def recrop(n, attempt, im=im):
                return make_view(im, policy, view_seed, M + n, False, attempt)[0]

            views, report = filter_locals(vs.globals, vs.locals, fcfg, recrop,
                                          gz[i * M:(i + 1) * M], lz[i * N:(i + 1) * N])
            curated.extend(views)
            replaced += report.replaced_count
        locals_ = np.stack(curated)

    teacher_logits = prototype_logits(state.bank, teacher_z).data
    targets = state.teacher_op.sharpen(teacher_logits, cfg.tau_g).reshape(B, M, -1)

    trainable = state.trainable()
    for p in trainable.values():
        p.grad = None
    with T.Tape() as tape:
        zs = vit.embed(state.student, enc, locals_).reshape(B, N, cfg.out_dim)
        if cfg.student_views == "all":
            zg = vit.embed(state.student, enc, globals_).reshape(B, M, cfg.out_dim)
            zs = T.concat([zg, zs], axis=1)
        logits = prototype_logits(state.bank, zs)
        _finite(logits.data, "student logits", state.step)
        probs = T.softmax(logits, cfg.tau_l)
        lb = total_loss(targets, probs, cfg.lambda_reg, pair_mask(cfg), cfg.entropy_mode)
    if not np.isfinite(lb.total.item()):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    tape.backward(lb.total)
    if cfg.grad_clip > 0:
        global_grad_clip(trainable, cfg.grad_clip)
    lr = lr_at(state.step, cfg, spe)
    state.opt.step(trainable, lr, cfg.weight_decay)
    ema_update(state.teacher, state.student, cfg.ema_momentum)

    record = {
        "step": state.step,
        "epoch": state.epoch,
        "lr": lr,
        "loss_total": lb.total.item(),
        "loss_ce": lb.ce,
        "loss_entropy": lb.entropy,
        "filter_replaced_count": replaced,
        "prototype_usage_entropy": usage_entropy(targets.reshape(B * M, -1).argmax(axis=1), cfg.num_prototypes),
    }
    state.metrics = {k: record[k] for k in Checkpoint.METRIC_KEYS}
    state.step += 1
    return record


StepHook = Callable[[TrainState, dict], None]


def pretrain(
    cfg: TrainConfig,
    corpus: list[ToyImage],
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    on_step: StepHook | None = None,
    max_steps: int | None = None,
) -> Checkpoint:
    """Run (or continue) pre-training and return the final checkpoint.

    With ``out_dir`` set, writes ``metrics.jsonl`` (appending when resuming),
    ``epoch_XXX.ckpt`` every ``checkpoint_every`` epochs and ``final.ckpt``.
    ``max_steps`` stops early without a final rounding (for short probes of
    the loop).
    """
    if not corpus:
        raise ValueError("empty corpus")
    if corpus[0].pixels.shape != (cfg.channels, cfg.image_side, cfg.image_side):
        raise ValueError(f"corpus images {corpus[0].pixels.shape} do not match the encoder config")
    state = from_checkpoint(resume) if resume is not None else init_state(cfg)
    if resume is not None and config_mod.dumps(state.cfg) != config_mod.dumps(cfg):
        raise ValueError("resume checkpoint was written with a different config")
    spe = steps_per_epoch(cfg, len(corpus))
    if spe < 1:
        raise ValueError("corpus smaller than one batch")
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "a" if resume is not None else "w", encoding="utf-8")
    last_good = to_checkpoint(state)
    try:
        while state.epoch < cfg.epochs:
            order = epoch_order(cfg, state.epoch, len(corpus))
            start = state.step - state.epoch * spe
            for b in range(start, spe):
                batch = [corpus[j] for j in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                try:
                    record = train_step(state, batch, spe)
                except (FloatingPointError, NonFiniteGradient) as exc:
                    if out is not None:
                        save_checkpoint(last_good, out / "last_good.ckpt")
                    raise NumericAbort(str(exc), state.step, last_good) from exc
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(record) + "\n")
                if on_step is not None:
                    on_step(state, record)
                if max_steps is not None and state.step >= max_steps:
                    return to_checkpoint(state)
            state.epoch += 1
            round_state(state)
            last_good = to_checkpoint(state)
            log.info("epoch %d done: loss %.4f", state.epoch, state.metrics.get("loss_total", float("nan")))
            if out is not None and (state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs):
                save_checkpoint(last_good, out / f"epoch_{state.epoch:03d}.ckpt")
                metrics_fh.flush()
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    final = to_checkpoint(state)
    if out is not None:
        save_checkpoint(final, out / "final.ckpt")
    return final


def teacher_params(ck: Checkpoint) -> vit.Params:
    return {k: T.Tensor(v) for k, v in ck.teacher.items()}


def teacher_targets(ck: Checkpoint, images: np.ndarray, tau: float) -> np.ndarray:
    cfg = config_mod.loads(ck.config_text)
    z = vit.embed(teacher_params(ck), cfg.encoder(), images).data
    bank = PrototypeBank(T.Tensor(ck.prototypes))
    return softmax_rows(prototype_logits(bank, z).data, tau)


def write_json(path, payload) -> None:
    atomic_write(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))
