"""Training configuration and its ``key=value`` text form.

The text form is also what checkpoints embed, so ``dumps`` is canonical:
every field, in declaration order, floats written with ``repr``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .data import AugmentPolicy
from .vit import EncoderConfig


class ConfigError(ValueError):
    def __init__(self, message: str, keys: tuple[str, ...] = ()):
        super().__init__(message)
        self.keys = keys


_CHOICES = {
    "teacher_op": ("sinkhorn", "centering"),
    "entropy_mode": ("mean_entropy", "literal"),
    "embedder": ("teacher", "random_projection"),
    "student_views": ("locals_only", "all"),
}


@dataclass(frozen=True)
class TrainConfig:
    # data
    corpus_size: int = 256
    corpus_classes: int = 4
    corpus_seed: int = 7
    run_seed: int = 0
    batch_size: int = 16
    global_crops: int = 2
    local_crops: int = 6
    # schedule / optimizer
    epochs: int = 5
    warmup_epochs: int = 1
    lr_init: float = 0.0002
    lr_peak: float = 0.001
    lr_final: float = 1e-6
    weight_decay: float = 0.04
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0
    ema_momentum: float = 0.996
    # objective
    tau_g: float = 0.025
    tau_l: float = 0.1
    num_prototypes: int = 64
    lambda_reg: float = 1.0
    entropy_mode: str = "mean_entropy"
    teacher_op: str = "sinkhorn"
    sinkhorn_iters: int = 3
    center_momentum: float = 0.9
    student_views: str = "locals_only"
    # retrieval gate
    filter_enabled: bool = True
    filter_theta: float = -0.5
    filter_retries: int = 3
    embedder: str = "teacher"
    # encoder
    image_side: int = 32
    local_side: int = 16
    patch_side: int = 4
    channels: int = 3
    depth: int = 3
    width: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    proj_hidden: int = 128
    out_dim: int = 32
    # augmentation
    flip_p: float = 0.0
    brightness: float = 0.4
    contrast: float = 0.4
    color: float = 0.4
    gray_p: float = 0.2
    blur_p: float = 0.5
    blur_kernel: int = 3
    global_scale_min: float = 0.4
    global_scale_max: float = 1.0
    local_scale_min: float = 0.05
    local_scale_max: float = 0.4
    # bookkeeping
    checkpoint_every: int = 1

    def __post_init__(self):
        validate(self)

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            image_side=self.image_side, patch_side=self.patch_side, channels=self.channels,
            depth=self.depth, width=self.width, heads=self.heads, mlp_ratio=self.mlp_ratio,
            proj_hidden=self.proj_hidden, out_dim=self.out_dim,
        )

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(
            flip_p=self.flip_p, brightness=self.brightness, contrast=self.contrast, color=self.color,
            gray_p=self.gray_p, blur_p=self.blur_p, blur_kernel=self.blur_kernel,
            global_scale=(self.global_scale_min, self.global_scale_max),
            local_scale=(self.local_scale_min, self.local_scale_max),
            global_side=self.image_side, local_side=self.local_side,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def reference_config() -> TrainConfig:
    """Full-scale settings (ViT-S/16, 224/96 crops, 1024 prototypes); structural only at desk scale."""
    return TrainConfig(
        batch_size=64, epochs=20, warmup_epochs=2, num_prototypes=1024, out_dim=256,
        image_side=224, local_side=96, patch_side=16, depth=12, width=384, heads=6,
        proj_hidden=2048,
    )


def validate(cfg: TrainConfig) -> None:
    if not cfg.tau_g < cfg.tau_l:
        raise ConfigError(f"tau_g ({cfg.tau_g}) must be smaller than tau_l ({cfg.tau_l})", ("tau_g", "tau_l"))
    for key in ("tau_g", "tau_l"):
        if not 0.0 < getattr(cfg, key) < 1.0:
            raise ConfigError(f"{key} must lie in (0, 1)", (key,))
    if cfg.warmup_epochs > cfg.epochs:
        raise ConfigError("warmup_epochs must not exceed epochs", ("warmup_epochs", "epochs"))
    if cfg.warmup_epochs < 0:
        raise ConfigError("warmup_epochs must be >= 0", ("warmup_epochs",))
    for key in ("lr_init", "lr_peak", "lr_final"):
        if not getattr(cfg, key) > 0:
            raise ConfigError(f"{key} must be positive", (key,))
    for key in ("corpus_size", "corpus_classes", "batch_size", "global_crops", "local_crops", "epochs",
                "num_prototypes", "checkpoint_every"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1", (key,))
    if cfg.weight_decay < 0 or cfg.grad_clip < 0 or cfg.lambda_reg < 0:
        raise ConfigError("weight_decay, grad_clip and lambda_reg must be >= 0",
                          ("weight_decay", "grad_clip", "lambda_reg"))
    for key in ("ema_momentum", "center_momentum"):
        if not 0.0 <= getattr(cfg, key) <= 1.0:
            raise ConfigError(f"{key} must lie in [0, 1]", (key,))
    if not -1.0 <= cfg.filter_theta <= 1.0:
        raise ConfigError("filter_theta must lie in [-1, 1]", ("filter_theta",))
    if cfg.filter_retries < 0 or cfg.sinkhorn_iters < 0:
        raise ConfigError("filter_retries and sinkhorn_iters must be >= 0", ("filter_retries", "sinkhorn_iters"))
    for key, allowed in _CHOICES.items():
        if getattr(cfg, key) not in allowed:
            raise ConfigError(f"{key} must be one of {', '.join(allowed)}", (key,))
    if cfg.corpus_size < cfg.batch_size:
        raise ConfigError("corpus_size must be at least batch_size", ("corpus_size", "batch_size"))
    if cfg.local_side % cfg.patch_side:
        raise ConfigError("local_side must be divisible by patch_side", ("local_side", "patch_side"))
    try:
        cfg.encoder()
        cfg.policy()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}", (key,)) from None


_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type] for f in fields(TrainConfig)}


def dumps(cfg: TrainConfig) -> str:
    return "".join(f"{f.name}={_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def loads(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key=value`` lines over ``base`` (defaults if omitted); ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}", (key,))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", (key,))
        values[key] = _parse(key, raw, _TYPES[key])
    base = base or TrainConfig()
    merged = {f.name: getattr(base, f.name) for f in fields(base)}
    merged.update(values)
    return TrainConfig(**merged)


def load(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
