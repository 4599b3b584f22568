"""Vision-transformer encoder and projection head over :mod:`protodistill.tensor`.

Parameters live in flat ``dict[str, Tensor]`` trees keyed by dotted names,
which is what the optimizer, the EMA update and checkpoints iterate over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    image_side: int = 32
    patch_side: int = 4
    channels: int = 3
    depth: int = 3
    width: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    proj_hidden: int = 128
    out_dim: int = 32
    # each view is standardized over all its pixels before patch embedding;
    # the floor keeps blank crops finite
    std_floor: float = 0.02
    # block and projector weights start at std 0.02 * sqrt(init_ref_width / width),
    # which keeps a narrow encoder's per-layer gain equal to a width-384 one
    init_ref_width: int = 384

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ValueError(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        for name in ("image_side", "patch_side", "channels", "depth", "width", "heads", "proj_hidden", "out_dim",
                     "init_ref_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.std_floor > 0:
            raise ValueError("std_floor must be positive")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.width * self.mlp_ratio))

    @property
    def init_std(self) -> float:
        return 0.02 * math.sqrt(self.init_ref_width / self.width)


REFERENCE_CONFIG = EncoderConfig(
    image_side=224, patch_side=16, channels=3, depth=12, width=384, heads=6,
    mlp_ratio=4.0, proj_hidden=2048, out_dim=256,
)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    # redraw anything beyond two standard deviations
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: EncoderConfig, seed: int) -> Params:
    """Encoder plus projector parameters, all trainable."""
    rng = np.random.default_rng(seed)
    w, h, std = cfg.width, cfg.mlp_hidden, cfg.init_std
    p: dict[str, np.ndarray] = {
        "patch_embed.weight": _trunc_normal(rng, (cfg.channels * cfg.patch_side**2, w)),
        "patch_embed.bias": np.zeros(w),
        "cls_token": rng.normal(0.0, 0.02, size=w),
        "pos_embed": rng.normal(0.0, 0.02, size=(cfg.grid**2 + 1, w)),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        p[b + "norm1.weight"] = np.ones(w)
        p[b + "norm1.bias"] = np.zeros(w)
        p[b + "attn.qkv.weight"] = _trunc_normal(rng, (w, 3 * w), std)
        p[b + "attn.qkv.bias"] = np.zeros(3 * w)
        p[b + "attn.proj.weight"] = _trunc_normal(rng, (w, w), std)
        p[b + "attn.proj.bias"] = np.zeros(w)
        p[b + "norm2.weight"] = np.ones(w)
        p[b + "norm2.bias"] = np.zeros(w)
        p[b + "mlp.fc1.weight"] = _trunc_normal(rng, (w, h), std)
        p[b + "mlp.fc1.bias"] = np.zeros(h)
        p[b + "mlp.fc2.weight"] = _trunc_normal(rng, (h, w), std)
        p[b + "mlp.fc2.bias"] = np.zeros(w)
    p["norm.weight"] = np.ones(w)
    p["norm.bias"] = np.zeros(w)
    dims = [w, cfg.proj_hidden, cfg.proj_hidden, cfg.out_dim]
    for j in range(3):
        p[f"head.fc{j + 1}.weight"] = _trunc_normal(rng, (dims[j], dims[j + 1]), std)
        p[f"head.fc{j + 1}.bias"] = np.zeros(dims[j + 1])
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def patchify(images, patch_side: int) -> Tensor:
    """(C,H,W) -> (T, C*p*p), or batched (B,C,H,W) -> (B,T,C*p*p); row-major patches."""
    x = T.as_tensor(images)
    batched = x.ndim == 4
    if not batched:
        x = x.reshape(1, *x.shape)
    b, c, hh, ww = x.shape
    p = patch_side
    if hh % p or ww % p:
        raise ValueError(f"image {hh}x{ww} not divisible by patch {p}")
    gh, gw = hh // p, ww // p
    x = x.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * p * p)
    return x if batched else x.reshape(gh * gw, c * p * p)


def unpatchify(tokens: np.ndarray, patch_side: int, channels: int, side_h: int, side_w: int) -> np.ndarray:
    p = patch_side
    gh, gw = side_h // p, side_w // p
    x = np.asarray(tokens).reshape(gh, gw, channels, p, p)
    return x.transpose(2, 0, 3, 1, 4).reshape(channels, side_h, side_w)


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """1-D linear interpolation weights (dst, src), half-pixel centres, edge clamped."""
    out = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        x = (i + 0.5) * scale - 0.5
        x = min(max(x, 0.0), src - 1.0)
        lo = int(math.floor(x))
        hi = min(lo + 1, src - 1)
        frac = x - lo
        out[i, lo] += 1.0 - frac
        out[i, hi] += frac
    return out


def resample_pos_embed(pos: Tensor, src_grid: int, dst_grid: int) -> Tensor:
    """Resample the patch part of a positional table to another square grid; cls row copied."""
    if src_grid == dst_grid:
        return pos
    r = bilinear_matrix(src_grid, dst_grid)
    weights = Tensor(np.kron(r, r))  # (dst^2, src^2), row-major grid
    return T.concat([pos[0:1], T.matmul(weights, pos[1:])], axis=0)


def _attention(params: Params, prefix: str, x: Tensor, heads: int):
    b, t, w = x.shape
    dh = w // heads
    qkv = T.linear(x, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    qkv = qkv.reshape(b, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(dh))
    attn = T.softmax(scores, 1.0)
    out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, w)
    return T.linear(out, params[prefix + "proj.weight"], params[prefix + "proj.bias"]), attn


def standardize_views(images: np.ndarray, floor: float) -> np.ndarray:
    """Zero mean and unit variance over each (C,H,W) view; brightness and contrast drop out.

    Images are data here, so this runs off-tape.
    """
    mean = images.mean(axis=(1, 2, 3), keepdims=True)
    std = np.maximum(images.std(axis=(1, 2, 3), keepdims=True), floor)
    return (images - mean) / std


def forward_tokens(params: Params, cfg: EncoderConfig, images, attn_layer: int | None = None):
    """Run the transformer; returns final-norm tokens (B,T+1,W) and optionally one layer's attention."""
    x = T.as_tensor(images)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[1] != cfg.channels:
        raise ValueError(f"expected images (B,{cfg.channels},H,W), got {x.shape}")
    side = x.shape[2]
    if x.shape[3] != side or side % cfg.patch_side:
        raise ValueError(f"image {x.shape[2]}x{x.shape[3]} incompatible with patch {cfg.patch_side}")
    grid = side // cfg.patch_side
    b = x.shape[0]
    x = Tensor(standardize_views(x.data, cfg.std_floor))
    tokens = T.linear(patchify(x, cfg.patch_side), params["patch_embed.weight"], params["patch_embed.bias"])
    cls = T.broadcast_to(params["cls_token"].reshape(1, cfg.width), (b, 1, cfg.width))
    h = T.concat([cls, tokens], axis=1)
    h = h + resample_pos_embed(params["pos_embed"], cfg.grid, grid)
    captured = None
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        y = T.layer_norm(h, params[pre + "norm1.weight"], params[pre + "norm1.bias"])
        a, attn = _attention(params, pre + "attn.", y, cfg.heads)
        if attn_layer == i + 1:
            captured = attn
        h = h + a
        y = T.layer_norm(h, params[pre + "norm2.weight"], params[pre + "norm2.bias"])
        y = T.linear(y, params[pre + "mlp.fc1.weight"], params[pre + "mlp.fc1.bias"])
        y = T.linear(T.gelu(y), params[pre + "mlp.fc2.weight"], params[pre + "mlp.fc2.bias"])
        h = h + y
    h = T.layer_norm(h, params["norm.weight"], params["norm.bias"])
    return h, captured


def encode(params: Params, cfg: EncoderConfig, images) -> Tensor:
    """Final-layer cls feature: (W,) for one image, (B,W) for a batch."""
    single = T.as_tensor(images).ndim == 3
    h, _ = forward_tokens(params, cfg, images)
    cls = h[:, 0]
    return cls.reshape(cfg.width) if single else cls


def project(params: Params, feature: Tensor) -> Tensor:
    """Three affine layers with GELU between, then L2 normalization; (W,) -> (d,) or (B,W) -> (B,d)."""
    single = feature.ndim == 1
    y = feature.reshape(1, feature.shape[0]) if single else feature
    y = T.linear(y, params["head.fc1.weight"], params["head.fc1.bias"])
    y = T.linear(T.gelu(y), params["head.fc2.weight"], params["head.fc2.bias"])
    y = T.linear(T.gelu(y), params["head.fc3.weight"], params["head.fc3.bias"])
    y = T.l2_normalize(y)
    return y.reshape(y.shape[-1]) if single else y


def embed(params: Params, cfg: EncoderConfig, images) -> Tensor:
    return project(params, encode(params, cfg, images))


def attention_map(params: Params, cfg: EncoderConfig, image, layer: int) -> np.ndarray:
    """Per-head cls-to-patch attention of ``layer`` (1-based) on the patch grid: (heads, G, G)."""
    if not 1 <= layer <= cfg.depth:
        raise ValueError(f"layer {layer} outside [1, {cfg.depth}]")
    x = T.as_tensor(image)
    if x.ndim != 3:
        raise ValueError("attention_map takes a single (C,H,W) image")
    _, attn = forward_tokens(params, cfg, x, attn_layer=layer)
    grid = x.shape[1] // cfg.patch_side
    return attn.data[0, :, 0, 1:].reshape(cfg.heads, grid, grid)


def param_count(params: Params) -> int:
    return int(sum(p.data.size for p in params.values()))
