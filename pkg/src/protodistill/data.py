"""Synthetic toy corpus and the multi-crop augmentation pipeline.

Every random draw comes from a stream keyed by integers (corpus seed, image
index, view index, ...), so any image or view can be regenerated on its own
and generation order never affects results.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

CORPUS_MAGIC = b"PROSIMG1"
_LUMA = np.array([0.299, 0.587, 0.114])


def stream(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & (2**64 - 1) for k in keys]))


@dataclass(frozen=True)
class ToyImage:
    pixels: np.ndarray  # (3, side, side) in [0, 1]
    class_id: int
    source_seed: int


def render_toy_image(class_id: int, source_seed: int, side: int, classes: int) -> np.ndarray:
    """Grey stripes whose orientation encodes the class, under heavy pixel noise.

    The stripes vary along the angle ``pi * class_id / classes`` plus a jitter
    of up to 0.15 rad; period and phase are per-image nuisances.  The noise
    (std 0.2 per pixel and channel) keeps random features from separating the
    classes well, while every crop of an image still shows its orientation.
    Values are rounded to float32 so corpus files round-trip exactly.
    """
    rng = stream(source_seed)
    angle = math.pi * class_id / classes + rng.uniform(-0.15, 0.15)
    period = rng.uniform(4.0, 6.0)  # pixels
    phase = rng.uniform(0.0, 2.0 * math.pi)
    coords = np.arange(side) + 0.5
    u, v = np.meshgrid(coords, coords)  # u across columns, v down rows
    along = u * math.cos(angle) + v * math.sin(angle)
    base = 0.5 + 0.2 * np.sin(2.0 * math.pi * along / period + phase)
    img = base[None] + rng.normal(0.0, 0.2, size=(3, side, side))
    return np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)


def _image_seed(corpus_seed: int, index: int) -> int:
    return int(stream(corpus_seed, index).integers(0, 2**63))


def synth_corpus(n: int, classes: int, side: int, seed: int) -> list[ToyImage]:
    """``n`` images, class ids assigned round-robin."""
    if n < 1 or classes < 1 or side < 1:
        raise ValueError("n, classes and side must be positive")
    out = []
    for i in range(n):
        c = i % classes
        s = _image_seed(seed, i)
        out.append(ToyImage(render_toy_image(c, s, side, classes), c, s))
    return out


def corpus_labels(corpus: list[ToyImage]) -> np.ndarray:
    return np.array([im.class_id for im in corpus], dtype=np.int64)


def corpus_pixels(corpus: list[ToyImage]) -> np.ndarray:
    return np.stack([im.pixels for im in corpus])


def save_corpus(path, corpus: list[ToyImage], classes: int, seed: int) -> None:
    side = corpus[0].pixels.shape[-1]
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(struct.pack("<4q", len(corpus), classes, side, seed))
        for im in corpus:
            fh.write(im.pixels.astype("<f4").tobytes())


def load_corpus(path) -> tuple[list[ToyImage], dict]:
    """Inverse of :func:`save_corpus`; labels and source seeds are re-derived from the header."""
    raw = Path(path).read_bytes()
    if raw[:8] != CORPUS_MAGIC:
        raise ValueError(f"{path}: not a corpus file (bad magic)")
    n, classes, side, seed = struct.unpack("<4q", raw[8:40])
    block = 3 * side * side * 4
    if len(raw) != 40 + n * block:
        raise ValueError(f"{path}: expected {n} images of side {side}, file size disagrees")
    px = np.frombuffer(raw, dtype="<f4", offset=40).astype(np.float64).reshape(n, 3, side, side)
    corpus = [ToyImage(px[i].copy(), i % classes, _image_seed(seed, i)) for i in range(n)]
    return corpus, {"n": n, "classes": classes, "side": side, "seed": seed}


@dataclass(frozen=True)
class AugmentPolicy:
    flip_p: float = 0.0
    brightness: float = 0.4  # factor drawn from [1 - b, 1 + b]
    contrast: float = 0.4
    color: float = 0.0  # per-channel gains drawn from [1 - c, 1 + c]
    gray_p: float = 0.2
    blur_p: float = 0.5
    blur_kernel: int = 3
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    global_side: int = 32
    local_side: int = 16
    aspect: tuple[float, float] = (3 / 4, 4 / 3)

    def __post_init__(self):
        for name in ("flip_p", "gray_p", "blur_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        for name in ("brightness", "contrast", "color"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} jitter must be in [0, 1)")
        for name in ("global_scale", "local_scale"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi <= 1.0:
                raise ValueError(f"{name} must lie within (0, 1]")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be a positive odd integer")


IDENTITY_POLICY = AugmentPolicy(flip_p=0.0, brightness=0.0, contrast=0.0, gray_p=0.0, blur_p=0.0)


def box_blur(img: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    padded = np.pad(img, ((0, 0), (r, r), (r, r)), mode="edge")
    h, w = img.shape[1:]
    out = np.zeros_like(img)
    for dy in range(k):
        for dx in range(k):
            out += padded[:, dy:dy + h, dx:dx + w]
    return out / (k * k)


def adjust_brightness(x: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(x * factor, 0.0, 1.0)


def augment(view: np.ndarray, policy: AugmentPolicy, seed: int | np.random.Generator):
    """Photometric jitter on one (3,H,W) view; returns the view and a record of what ran."""
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed)
    x = np.array(view, dtype=np.float64)
    rec: dict = {}
    # draw everything up front so the stream layout is fixed
    u_flip, u_gray, u_blur = rng.random(3)
    b = rng.uniform(1.0 - policy.brightness, 1.0 + policy.brightness)
    c = rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast)
    gains = rng.uniform(1.0 - policy.color, 1.0 + policy.color, size=3)
    if u_flip < policy.flip_p:
        x = x[:, :, ::-1]
        rec["flip"] = True
    if policy.brightness > 0:
        x = adjust_brightness(x, b)
        rec["brightness"] = b
    if policy.contrast > 0:
        m = x.mean()
        x = (x - m) * c + m
        rec["contrast"] = c
    if policy.color > 0:
        x = np.clip(x * gains[:, None, None], 0.0, 1.0)
        rec["color"] = gains.tolist()
    if u_gray < policy.gray_p:
        x = np.broadcast_to(np.tensordot(_LUMA, x, axes=1), x.shape).copy()
        rec["grayscale"] = True
    if u_blur < policy.blur_p:
        x = box_blur(x, policy.blur_kernel)
        rec["blur"] = policy.blur_kernel
    return np.clip(x, 0.0, 1.0), rec


def sample_crop(rng: np.random.Generator, side: int, scale: tuple[float, float], aspect: tuple[float, float]):
    """Random area/aspect rectangle (x0, y0, w, h) in pixel units inside a side x side image."""
    area = rng.uniform(*scale) * side * side
    ratio = math.exp(rng.uniform(math.log(aspect[0]), math.log(aspect[1])))
    w = min(math.sqrt(area * ratio), side)
    h = min(math.sqrt(area / ratio), side)
    if w < 1.0 or h < 1.0:
        raise ValueError(f"crop {w:.2f}x{h:.2f} is below one pixel")
    x0 = rng.uniform(0.0, side - w)
    y0 = rng.uniform(0.0, side - h)
    return (x0, y0, w, h)


def crop_resize(img: np.ndarray, rect, out_side: int) -> np.ndarray:
    """Bilinear resample of a (3,H,W) rectangle to (3,out,out), pixel-centre aligned."""
    x0, y0, w, h = rect
    t = (np.arange(out_side) + 0.5) / out_side
    ys = y0 + t * h - 0.5
    xs = x0 + t * w - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([map_coordinates(ch, [gy, gx], order=1, mode="nearest") for ch in img])


@dataclass
class ViewSet:
    globals: list[np.ndarray]
    locals: list[np.ndarray]
    crop_records: list[dict] = field(default_factory=list)


def make_view(image: ToyImage, policy: AugmentPolicy, seed: int, index: int, is_global: bool, attempt: int = 0):
    """One augmented crop; ``index`` counts globals first, then locals."""
    rng = stream(seed, image.source_seed, index, attempt)
    side = image.pixels.shape[-1]
    scale = policy.global_scale if is_global else policy.local_scale
    out_side = policy.global_side if is_global else policy.local_side
    rect = sample_crop(rng, side, scale, policy.aspect)
    view, rec = augment(crop_resize(image.pixels, rect, out_side), policy, rng)
    rec.update(kind="global" if is_global else "local", index=index, attempt=attempt, rect=list(rect))
    return view, rec


def multicrop(image: ToyImage, M: int, N: int, policy: AugmentPolicy, seed: int) -> ViewSet:
    if M < 1 or N < 1:
        raise ValueError("need at least one global and one local view")
    vs = ViewSet([], [], [])
    for i in range(M + N):
        view, rec = make_view(image, policy, seed, i, i < M)
        (vs.globals if i < M else vs.locals).append(view)
        vs.crop_records.append(rec)
    return vs


def policy_dict(policy: AugmentPolicy) -> dict:
    return asdict(policy)
