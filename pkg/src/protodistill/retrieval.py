"""Similarity gate that replaces local crops which look unlike every global crop."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import vit
from .data import crop_resize
from .tensor import EPS_NORM, DegenerateVectorError


class Embedder(Protocol):
    def __call__(self, images: np.ndarray) -> np.ndarray:
        """(B, C, H, W) -> (B, e) unit rows."""


def _unit_rows(z: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norm <= EPS_NORM):
        raise DegenerateVectorError("embedding with near-zero norm")
    return z / norm


class TeacherEmbedder:
    """encode + project with the given (teacher) parameters, evaluated off-tape."""

    def __init__(self, params: vit.Params, cfg: vit.EncoderConfig):
        self.params = params
        self.cfg = cfg

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return vit.embed(self.params, self.cfg, np.asarray(images)).data


class RandomProjectionEmbedder:
    """Fixed Gaussian projection of the image resampled to ``side`` x ``side``, centred at mid-grey."""

    def __init__(self, dim: int = 64, seed: int = 0, side: int = 8, channels: int = 3):
        self.side = side
        rng = np.random.default_rng(seed)
        self.weight = rng.normal(0.0, 1.0, size=(channels * side * side, dim))

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        h = images.shape[-1]
        small = np.stack([crop_resize(im, (0.0, 0.0, h, h), self.side) for im in images])
        flat = small.reshape(len(images), -1) - 0.5
        return _unit_rows(flat @ self.weight)


def embed(embedder: Embedder, image: np.ndarray) -> np.ndarray:
    """Unit embedding of one (C,H,W) image."""
    return _unit_rows(embedder(np.asarray(image)[None]))[0]


@dataclass
class FilterConfig:
    theta: float = -0.5
    max_retries: int = 3
    embedder: Embedder | None = None

    def __post_init__(self):
        if not -1.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [-1, 1]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class LocalDecision:
    index: int
    similarities: list[float] = field(default_factory=list)  # one per attempt, original first
    accepted_attempt: int | None = None
    fallback: bool = False

    @property
    def kept(self) -> bool:
        return self.accepted_attempt == 0

    @property
    def replaced(self) -> bool:
        return not self.kept

    @property
    def retries(self) -> int:
        return max(0, len(self.similarities) - 1 - int(self.fallback))

    @property
    def final_similarity(self) -> float:
        return self.similarities[-1]


@dataclass
class FilterReport:
    decisions: list[LocalDecision] = field(default_factory=list)

    @property
    def kept_count(self) -> int:
        return sum(d.kept for d in self.decisions)

    @property
    def replaced_count(self) -> int:
        return sum(d.replaced for d in self.decisions)

    def records(self) -> list[dict]:
        out = []
        for d in self.decisions:
            rec = asdict(d)
            rec.update(kept=d.kept, replaced=d.replaced, retries=d.retries)
            out.append(rec)
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())


def fallback_local(first_global: np.ndarray, local_side: int) -> np.ndarray:
    """Deterministic stand-in: central half-side square of the first global, at local size."""
    side = first_global.shape[-1]
    s = side / 2
    return crop_resize(first_global, ((side - s) / 2, (side - s) / 2, s, s), local_side)


def filter_locals(
    globals_: Sequence[np.ndarray],
    locals_: Sequence[np.ndarray],
    cfg: FilterConfig,
    recrop: Callable[[int, int], np.ndarray] | None = None,
    global_embeddings: np.ndarray | None = None,
    local_embeddings: np.ndarray | None = None,
) -> tuple[list[np.ndarray], FilterReport]:
    """Gate each local by its best cosine to any global; failures are re-cropped, then fall back.

    ``recrop(n, attempt)`` returns a fresh candidate for local ``n``
    (attempt counts from 1).  Precomputed unit embeddings may be passed to
    avoid re-embedding views the caller already ran through the embedder.
    """
    if len(globals_) == 0:
        raise ValueError("filter_locals needs at least one global view")
    if cfg.embedder is None:
        raise ValueError("FilterConfig.embedder is not set")
    g = global_embeddings if global_embeddings is not None else cfg.embedder(np.stack(globals_))
    z = local_embeddings if local_embeddings is not None else cfg.embedder(np.stack(locals_))
    best = (z @ g.T).max(axis=1)
    local_side = locals_[0].shape[-1]
    curated: list[np.ndarray] = []
    report = FilterReport()
    for n, view in enumerate(locals_):
        d = LocalDecision(index=n, similarities=[float(best[n])])
        if best[n] >= cfg.theta:
            d.accepted_attempt = 0
        else:
            view = None
            for attempt in range(1, cfg.max_retries + 1 if recrop is not None else 1):
                cand = recrop(n, attempt)
                sim = float((cfg.embedder(cand[None]) @ g.T).max())
                d.similarities.append(sim)
                if sim >= cfg.theta:
                    d.accepted_attempt = attempt
                    view = cand
                    break
            if view is None:
                view = fallback_local(globals_[0], local_side)
                d.similarities.append(float((cfg.embedder(view[None]) @ g.T).max()))
                d.fallback = True
        curated.append(view)
        report.decisions.append(d)
    return curated, report
