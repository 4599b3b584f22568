"""Binary checkpoint records.

Layout (little-endian)::

    b"PROSCKPT"  u32 version
    u32 config_len, config text (UTF-8), u32 crc32(config)
    u32 section_count
    per section: u16 name_len, name, u8 ndim, ndim x u32 dims,
                 float32 data, u32 crc32(name + dims + data)

Values are stored as float32.  The trainer rounds its state to float32 at
every checkpoint boundary, so a loaded state equals the in-memory one.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PROSCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def to_f32(a: np.ndarray) -> np.ndarray:
    """Round float64 values to the nearest float32, kept as float64."""
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


def encode_records(config_text: str, sections: list[tuple[str, np.ndarray]]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    cfg = config_text.encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg + struct.pack("<I", zlib.crc32(cfg))
    out += struct.pack("<I", len(sections))
    for name, arr in sections:
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        dims = struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
        data = arr.astype("<f4").tobytes()
        out += struct.pack("<H", len(nb)) + nb + dims + data
        out += struct.pack("<I", zlib.crc32(nb + dims + data))
    return bytes(out)


def decode_records(raw: bytes) -> tuple[str, list[tuple[str, np.ndarray]]]:
    """Parse and verify every checksum; raises before returning anything on damage."""
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise ChecksumError(f"file truncated inside {what}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(8, "header") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (clen,) = struct.unpack("<I", take(4, "config"))
    cfg = take(clen, "config")
    (crc,) = struct.unpack("<I", take(4, "config"))
    if crc != zlib.crc32(cfg):
        raise ChecksumError("checksum mismatch in section 'config'")
    (count,) = struct.unpack("<I", take(4, "section table"))
    sections = []
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"section #{i}"))
        nb = take(nlen, f"section #{i}")
        name = nb.decode("utf-8", errors="replace")
        (ndim,) = struct.unpack("<B", take(1, f"section {name!r}"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"section {name!r}"))
        dims = struct.pack(f"<B{ndim}I", ndim, *shape)
        size = int(np.prod(shape)) if ndim else 1
        data = take(4 * size, f"section {name!r}")
        (crc,) = struct.unpack("<I", take(4, f"section {name!r}"))
        if crc != zlib.crc32(nb + dims + data):
            raise ChecksumError(f"checksum mismatch in section {name!r}")
        arr = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(shape)
        sections.append((name, arr))
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after last section")
    return cfg.decode("utf-8"), sections


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    """Everything needed to continue a run: parameters, optimizer moments, counters."""

    config_text: str
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    prototypes: np.ndarray
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    optim_step: int = 0
    center: np.ndarray | None = None
    metrics: dict[str, float] = field(default_factory=dict)

    METRIC_KEYS = ("loss_total", "loss_ce", "loss_entropy")

    def sections(self) -> list[tuple[str, np.ndarray]]:
        for n in (self.step, self.epoch, self.optim_step):
            if not 0 <= n < 2**24:
                raise CheckpointError("counter exceeds float32-exact range")
        out = [(f"student/{k}", v) for k, v in self.student.items()]
        out += [(f"teacher/{k}", v) for k, v in self.teacher.items()]
        out.append(("prototypes", self.prototypes))
        out += [(f"adam/m/{k}", v) for k, v in self.adam_m.items()]
        out += [(f"adam/v/{k}", v) for k, v in self.adam_v.items()]
        if self.center is not None:
            out.append(("teacher_op/center", self.center))
        out.append(("state/counters", np.array([self.step, self.epoch, self.optim_step], dtype=np.float64)))
        out.append(("state/metrics", np.array([self.metrics.get(k, np.nan) for k in self.METRIC_KEYS])))
        return out

    def to_bytes(self) -> bytes:
        return encode_records(self.config_text, self.sections())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        text, sections = decode_records(raw)
        ck = cls(text, {}, {}, np.zeros((0, 0)), {}, {})
        seen_protos = False
        for name, arr in sections:
            if name.startswith("student/"):
                ck.student[name[8:]] = arr
            elif name.startswith("teacher/"):
                ck.teacher[name[8:]] = arr
            elif name.startswith("adam/m/"):
                ck.adam_m[name[7:]] = arr
            elif name.startswith("adam/v/"):
                ck.adam_v[name[7:]] = arr
            elif name == "prototypes":
                ck.prototypes = arr
                seen_protos = True
            elif name == "teacher_op/center":
                ck.center = arr
            elif name == "state/counters":
                ck.step, ck.epoch, ck.optim_step = (int(x) for x in arr)
            elif name == "state/metrics":
                ck.metrics = {k: float(x) for k, x in zip(cls.METRIC_KEYS, arr) if np.isfinite(x)}
            else:
                raise CheckpointError(f"unknown section {name!r}")
        if not seen_protos:
            raise CheckpointError("missing section 'prototypes'")
        return ck


def save_checkpoint(ck: Checkpoint, path) -> None:
    atomic_write(path, ck.to_bytes())


def check_shapes(ck: Checkpoint, expected: dict[str, tuple[int, ...]]) -> None:
    """Compare against the parameter shapes a config would create; error names the section."""
    got = {f"student/{k}": v.shape for k, v in ck.student.items()}
    got.update({f"teacher/{k}": v.shape for k, v in ck.teacher.items()})
    got["prototypes"] = ck.prototypes.shape
    for name, shape in expected.items():
        if name not in got:
            raise ShapeMismatchError(f"section {name!r} missing from checkpoint")
        if tuple(got[name]) != tuple(shape):
            raise ShapeMismatchError(f"section {name!r}: expected shape {tuple(shape)}, found {tuple(got[name])}")
    extra = set(got) - set(expected)
    if extra:
        raise ShapeMismatchError(f"unexpected sections: {sorted(extra)}")


def load_checkpoint(path, expected_shapes: dict[str, tuple[int, ...]] | None = None) -> Checkpoint:
    ck = Checkpoint.from_bytes(Path(path).read_bytes())
    if expected_shapes is not None:
        check_shapes(ck, expected_shapes)
    return ck
