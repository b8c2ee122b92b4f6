"""Versioned binary checkpoints.

Layout (little-endian)::

    "MXCK" | version u32 | sha256(config text) 32 bytes | config length u32 | config text
    tensor count u32
    per tensor: name length u16 | name utf-8 | ndim u8 | dims u32 * ndim | float32 payload
"""

from __future__ import annotations

import os
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import ModelConfig
from ..encoders import EncoderParams
from ..numerics import Tensor
from ..synthdata import FormatError

MAGIC = b"MXCK"
VERSION = 1
METRIC_COLUMNS = ("step", "lr", "tau", "l_seg", "l_re_pair", "l_re_multilabel", "l_ori_pair", "l_ori_multilabel", "total")
RING_SIZE = 256


class DigestMismatch(FormatError):
    pass


@dataclass
class TrainState:
    step: int
    params: EncoderParams
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    metrics: deque = field(default_factory=lambda: deque(maxlen=RING_SIZE))

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def _tensors(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", v.data) for k, v in state.params.items()]
    out += [(f"adam_m/{k}", v) for k, v in state.adam_m.items()]
    out += [(f"adam_v/{k}", v) for k, v in state.adam_v.items()]
    out.append(("state/step", np.array([state.step])))
    rows = np.array(list(state.metrics), dtype=np.float64).reshape(-1, len(METRIC_COLUMNS))
    out.append(("state/metrics", rows))
    return out


def encode(state: TrainState) -> bytes:
    cfg_text = state.config.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), state.config.digest(), struct.pack("<I", len(cfg_text)), cfg_text]
    tensors = _tensors(state)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def expected_size(state: TrainState) -> int:
    """Byte size implied by the format for ``state``."""
    cfg_len = len(state.config.to_text().encode("utf-8"))
    size = 4 + 4 + 32 + 4 + cfg_len + 4
    for name, arr in _tensors(state):
        arr = np.asarray(arr)
        size += 2 + len(name.encode("utf-8")) + 1 + 4 * arr.ndim + 4 * arr.size
    return size


def save_checkpoint(path, state: TrainState) -> None:
    """Write atomically: a partial write never replaces an existing checkpoint."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_bytes(encode(state))
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(f"checkpoint truncated at offset {len(self.blob)} while reading {what} (needed {self.off + n})")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def decode(blob: bytes, expected: ModelConfig | None = None) -> TrainState:
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    digest = r.take(32, "config digest")
    (cfg_len,) = r.unpack("<I", "config length")
    cfg_text = r.take(cfg_len, "config text").decode("utf-8")
    cfg = ModelConfig.from_text(cfg_text)
    if cfg.digest() != digest:
        raise DigestMismatch(f"config digest mismatch: stored {digest.hex()}, computed {cfg.digest().hex()}")
    if expected is not None and expected.digest() != digest:
        raise DigestMismatch(
            f"checkpoint was written for a different config: checkpoint {digest.hex()}, requested {expected.digest().hex()}"
        )
    (count,) = r.unpack("<I", "tensor count")
    dtype = np.float64 if cfg.float64 else np.float32
    params = EncoderParams(cfg)
    state = TrainState(step=0, params=params)
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * n, f"payload of {name}"), dtype="<f4").reshape(shape)
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = Tensor(arr.astype(dtype), requires_grad=True, name=key)
        elif kind == "adam_m":
            state.adam_m[key] = arr.astype(dtype)
        elif kind == "adam_v":
            state.adam_v[key] = arr.astype(dtype)
        elif name == "state/step":
            state.step = int(arr[0])
        elif name == "state/metrics":
            state.metrics.extend(tuple(float(v) for v in row) for row in arr.reshape(-1, len(METRIC_COLUMNS)))
        else:
            raise FormatError(f"unknown tensor {name!r} in checkpoint")
    if r.off != len(blob):
        raise FormatError(f"trailing bytes after offset {r.off}")
    return state


def load_checkpoint(path, expected: ModelConfig | None = None) -> TrainState:
    return decode(Path(path).read_bytes(), expected)


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step:06d}.mxck"


def latest_checkpoint(out_dir) -> Path | None:
    found = sorted(Path(out_dir).glob("ckpt_*.mxck"))
    return found[-1] if found else None
