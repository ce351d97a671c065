"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"LPACKPT" + version byte (b"1")
    u32 length + UTF-8 config record (sorted key=value lines)
    u32 tensor count
    per tensor: u32 name length + UTF-8 name, u8 rank, rank x u32 dims,
                raw IEEE-754 values, row-major, at the config's precision
    u64 FNV-1a checksum of every preceding byte

Optimizer moments ride along as tensors named ``optim.m.<param>`` and
``optim.v.<param>``; scalar training state is stored as ``state.*`` keys in
the config record.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from lpa import kernels
from lpa.config import ConfigError, parse_record, render_record
from lpa.model import Model, build_model

MAGIC = b"LPACKPT"
VERSION = b"1"


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class TrainState:
    step: int = 0
    seed: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _tensor_bytes(name, arr, dtype):
    buf = io.BytesIO()
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    for n in arr.shape:
        buf.write(struct.pack("<I", n))
    buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return buf.getvalue()


def encode(model: Model, train_state: TrainState | None = None) -> bytes:
    cfg = model.config
    dtype = np.dtype("<f4" if cfg.precision == "float32" else "<f8")
    extra = None
    tensors = [(k, p.data) for k, p in model.parameters().items()]
    if train_state is not None:
        extra = {"state.step": train_state.step, "state.seed": train_state.seed}
        tensors += [(f"optim.m.{k}", v) for k, v in train_state.m.items()]
        tensors += [(f"optim.v.{k}", v) for k, v in train_state.v.items()]
    record = render_record(cfg, extra).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC + VERSION)
    out.write(struct.pack("<I", len(record)))
    out.write(record)
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        out.write(_tensor_bytes(name, arr, dtype))
    body = out.getvalue()
    return body + struct.pack("<Q", kernels.fnv1a64(body))


def save_checkpoint(model: Model, path, train_state: TrainState | None = None):
    """Write atomically: a temp file in the same directory is renamed over ``path``."""
    data = encode(model, train_state)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def decode(data: bytes):
    """Parse checkpoint bytes into ``(model, train_state_or_None)``."""
    if len(data) < len(MAGIC) + 1 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("bad magic: not an LPA checkpoint")
    version = data[len(MAGIC) : len(MAGIC) + 1]
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version!r}")
    if len(data) < len(MAGIC) + 1 + 8:
        raise CheckpointFormatError("truncated checkpoint")
    body, tail = data[:-8], data[-8:]
    if struct.unpack("<Q", tail)[0] != kernels.fnv1a64(body):
        raise CheckpointFormatError("checksum mismatch (corrupt or truncated file)")
    rd = _Reader(body)
    rd.take(len(MAGIC) + 1)
    try:
        cfg, extra = parse_record(rd.take(rd.u32()).decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointFormatError(f"bad config record: {exc}") from exc
    dtype = np.dtype("<f4" if cfg.precision == "float32" else "<f8")
    count = rd.u32()
    tensors = {}
    for _ in range(count):
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.take(1)[0]
        shape = tuple(rd.u32() for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(rd.take(n * dtype.itemsize), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if rd.pos != len(body):
        raise CheckpointFormatError("trailing bytes after tensor table")

    model = build_model(cfg, seed=0)
    params = model.parameters()
    missing = set(params) - set(tensors)
    if missing:
        raise CheckpointFormatError(f"checkpoint lacks tensors {sorted(missing)[:3]}")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise CheckpointFormatError(f"{name}: stored shape {tensors[name].shape} != expected {p.shape}")
        p.data = tensors[name]
    state = None
    if "state.step" in extra:
        state = TrainState(
            step=int(extra["state.step"]),
            seed=int(extra.get("state.seed", 0)),
            m={k[len("optim.m."):]: v for k, v in tensors.items() if k.startswith("optim.m.")},
            v={k[len("optim.v."):]: v for k, v in tensors.items() if k.startswith("optim.v.")},
        )
    return model, state


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def load_checkpoint(path) -> Model:
    return read_checkpoint(path)[0]
