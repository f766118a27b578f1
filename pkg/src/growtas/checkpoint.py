"""Binary checkpoint format.

All integers are little-endian; floats are IEEE-754 binary64 little-endian.

=========================  ================================================
field                      encoding
=========================  ================================================
magic                      ``b"GTAS"``
version                    u32 (currently 1)
total length               u64, byte size of the whole file
config hash                16 ASCII bytes
epoch                      u64
store architecture         u32 length + UTF-8 ``Architecture.encode()``
head_dim, input_dim, C     3 x u64
rng present                u8; if 1: seed u64, counter 4 x u64, key 2 x u64,
                           buffer 4 x u64, buffer_pos u64, has_uint32 u64,
                           uinteger u64
extra                      u32 length + UTF-8 JSON object
tensor table               u32 count; per tensor: u16 name length + UTF-8
                           name, u8 rank, rank x u64 extents, float64 payload
optimizer table            u32 count; per tensor: u16 name length + name,
                           u8 rank, extents, then m, v and step-count payloads
checksum                   SHA-256 of every preceding byte (32 bytes)
=========================  ================================================
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, CorruptionError, VersionError
from .kernels import AdamState
from .space import Architecture
from .supernet import SupernetWeights

MAGIC = b"GTAS"
VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    weights: SupernetWeights
    config_hash: str
    rng_seed: int | None = None
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return self.weights.epoch


def _name(buf, name):
    b = name.encode()
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def _extents(buf, shape):
    buf.write(struct.pack("<B", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}Q", *shape))


def _payload(buf, arr):
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    w = ckpt.weights
    buf = io.BytesIO()
    h = ckpt.config_hash.encode()
    if len(h) != 16:
        raise ConfigurationError(f"config hash must be 16 ASCII characters, got {ckpt.config_hash!r}")
    buf.write(h)
    buf.write(struct.pack("<Q", w.epoch))
    arch = w.shape_arch.encode().encode()
    buf.write(struct.pack("<I", len(arch)))
    buf.write(arch)
    buf.write(struct.pack("<3Q", w.head_dim, w.input_dim, w.num_classes))
    if ckpt.rng_state is None:
        buf.write(b"\x00")
    else:
        s = ckpt.rng_state
        buf.write(b"\x01")
        buf.write(struct.pack("<Q", ckpt.rng_seed))
        buf.write(struct.pack("<4Q", *s["counter"]))
        buf.write(struct.pack("<2Q", *s["key"]))
        buf.write(struct.pack("<4Q", *s["buffer"]))
        buf.write(struct.pack("<3Q", s["buffer_pos"], s["has_uint32"], s["uinteger"]))
    extra = json.dumps(ckpt.extra, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(extra)))
    buf.write(extra)
    buf.write(struct.pack("<I", len(w.params)))
    for n, p in w.params.items():
        _name(buf, n)
        _extents(buf, p.shape)
        _payload(buf, p)
    buf.write(struct.pack("<I", len(w.state)))
    for n, s in w.state.items():
        _name(buf, n)
        _extents(buf, s.m.shape)
        for arr in (s.m, s.v, s.steps):
            _payload(buf, arr)
    body = buf.getvalue()
    total = 4 + 4 + 8 + len(body) + _DIGEST
    head = MAGIC + struct.pack("<IQ", VERSION, total)
    digest = hashlib.sha256(head + body).digest()
    return head + body + digest


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.pos = offset

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptionError(f"unexpected end of checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode()

    def shape(self):
        (rank,) = self.unpack("<B")
        return self.unpack(f"<{rank}Q")

    def array(self, shape):
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 16 + _DIGEST or data[:4] != MAGIC:
        raise CorruptionError("not a checkpoint file (bad magic or too short)")
    version, total = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    if total != len(data):
        raise CorruptionError(f"checkpoint declares {total} bytes but holds {len(data)}")
    if hashlib.sha256(data[:-_DIGEST]).digest() != data[-_DIGEST:]:
        raise CorruptionError("checkpoint checksum mismatch")
    r = _Reader(data[:-_DIGEST], 16)
    config_hash = r.take(16).decode()
    (epoch,) = r.unpack("<Q")
    (alen,) = r.unpack("<I")
    arch = Architecture.decode(r.take(alen).decode())
    head_dim, input_dim, num_classes = r.unpack("<3Q")
    seed = state = None
    if r.take(1) == b"\x01":
        (seed,) = r.unpack("<Q")
        state = {"counter": list(r.unpack("<4Q")), "key": list(r.unpack("<2Q")), "buffer": list(r.unpack("<4Q"))}
        state["buffer_pos"], state["has_uint32"], state["uinteger"] = r.unpack("<3Q")
    (elen,) = r.unpack("<I")
    extra = json.loads(r.take(elen).decode())
    params = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        n = r.name()
        params[n] = r.array(r.shape())
    opt = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        n = r.name()
        shape = r.shape()
        st = AdamState(shape)
        st.m, st.v, st.steps = r.array(shape), r.array(shape), r.array(shape)
        opt[n] = st
    if r.pos != len(r.data):
        raise CorruptionError(f"{len(r.data) - r.pos} trailing bytes after the optimizer table")
    w = SupernetWeights(arch, head_dim, input_dim, num_classes, params, opt, epoch)
    expected = w.shapes()
    if list(expected) != list(params) or any(tuple(expected[n]) != params[n].shape for n in params):
        raise CorruptionError("tensor table does not match the stored architecture")
    if opt.keys() != params.keys() or any(opt[n].m.shape != params[n].shape for n in params):
        raise CorruptionError("optimizer table does not match the tensor table")
    return Checkpoint(w, config_hash, seed, state, extra)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically (temporary file then rename)."""
    path = Path(path)
    data = encode_checkpoint(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class ConfigMismatch(ConfigurationError):
    pass


def load_checkpoint(path, expected_hash: str | None = None, allow_mismatch: bool = False) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if expected_hash is not None and ckpt.config_hash != expected_hash and not allow_mismatch:
        raise ConfigMismatch(f"checkpoint was written under config {ckpt.config_hash}, "
                             f"current config is {expected_hash}")
    return ckpt
