"""In-memory datasets and the flat binary record format.

Binary layout (all little-endian)::

    header : count u64, seq_len u64, input_dim u64, num_classes u64
    record : label u64, then seq_len*input_dim float64 values (row-major)

Records follow the header back to back; nothing trails the last record.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, InputError

_HEADER = struct.Struct("<4Q")


@dataclass
class Dataset:
    x: np.ndarray  # (N, seq_len, input_dim) float64
    y: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 3 or self.y.shape != (self.x.shape[0],):
            raise InputError(f"dataset shapes x{self.x.shape} / y{self.y.shape} do not line up")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def seq_len(self):
        return self.x.shape[1]

    @property
    def input_dim(self):
        return self.x.shape[2]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def batches(self, batch_size: int, order=None):
        n = len(self)
        order = np.arange(n) if order is None else order
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            yield self.x[idx], self.y[idx]


def export_dataset(ds: Dataset, path) -> None:
    rec = struct.Struct(f"<Q{ds.seq_len * ds.input_dim}d")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(len(ds), ds.seq_len, ds.input_dim, ds.num_classes))
        for i in range(len(ds)):
            f.write(rec.pack(int(ds.y[i]), *ds.x[i].ravel()))


def import_dataset(path, fmt: str = "flat") -> Dataset:
    """Read the flat record layout; raise FormatError/DataError on anything malformed."""
    if fmt != "flat":
        raise FormatError(f"unknown dataset format {fmt!r}")
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"file holds {len(buf)} bytes, shorter than the {_HEADER.size}-byte header")
    count, seq_len, input_dim, num_classes = _HEADER.unpack_from(buf, 0)
    if seq_len < 1 or input_dim < 1 or num_classes < 2:
        raise FormatError(f"header has invalid extents seq_len={seq_len} input_dim={input_dim} num_classes={num_classes}")
    width = seq_len * input_dim
    rec_size = 8 + 8 * width
    expected = _HEADER.size + count * rec_size
    if len(buf) != expected:
        whole = (len(buf) - _HEADER.size) // rec_size
        offset = _HEADER.size + whole * rec_size
        raise FormatError(f"header declares {count} records ({expected} bytes) but file has {len(buf)} bytes; "
                          f"payload breaks at byte offset {offset}")
    dt = np.dtype([("label", "<u8"), ("values", "<f8", (width,))])
    recs = np.frombuffer(buf, dtype=dt, count=count, offset=_HEADER.size)
    labels = recs["label"]
    bad = np.nonzero(labels >= num_classes)[0]
    if len(bad):
        raise DataError(f"record {bad[0]} has label {labels[bad[0]]} outside [0, {num_classes})")
    x = recs["values"].astype(np.float64).reshape(count, seq_len, input_dim)
    if not np.all(np.isfinite(x)):
        raise DataError("dataset contains non-finite values")
    return Dataset(x, labels.astype(np.int64), int(num_classes))
