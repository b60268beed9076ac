"""On-disk formats: trajectory datasets and model checkpoints.

Both files share the same little-endian primitives: an 8-byte magic, u32
fields, length-prefixed UTF-8 strings, and a trailing text-map metadata
block (u32 entry count, then u32-length-prefixed key/value pairs).

Dataset layout (magic ``QPDE0001``):

    magic[8] | u32 version | u32 n_trajectories | u32 rank | rank*u32 shape
    | u8 dtype tag (0 = float32) | payload (row-major, concatenated)
    | metadata text map

Checkpoint layout (magic ``QPCK0001``):

    magic[8] | u32 version | u32 n_arrays
    | per array: str name | u8 dtype tag (0 = float32, 1 = float64)
                | u32 rank | rank*u32 shape | raw bytes
    | metadata text map

Every parse error names the byte offset at which the file went wrong.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

DATASET_MAGIC = b"QPDE0001"
CHECKPOINT_MAGIC = b"QPCK0001"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class _Reader:
    def __init__(self, blob: bytes, what: str):
        self.blob = blob
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"truncated {self.what}: wanted {n} bytes, file ends after "
                f"{len(self.blob) - self.pos}", offset=self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def string(self) -> str:
        n = self.u32()
        return self.take(n).decode("utf-8")

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", offset=0)

    def expect_version(self) -> None:
        at = self.pos
        v = self.u32()
        if v != FORMAT_VERSION:
            raise FormatError(f"unsupported version {v}", offset=at)

    def done(self) -> None:
        if self.pos != len(self.blob):
            raise FormatError(f"{len(self.blob) - self.pos} trailing bytes", offset=self.pos)


def _pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_meta(meta: dict[str, str]) -> bytes:
    out = [struct.pack("<I", len(meta))]
    for k, v in meta.items():
        out.append(_pack_string(str(k)))
        out.append(_pack_string(str(v)))
    return b"".join(out)


def _read_meta(r: _Reader) -> dict[str, str]:
    n = r.u32()
    return {r.string(): r.string() for _ in range(n)}


# -- datasets ------------------------------------------------------------------

@dataclass
class Dataset:
    """Homogeneous trajectory collection: u[traj, time, field, x(, y)] + metadata."""

    u: np.ndarray
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def n_trajectories(self) -> int:
        return self.u.shape[0]

    @property
    def n_time(self) -> int:
        return self.u.shape[1]

    @property
    def n_fields(self) -> int:
        return self.u.shape[2]

    @property
    def n_x(self) -> int:
        return self.u.shape[3]

    @property
    def tau(self) -> float:
        return float(self.meta.get("tau", "nan"))


def write_dataset(trajectories, path, meta: dict[str, str] | None = None) -> None:
    """Write trajectories (array [n, ...] or list of same-shape arrays) as float32."""
    if isinstance(trajectories, Dataset):
        meta = dict(trajectories.meta) | dict(meta or {})
        trajectories = trajectories.u
    if isinstance(trajectories, (list, tuple)):
        shapes = {np.asarray(t).shape for t in trajectories}
        if len(shapes) != 1:
            raise FormatError(f"trajectory shapes are not homogeneous: {sorted(shapes)}")
        trajectories = np.stack([np.asarray(t) for t in trajectories])
    arr = np.asarray(trajectories)
    if arr.ndim < 2:
        raise FormatError(f"expected [n_trajectories, ...], got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError("refusing to write non-finite trajectory values")
    data = np.ascontiguousarray(arr, dtype="<f4")
    shape = data.shape[1:]
    head = [DATASET_MAGIC,
            struct.pack("<I", FORMAT_VERSION),
            struct.pack("<I", data.shape[0]),
            struct.pack("<I", len(shape))]
    head += [struct.pack("<I", s) for s in shape]
    head.append(struct.pack("<B", 0))
    blob = b"".join(head) + data.tobytes() + _pack_meta(meta or {})
    with open(path, "wb") as f:
        f.write(blob)


def _read_blob(path, what: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise FormatError(f"cannot read {what} {path}: {e.strerror}") from e


def read_dataset(path) -> Dataset:
    r = _Reader(_read_blob(path, "dataset"), "dataset")
    r.expect_magic(DATASET_MAGIC)
    r.expect_version()
    n = r.u32()
    rank = r.u32()
    if rank > 8:
        raise FormatError(f"implausible trajectory rank {rank}", offset=r.pos - 4)
    shape = tuple(r.u32() for _ in range(rank))
    at = r.pos
    tag = r.u8()
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}", offset=at)
    dtype = _DTYPES[tag]
    count = n * int(np.prod(shape, dtype=np.int64))
    payload = r.take(count * dtype.itemsize)
    u = np.frombuffer(payload, dtype=dtype).reshape((n,) + shape)
    meta = _read_meta(r)
    r.done()
    return Dataset(u=np.array(u), meta=meta)


# -- checkpoints ---------------------------------------------------------------

def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict[str, str],
                 magic: bytes = CHECKPOINT_MAGIC) -> None:
    out = [magic, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(arrays))]
    for name, a in arrays.items():
        a = np.asarray(a)
        if a.dtype not in _DTYPE_TAGS:
            a = a.astype(np.float64)
        out.append(_pack_string(name))
        out.append(struct.pack("<B", _DTYPE_TAGS[a.dtype]))
        out.append(struct.pack("<I", a.ndim))
        out += [struct.pack("<I", s) for s in a.shape]
        out.append(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes())
    out.append(_pack_meta(meta))
    with open(path, "wb") as f:
        f.write(b"".join(out))


def read_arrays(path, magic: bytes = CHECKPOINT_MAGIC) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    r = _Reader(_read_blob(path, "checkpoint"), "checkpoint")
    r.expect_magic(magic)
    r.expect_version()
    n = r.u32()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n):
        name = r.string()
        at = r.pos
        tag = r.u8()
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for array {name!r}", offset=at)
        dtype = _DTYPES[tag]
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        payload = r.take(count * dtype.itemsize)
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    meta = _read_meta(r)
    r.done()
    return arrays, meta
