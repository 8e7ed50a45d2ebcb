"""Binary checkpoint archive.

Layout (all integers little-endian)::

    b"LAPW"  u32 version  u32 tensor_count
    tensor_count x { u16 name_len, name (UTF-8), u8 dtype (0 = f32), u8 ndim,
                     ndim x u32 dims, f32 payload }
    u32 snapshot_len, snapshot (UTF-8 key = value text)

The snapshot holds the network config plus ``meta.*`` and ``train.*`` keys.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import LAPNet, NetworkConfig, ConfigError, config_from_mapping, config_to_text, read_keyvalues

MAGIC = b"LAPW"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(Exception):
    code = 10


class BadMagicError(CheckpointError):
    code = 11


class VersionError(CheckpointError):
    code = 12


class TruncatedError(CheckpointError):
    code = 13


class TensorCountError(CheckpointError):
    code = 14


class CorruptError(CheckpointError):
    code = 15


class ShapeMismatchError(CheckpointError):
    code = 16


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: NetworkConfig
    epoch: int = 0
    rng_state: dict | None = None
    extra: dict[str, str] = field(default_factory=dict)

    def snapshot_text(self) -> str:
        lines = [config_to_text(self.config)]
        lines.append(f"meta.epoch = {self.epoch}\n")
        if self.rng_state is not None:
            lines.append(f"meta.rng_state = {json.dumps(self.rng_state, sort_keys=True)}\n")
        lines += [f"{k} = {v}\n" for k, v in sorted(self.extra.items())]
        return "".join(lines)

    def build_network(self) -> LAPNet:
        net = LAPNet(self.config)
        try:
            net.load_state_dict({k: v.astype(np.float64) for k, v in self.tensors.items()})
        except ConfigError as exc:
            raise ShapeMismatchError(str(exc)) from exc
        return net


def from_network(net: LAPNet, epoch: int = 0, rng_state: dict | None = None,
                 extra: dict[str, str] | None = None) -> Checkpoint:
    tensors = {k: v.astype(np.float32) for k, v in net.state_dict().items()}
    return Checkpoint(tensors, net.cfg, epoch, rng_state, dict(extra or {}))


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", DTYPE_F32, a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    snap = ckpt.snapshot_text().encode("utf-8")
    out.append(struct.pack("<I", len(snap)) + snap)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"unexpected end of data at byte {self.pos} (wanted {n} more)")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _is_snapshot_at(buf: bytes, pos: int) -> bool:
    if pos + 4 > len(buf):
        return False
    (n,) = struct.unpack_from("<I", buf, pos)
    if pos + 4 + n != len(buf):
        return False
    try:
        buf[pos + 4:].decode("utf-8")
    except UnicodeDecodeError:
        return False
    return True


def _read_tensor(r: _Reader) -> tuple[str, np.ndarray]:
    (name_len,) = r.unpack("<H")
    try:
        name = r.take(name_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptError(f"tensor name is not UTF-8 at byte {r.pos}") from exc
    dtype, ndim = r.unpack("<BB")
    if dtype != DTYPE_F32:
        raise CorruptError(f"tensor {name!r}: unknown dtype code {dtype}")
    dims = r.unpack(f"<{ndim}I") if ndim else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
    return name, data


def _more_tensors_follow(buf: bytes, pos: int) -> bool:
    r = _Reader(buf)
    r.pos = pos
    try:
        while not _is_snapshot_at(buf, r.pos):
            _read_tensor(r)
    except CheckpointError:
        return False
    return r.pos > pos


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a checkpoint: bad magic bytes")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tensors = {}
    for i in range(count):
        if _is_snapshot_at(buf, r.pos):
            raise TensorCountError(f"header declares {count} tensors, file holds {i}")
        name, data = _read_tensor(r)
        tensors[name] = data
    if not _is_snapshot_at(buf, r.pos):
        if _more_tensors_follow(buf, r.pos):
            raise TensorCountError(f"header declares {count} tensors but more tensor records follow")
        raise TruncatedError("config snapshot is missing or cut short")
    (n,) = r.unpack("<I")
    values = read_keyvalues(r.take(n).decode("utf-8"))
    meta = {k: values.pop(k) for k in list(values) if k.startswith("meta.")}
    extra = {k: values.pop(k) for k in list(values) if k.startswith("train.")}
    try:
        cfg = config_from_mapping(values)
    except ConfigError as exc:
        raise CorruptError(f"bad config snapshot: {exc}") from exc
    rng = json.loads(meta["meta.rng_state"]) if "meta.rng_state" in meta else None
    return Checkpoint(tensors, cfg, int(meta.get("meta.epoch", 0)), rng, extra)


def save_checkpoint(ckpt: Checkpoint, path: str | Path):
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
