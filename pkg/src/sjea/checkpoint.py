"""Binary checkpoint container: named tensors plus a JSON metadata block.

Layout, all integers little-endian:

    magic "SJEA" | u32 format version | u32 tensor count
    per tensor, sorted by name:
        u16 name length | name (utf-8) | u8 dtype tag | u8 rank
        u32 dim per axis | raw C-order array bytes
    u64 metadata length | metadata (utf-8 JSON, sorted keys)
    u64 payload length | 8-byte digest (leading bytes of SHA-256 over payload)

The payload is everything before the final 16 bytes.  Saving the result of a
load reproduces the original file byte for byte: tensor order, JSON key order,
and the digest are all deterministic functions of the content.  Writes go to a
temporary file in the same directory and are renamed into place, so a crash
never leaves a half-written checkpoint under the real name.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, FormatError, SchemaError
from .nn import Module
from .optim import Adam

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint",
           "collect_state", "restore_state"]

MAGIC = b"SJEA"
FORMAT_VERSION = 1
_DIGEST_BYTES = 8

_TAG_OF_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2,
                 np.dtype(np.int64): 3}
_DTYPE_OF_TAG = {tag: dt for dt, tag in _TAG_OF_DTYPE.items()}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"tensor name too long: {name[:40]}...")
    base = np.dtype(arr.dtype.type)
    if base not in _TAG_OF_DTYPE:
        raise FormatError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
    head = struct.pack("<H", len(raw)) + raw \
        + struct.pack("<BB", _TAG_OF_DTYPE[base], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + np.ascontiguousarray(arr, dtype=base.newbyteorder("<")).tobytes()


def _digest(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()[:_DIGEST_BYTES]


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Serialize tensors and metadata to path via an atomic rename."""
    body = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name in sorted(tensors):
        body.append(_encode_tensor(name, tensors[name]))
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body.append(struct.pack("<Q", len(blob)))
    body.append(blob)
    payload = b"".join(body)
    footer = struct.pack("<Q", len(payload)) + _digest(payload)

    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.write(footer)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, label: str):
        self.buf = buf
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError(
                f"{self.label}: truncated at byte {self.pos} "
                f"(needed {n} more of {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 + _DIGEST_BYTES:
        raise CorruptionError(f"{path}: file shorter than the footer")
    payload, footer = raw[:-(8 + _DIGEST_BYTES)], raw[-(8 + _DIGEST_BYTES):]
    (length,) = struct.unpack("<Q", footer[:8])
    if length != len(payload):
        raise CorruptionError(
            f"{path}: payload length {len(payload)} does not match the "
            f"recorded {length} (truncated or padded file)")
    if footer[8:] != _digest(payload):
        raise CorruptionError(f"{path}: content digest mismatch")

    rd = _Reader(payload, path)
    if rd.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    version, count = rd.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8")
        tag, rank = rd.unpack("<BB")
        if tag not in _DTYPE_OF_TAG:
            raise FormatError(f"{path}: unknown dtype tag {tag} for {name!r}")
        shape = rd.unpack(f"<{rank}I") if rank else ()
        dtype = _DTYPE_OF_TAG[tag]
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(rd.take(nbytes), dtype=dtype.newbyteorder("<"))
        tensors[name] = data.astype(dtype).reshape(shape)

    (meta_len,) = rd.unpack("<Q")
    meta = json.loads(rd.take(meta_len).decode("utf-8"))
    if rd.pos != len(payload):
        raise CorruptionError(
            f"{path}: {len(payload) - rd.pos} unexpected trailing payload bytes")
    return Checkpoint(tensors=tensors, meta=meta)


def collect_state(model: Module, optimizer: Adam | None = None) -> dict[str, np.ndarray]:
    """Gather parameters, running buffers, and optimizer moments by name."""
    out = {"model." + n: p.data for n, p in model.named_parameters()}
    for n, b in model.named_buffers():
        out["model." + n] = b
    if optimizer is not None:
        state = optimizer.state_dict()
        for n, a in state["m"].items():
            out["adam.m." + n] = a
        for n, a in state["v"].items():
            out["adam.v." + n] = a
    return out


def restore_state(model: Module, optimizer: Adam | None,
                  tensors: dict[str, np.ndarray], adam_t: int = 0) -> None:
    """Copy stored arrays into a freshly built model (and optimizer).

    Every stored name must land on a live target of the same shape and the
    live targets must all be covered, so renamed or missing entries surface
    immediately instead of silently training from partial state.
    """
    expected = collect_state(model, optimizer)
    stored = dict(tensors)
    missing = sorted(set(expected) - set(stored))
    unknown = sorted(set(stored) - set(expected))
    if missing or unknown:
        raise SchemaError(
            "checkpoint does not match the model: "
            f"missing {missing[:3]}, unknown {unknown[:3]}")
    for name, target in expected.items():
        value = stored[name]
        if value.shape != target.shape:
            raise SchemaError(
                f"checkpoint tensor {name!r} has shape {value.shape}, "
                f"model expects {target.shape}")

    params = dict(model.named_parameters())
    for n, p in params.items():
        p.data = stored["model." + n].astype(p.data.dtype, copy=True)
    for n, b in model.named_buffers():
        b[...] = stored["model." + n]
    if optimizer is not None:
        optimizer.load_state_dict({
            "t": adam_t,
            "m": {n: stored["adam.m." + n] for n, _ in params.items()},
            "v": {n: stored["adam.v." + n] for n, _ in params.items()},
        })
