"""Binary checkpoint container.

Layout (little-endian)::

    b"QGAL" | version u32 | tensor count u32
    per tensor:
        name: u16 length + UTF-8 bytes
        dtype u8 (0 = f32, 1 = int8-quantized, 2 = int4-quantized)
        rank u8, dims u32 * rank, block_size u32
        payload bytes, scales f32 * blocks, zeros f32 * blocks
    crc32 u32 over everything above

Run metadata (config, step, optimizer bookkeeping) travels as a JSON
document stored byte-per-element in an f32 tensor named ``__meta__``.
"""
from __future__ import annotations

import io
import json
import math
import os
import struct
import zlib

import numpy as np

from .quant import QuantSpec, QuantizedTensor

__all__ = ["CheckpointError", "MAGIC", "VERSION", "META_NAME", "write_checkpoint", "read_checkpoint", "describe"]

MAGIC = b"QGAL"
VERSION = 1
META_NAME = "__meta__"
_F32, _INT8, _INT4 = 0, 1, 2


class CheckpointError(ValueError):
    pass


def _encode_meta(meta: dict) -> np.ndarray:
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return np.frombuffer(raw, np.uint8).astype(np.float32)


def _decode_meta(arr: np.ndarray) -> dict:
    return json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))


def _write_tensor(buf: io.BytesIO, name: str, t) -> None:
    name_b = name.encode("utf-8")
    if isinstance(t, QuantizedTensor) and not t.spec.passthrough:
        t.validate()
        code = _INT8 if t.spec.bits == 8 else _INT4
        shape, block = t.shape, t.spec.block_size
        payload = np.ascontiguousarray(t.payload).view(np.uint8).tobytes()
        scales = t.scales.astype("<f4").tobytes()
        zeros = t.zeros.astype("<f4").tobytes()
    else:
        arr = _as_f32(t)
        code, shape, block = _F32, arr.shape, 0
        payload, scales, zeros = arr.astype("<f4").tobytes(), b"", b""
    buf.write(struct.pack("<H", len(name_b)))
    buf.write(name_b)
    buf.write(struct.pack("<BB", code, len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))
    buf.write(struct.pack("<I", block))
    buf.write(payload)
    buf.write(scales)
    buf.write(zeros)


def _as_f32(t) -> np.ndarray:
    if isinstance(t, QuantizedTensor):
        return t.payload.reshape(t.shape)
    return np.asarray(t, np.float32)


def write_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named tensors (float arrays or QuantizedTensors) and metadata."""
    items = list(tensors.items())
    if meta is not None:
        items.append((META_NAME, _encode_meta(meta)))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(items)))
    for name, t in items:
        _write_tensor(buf, name, t)
    body = buf.getvalue()
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(body)
            f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path!r}: {e}") from e


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict, dict]:
    """Returns (tensors, meta); float tensors come back as float32 arrays."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {e}") from e
    if len(data) < 16:
        raise CheckpointError("checkpoint is truncated")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(4)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch")

    tensors: dict = {}
    meta: dict = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, rank = r.unpack("<BB")
        shape = r.unpack(f"<{rank}I") if rank else ()
        (block,) = r.unpack("<I")
        numel = math.prod(shape)
        if code == _F32:
            arr = np.frombuffer(r.take(4 * numel), "<f4").astype(np.float32).reshape(shape)
            if name == META_NAME:
                meta = _decode_meta(arr)
            else:
                tensors[name] = arr
            continue
        if code not in (_INT8, _INT4) or block < 1:
            raise CheckpointError(f"tensor {name!r}: bad dtype code {code} or block size {block}")
        nb = -(-numel // block)
        if code == _INT8:
            payload = np.frombuffer(r.take(numel), np.int8).copy()
            bits = 8
        else:
            payload = np.frombuffer(r.take((numel + 1) // 2), np.uint8).copy()
            bits = 4
        scales = np.frombuffer(r.take(4 * nb), "<f4").astype(np.float32)
        zeros = np.frombuffer(r.take(4 * nb), "<f4").astype(np.float32)
        tensors[name] = QuantizedTensor(payload, scales, zeros, shape, QuantSpec(bits, block))
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after the last tensor")
    return tensors, meta


def describe(path) -> str:
    tensors, meta = read_checkpoint(path)
    lines = [f"{path}: {len(tensors)} tensors"]
    for name, t in tensors.items():
        if isinstance(t, QuantizedTensor):
            lines.append(f"  {name:<28} int{t.spec.bits:<3} {str(t.shape):<14} blocks={t.n_blocks}")
        else:
            lines.append(f"  {name:<28} f32    {str(t.shape):<14}")
    if meta:
        cfg = meta.get("config", {})
        lines.append(f"  step={meta.get('step')} method={cfg.get('method')} seed={cfg.get('seed')}")
    return "\n".join(lines)
