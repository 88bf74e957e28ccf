"""Block-wise uniform quantization with nearest and stochastic rounding.

Tensors are flattened in row-major order and cut into contiguous blocks of
``block_size`` elements. Each block gets an affine (min/max) grid::

    s = (max - min) / (2**bits - 1)
    z = round(-min / s) - 2**(bits - 1)
    q = clamp(round_mode(w / s) + z, -2**(bits - 1), 2**(bits - 1) - 1)
    w' = (q - z) * s

``bits=None`` is a float passthrough used for the unquantized baselines and
as a test hook; the payload is then the float32 tensor itself.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Rounding",
    "QuantSpec",
    "QuantizedTensor",
    "QuantizationError",
    "substream",
    "quantize",
    "dequantize",
    "stochastic_round",
    "apply_update",
    "apply_update_sr",
    "pack_int4",
    "unpack_int4",
]

# Largest |round(-min/s)| allowed; keeps zero-points exact in float32 and the
# dequantize -> requantize cycle a fixed point.
_MAX_OFFSET = 2.0**20
_SR_SLACK = 1e-6


class QuantizationError(ValueError):
    """Malformed input or quantized tensor."""


class Rounding(str, enum.Enum):
    NEAREST = "nearest"
    STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class QuantSpec:
    bits: int | None = 8
    block_size: int = 256
    rounding: Rounding = Rounding.NEAREST

    def __post_init__(self):
        if self.bits is not None and self.bits not in (4, 8):
            raise QuantizationError(f"bits must be 4, 8 or None, got {self.bits}")
        if self.block_size < 1:
            raise QuantizationError(f"block_size must be >= 1, got {self.block_size}")
        object.__setattr__(self, "rounding", Rounding(self.rounding))

    @property
    def passthrough(self) -> bool:
        return self.bits is None

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def with_rounding(self, rounding: Rounding) -> "QuantSpec":
        return QuantSpec(self.bits, self.block_size, Rounding(rounding))


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent counter-based generator for ``(seed, *keys)``.

    Philox substreams keyed by e.g. (layer, step) make stochastic rounding
    reproducible regardless of call order.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(eq=False)
class QuantizedTensor:
    payload: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray
    shape: tuple[int, ...]
    spec: QuantSpec = field(default_factory=QuantSpec)

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def n_blocks(self) -> int:
        if self.spec.passthrough:
            return 0
        return -(-self.numel // self.spec.block_size)

    def integers(self) -> np.ndarray:
        """Flat int8 view of the stored integers (unpacked for 4-bit)."""
        if self.spec.passthrough:
            raise QuantizationError("passthrough tensor has no integer payload")
        if self.spec.bits == 4:
            return unpack_int4(self.payload, self.numel)
        return self.payload

    @property
    def payload_nbytes(self) -> int:
        return int(self.payload.nbytes)

    @property
    def metadata_nbytes(self) -> int:
        return int(self.scales.nbytes + self.zeros.nbytes)

    def validate(self) -> None:
        spec = self.spec
        if spec.passthrough:
            if self.payload.size != self.numel:
                raise QuantizationError(
                    f"payload has {self.payload.size} elements, shape {self.shape} needs {self.numel}"
                )
            return
        expected = (self.numel + 1) // 2 if spec.bits == 4 else self.numel
        if self.payload.size != expected:
            raise QuantizationError(
                f"payload has {self.payload.size} entries, shape {self.shape} "
                f"at {spec.bits} bits needs {expected}"
            )
        nb = self.n_blocks
        if self.scales.size != nb or self.zeros.size != nb:
            raise QuantizationError(
                f"expected {nb} scales/zeros, got {self.scales.size}/{self.zeros.size}"
            )

    def copy(self) -> "QuantizedTensor":
        return QuantizedTensor(
            self.payload.copy(), self.scales.copy(), self.zeros.copy(), self.shape, self.spec
        )

    def __repr__(self) -> str:
        bits = "f32" if self.spec.passthrough else f"int{self.spec.bits}"
        return f"QuantizedTensor({bits}, shape={self.shape}, blocks={self.n_blocks})"


def _blocks(flat: np.ndarray, block_size: int) -> np.ndarray:
    nb = -(-flat.size // block_size)
    pad = nb * block_size - flat.size
    if pad:
        # edge padding leaves per-block min/max untouched
        flat = np.concatenate([flat, np.full(pad, flat[-1], dtype=flat.dtype)])
    return flat.reshape(nb, block_size)


def _round(x: np.ndarray, rounding: Rounding, rng: np.random.Generator | None) -> np.ndarray:
    if rounding is Rounding.NEAREST:
        return np.rint(x)  # ties to even
    lo = np.floor(x)
    up = rng.random(x.shape) < (x - lo)
    return lo + up


def _fit_scale(s32: np.ndarray, mn: np.ndarray, mx: np.ndarray, spec: QuantSpec):
    """Stored float32 scales and zero-points such that no block extreme clamps.

    Starts from the nearest float32 scale, so a tensor already on its grid
    maps back onto the same grid, and nudges a block's scale up one ulp at a
    time only where an extreme would round outside the integer range. Under
    stochastic rounding an extreme may overshoot by at most ``_SR_SLACK``
    steps, which bounds the clamping bias.
    """
    for _ in range(8):
        scale = s32.astype(np.float64)
        zero = np.rint(-mn / scale) + spec.qmin
        hi, lo = mx / scale + zero, mn / scale + zero
        if spec.rounding is Rounding.NEAREST:
            bad = (np.rint(hi) > spec.qmax) | (np.rint(lo) < spec.qmin)
        else:
            bad = (hi > spec.qmax + _SR_SLACK) | (lo < spec.qmin - _SR_SLACK)
        if not bad.any():
            break
        s32 = np.where(bad, np.nextafter(s32, np.float32(np.inf)), s32)
    return scale, zero


def quantize(
    W, spec: QuantSpec = QuantSpec(), rng: np.random.Generator | None = None
) -> QuantizedTensor:
    W = np.asarray(W)
    shape = W.shape
    if spec.rounding is Rounding.STOCHASTIC and not spec.passthrough and rng is None:
        raise QuantizationError("stochastic rounding requires an rng")
    flat = W.reshape(-1).astype(np.float64)

    if spec.passthrough:
        if not np.all(np.isfinite(flat)):
            raise QuantizationError(
                f"non-finite value at flat index {int(np.argmin(np.isfinite(flat)))}"
            )
        return QuantizedTensor(
            flat.astype(np.float32), np.zeros(0, np.float32), np.zeros(0, np.float32), shape, spec
        )

    if flat.size == 0:
        payload = np.zeros(0, np.uint8 if spec.bits == 4 else np.int8)
        return QuantizedTensor(payload, np.zeros(0, np.float32), np.zeros(0, np.float32), shape, spec)

    blocks = _blocks(flat, spec.block_size)
    finite = np.isfinite(blocks).all(axis=1)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise QuantizationError(f"non-finite value in block {bad} of tensor with shape {shape}")

    levels = 2**spec.bits - 1
    mn = blocks.min(axis=1)
    mx = blocks.max(axis=1)
    mag = np.maximum(np.abs(mn), np.abs(mx))
    scale = np.maximum((mx - mn) / levels, mag / _MAX_OFFSET)
    scale[scale == 0.0] = 1.0  # all-zero block sentinel
    # blocks of subnormals can underflow the float32 scale
    s32 = np.maximum(scale.astype(np.float32), np.nextafter(np.float32(0), np.float32(1)))
    scale, zero = _fit_scale(s32, mn, mx, spec)

    q = _round(blocks / scale[:, None], spec.rounding, rng) + zero[:, None]
    q = np.clip(q, spec.qmin, spec.qmax).reshape(-1)[: flat.size].astype(np.int8)
    payload = pack_int4(q) if spec.bits == 4 else q
    return QuantizedTensor(payload, scale.astype(np.float32), zero.astype(np.float32), shape, spec)


def dequantize(Q: QuantizedTensor) -> np.ndarray:
    Q.validate()
    if Q.spec.passthrough:
        return Q.payload.reshape(Q.shape).astype(np.float32, copy=True)
    if Q.numel == 0:
        return np.zeros(Q.shape, np.float32)
    q = _blocks(Q.integers().astype(np.float64), Q.spec.block_size)
    w = (q - Q.zeros.astype(np.float64)[:, None]) * Q.scales.astype(np.float64)[:, None]
    return w.reshape(-1)[: Q.numel].astype(np.float32).reshape(Q.shape)


def stochastic_round(x: float, rng: np.random.Generator) -> int:
    """floor(x) with probability ceil(x) - x, else ceil(x)."""
    x = float(x)
    if not math.isfinite(x):
        raise QuantizationError(f"cannot round non-finite value {x}")
    lo = math.floor(x)
    return lo + int(rng.random() < x - lo)


def apply_update(
    W_q: QuantizedTensor,
    delta,
    rng: np.random.Generator | None = None,
    rounding: Rounding | str | None = None,
) -> QuantizedTensor:
    """Add ``delta`` in float64 and requantize on a grid refitted to the result."""
    delta = np.asarray(delta)
    if tuple(delta.shape) != W_q.shape:
        raise QuantizationError(f"delta shape {delta.shape} does not match {W_q.shape}")
    rounding = W_q.spec.rounding if rounding is None else Rounding(rounding)
    updated = dequantize(W_q).astype(np.float64) + delta.astype(np.float64)
    return quantize(updated, W_q.spec.with_rounding(rounding), rng)


def apply_update_sr(W_q: QuantizedTensor, delta, rng: np.random.Generator) -> QuantizedTensor:
    return apply_update(W_q, delta, rng, Rounding.STOCHASTIC)


def pack_int4(values) -> np.ndarray:
    """Pack signed 4-bit integers two per byte, earlier element in the low nibble."""
    v = np.asarray(values).reshape(-1)
    if v.size:
        bad = np.flatnonzero((v < -8) | (v > 7))
        if bad.size:
            i = int(bad[0])
            raise QuantizationError(f"value {int(v[i])} at index {i} outside int4 range [-8, 7]")
    nib = (v.astype(np.int16) & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.concatenate([nib, np.zeros(1, np.uint8)])
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8)


def unpack_int4(data, count: int) -> np.ndarray:
    b = np.frombuffer(bytes(data), np.uint8) if isinstance(data, (bytes, bytearray)) else np.asarray(data, np.uint8)
    if b.size != (count + 1) // 2:
        raise QuantizationError(f"{b.size} bytes cannot hold exactly {count} int4 values")
    nib = np.empty(b.size * 2, np.int16)
    nib[0::2] = b & 0xF
    nib[1::2] = b >> 4
    nib = nib[:count]
    return np.where(nib > 7, nib - 16, nib).astype(np.int8)
