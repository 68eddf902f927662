"""Signed Q(k, f) fixed-point arithmetic with modular wraparound.

A value with raw integer ``r`` in ``[-2**(k-1), 2**(k-1) - 1]`` represents
``r * 2**-f``. Addition is integer addition reduced modulo ``2**k`` back into
that interval, so the raws form the cyclic group used for one-time padding.
Multiplication takes the exact double-width product, floors it after dropping
``f`` fractional bits (toward minus infinity), and wraps.

Matrices hold their raws in ``int64`` numpy arrays. For ``f <= 31`` products are
evaluated without any big-integer arithmetic by splitting each raw into a high
part and an ``f``-bit low part::

    floor(a*b / 2**f) = ah*bh*2**f + ah*bl + al*bh + floor(al*bl / 2**f)

Only the last term is not bilinear; everything else is computed modulo
``2**64``, which is exact modulo ``2**k`` because ``k <= 63``.
"""

from __future__ import annotations

import contextlib
import contextvars
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DimensionError, FormatError, SpecMismatchError

MAX_K = 63
_FAST_MAX_F = 31
# bound on elements of the temporary (rows, inner, cols) block in matmul
_BLOCK_ELEMS = 1 << 21


@dataclass(frozen=True)
class FixedSpec:
    k: int = 48
    f: int = 24

    def __post_init__(self):
        if not (1 <= self.f < self.k <= MAX_K):
            raise ValueError(f"need 1 <= f < k <= {MAX_K}, got k={self.k}, f={self.f}")

    @property
    def lo(self) -> int:
        return -(1 << (self.k - 1))

    @property
    def hi(self) -> int:
        return (1 << (self.k - 1)) - 1

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.f

    @property
    def max_value(self) -> float:
        return self.hi * self.ulp


class OverflowCounter:
    """Counts arithmetic results that left the representable range."""

    def __init__(self):
        self.count = 0

    def add(self, n: int):
        self.count += int(n)


_counter: contextvars.ContextVar[OverflowCounter | None] = contextvars.ContextVar(
    "fx_overflow_counter", default=None
)


@contextlib.contextmanager
def track_overflows() -> Iterator[OverflowCounter]:
    """Count silent wraparounds inside the block.

    Padding wraps on purpose, so only wrap it in this when the operands are
    plaintext. Multiplication overflow is detected from a float64 estimate and
    can miss results within a few ulps of the boundary.
    """
    counter = OverflowCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


# ---------------------------------------------------------------- raw kernels


def wrap_raw(x, spec: FixedSpec) -> np.ndarray:
    """Reduce integers (any int64/uint64 bit pattern) modulo 2**k into range."""
    u = np.asarray(x)
    if u.dtype != np.uint64:
        u = u.astype(np.int64).view(np.uint64)
    # sign-extend bit k-1 by shifting it up to bit 63 and back
    sh = np.uint64(64 - spec.k)
    return (u << sh).view(np.int64) >> np.int64(64 - spec.k)


def _wrap_int(x: int, spec: FixedSpec) -> int:
    half = 1 << (spec.k - 1)
    return (x + half) % (1 << spec.k) - half


def _split(a: np.ndarray, f: int) -> tuple[np.ndarray, np.ndarray]:
    hi = (a >> f).view(np.uint64)
    lo = (a & np.int64((1 << f) - 1)).view(np.uint64)
    return hi, lo


def _as_raw(a) -> np.ndarray:
    return np.asarray(a, dtype=np.int64)


def add_raw(a, b, spec: FixedSpec) -> np.ndarray:
    a, b = _as_raw(a), _as_raw(b)
    with np.errstate(over="ignore"):
        s = a + b  # |a|, |b| < 2**62 so no int64 overflow
    counter = _counter.get()
    if counter is not None:
        counter.add(np.count_nonzero((s < spec.lo) | (s > spec.hi)))
    return wrap_raw(s, spec)


def sub_raw(a, b, spec: FixedSpec) -> np.ndarray:
    a, b = _as_raw(a), _as_raw(b)
    with np.errstate(over="ignore"):
        s = a - b
    counter = _counter.get()
    if counter is not None:
        counter.add(np.count_nonzero((s < spec.lo) | (s > spec.hi)))
    return wrap_raw(s, spec)


def _count_mul_overflow(a, b, spec: FixedSpec):
    counter = _counter.get()
    if counter is not None:
        est = a.astype(np.float64) * b.astype(np.float64) * spec.ulp
        counter.add(np.count_nonzero((est < spec.lo) | (est > spec.hi)))


def mul_raw(a, b, spec: FixedSpec) -> np.ndarray:
    """Element-wise (broadcasting) fixed-point product of raw arrays."""
    a, b = _as_raw(a), _as_raw(b)
    _count_mul_overflow(a, b, spec)
    f = spec.f
    if f > _FAST_MAX_F:
        a, b = np.broadcast_arrays(a, b)
        out = np.empty(a.shape, dtype=np.int64)
        for idx in np.ndindex(a.shape):
            out[idx] = _wrap_int((int(a[idx]) * int(b[idx])) >> f, spec)
        return out
    ah, al = _split(a, f)
    bh, bl = _split(b, f)
    sh = np.uint64(f)
    with np.errstate(over="ignore"):
        t = ((ah * bh) << sh) + ah * bl + al * bh + ((al * bl) >> sh)
    return wrap_raw(t, spec)


def matmul_raw(a, b, spec: FixedSpec) -> np.ndarray:
    """Fixed-point matrix product: per-entry floored products, modular sums."""
    a, b = _as_raw(a), _as_raw(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    n, p = a.shape
    q = b.shape[1]
    f = spec.f
    counter = _counter.get()
    if counter is not None:
        prods = a.astype(np.float64)[:, :, None] * b.astype(np.float64)[None, :, :] * spec.ulp
        bad = (prods < spec.lo) | (prods > spec.hi)
        acc = prods.sum(axis=1)
        counter.add(np.count_nonzero(bad) + np.count_nonzero((acc < spec.lo) | (acc > spec.hi)))
    if f > _FAST_MAX_F:
        out = np.empty((n, q), dtype=np.int64)
        for i in range(n):
            for j in range(q):
                acc = sum((int(a[i, t]) * int(b[t, j])) >> f for t in range(p))
                out[i, j] = _wrap_int(acc, spec)
        return out
    ah, al = _split(a, f)
    bh, bl = _split(b, f)
    sh = np.uint64(f)
    with np.errstate(over="ignore"):
        t = ((ah @ bh) << sh) + ah @ bl + al @ bh
        rows = max(1, _BLOCK_ELEMS // max(1, p * q))
        low = np.empty((n, q), dtype=np.uint64)
        for r0 in range(0, n, rows):
            blk = (al[r0:r0 + rows, :, None] * bl[None, :, :]) >> sh
            low[r0:r0 + rows] = blk.sum(axis=1, dtype=np.uint64)
        t = t + low
    return wrap_raw(t, spec)


def encode_raw(x, spec: FixedSpec) -> np.ndarray:
    """Round ``x * 2**f`` to nearest (ties away from zero) and range-check."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise OverflowError("cannot encode non-finite values")
    y = np.abs(x) * (2.0 ** spec.f)
    r = np.floor(y)
    r = r + (y - r >= 0.5)
    r = np.copysign(r, x)
    bad = (r < spec.lo) | (r > spec.hi)
    if np.any(bad):
        worst = float(np.max(np.abs(x[bad])))
        raise OverflowError(
            f"{int(np.count_nonzero(bad))} value(s) outside Q({spec.k},{spec.f}) range "
            f"[{spec.lo * spec.ulp}, {spec.max_value}]; largest magnitude {worst}"
        )
    return r.astype(np.int64)


def decode_raw(raw, spec: FixedSpec) -> np.ndarray:
    return np.asarray(raw, dtype=np.int64).astype(np.float64) * spec.ulp


# ------------------------------------------------------------------- scalars


@dataclass(frozen=True)
class FxScalar:
    raw: int
    spec: FixedSpec

    def __post_init__(self):
        object.__setattr__(self, "raw", int(self.raw))
        if not (self.spec.lo <= self.raw <= self.spec.hi):
            raise ValueError(f"raw {self.raw} outside Z<{self.spec.k}>")

    @property
    def value(self) -> float:
        return fx_decode(self)

    def __add__(self, other: FxScalar) -> FxScalar:
        return fx_add(self, other)

    def __sub__(self, other: FxScalar) -> FxScalar:
        return fx_sub(self, other)

    def __mul__(self, other: FxScalar) -> FxScalar:
        return fx_mul(self, other)

    def __neg__(self) -> FxScalar:
        return FxScalar(_wrap_int(-self.raw, self.spec), self.spec)


def _same_spec(a, b) -> FixedSpec:
    if a.spec != b.spec:
        raise SpecMismatchError(f"{a.spec} != {b.spec}")
    return a.spec


def fx_encode(x: float, spec: FixedSpec) -> FxScalar:
    return FxScalar(int(encode_raw(x, spec)), spec)


def fx_decode(a: FxScalar) -> float:
    return a.raw * a.spec.ulp


def fx_add(a: FxScalar, b: FxScalar) -> FxScalar:
    spec = _same_spec(a, b)
    return FxScalar(int(add_raw(a.raw, b.raw, spec)), spec)


def fx_sub(a: FxScalar, b: FxScalar) -> FxScalar:
    spec = _same_spec(a, b)
    return FxScalar(int(sub_raw(a.raw, b.raw, spec)), spec)


def fx_mul(a: FxScalar, b: FxScalar) -> FxScalar:
    spec = _same_spec(a, b)
    counter = _counter.get()
    full = (a.raw * b.raw) >> spec.f
    if counter is not None and not (spec.lo <= full <= spec.hi):
        counter.add(1)
    return FxScalar(_wrap_int(full, spec), spec)


def fx_uniform(rng: np.random.Generator, spec: FixedSpec, size=None):
    """Uniform draw(s) over the whole of Z<k>; a scalar when ``size`` is None."""
    raw = rng.integers(spec.lo, spec.hi, size=size, dtype=np.int64, endpoint=True)
    if size is None:
        return FxScalar(int(raw), spec)
    return raw


# ------------------------------------------------------------------ matrices

_MAGIC = b"FXM1"
_HEADER = struct.Struct("<4sBBxxII")


class FxMatrix:
    """A 2-D block of Q(k, f) values stored as int64 raws."""

    __slots__ = ("raw", "spec")

    def __init__(self, raw, spec: FixedSpec, *, check: bool = True):
        raw = np.asarray(raw)
        if raw.ndim != 2:
            raise DimensionError(f"FxMatrix needs a 2-D buffer, got shape {raw.shape}")
        raw = np.ascontiguousarray(raw, dtype=np.int64)
        if check and raw.size and (raw.min() < spec.lo or raw.max() > spec.hi):
            raise ValueError(f"raw entries outside Z<{spec.k}>")
        self.raw = raw
        self.spec = spec

    @classmethod
    def from_real(cls, values, spec: FixedSpec) -> FxMatrix:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        return cls(encode_raw(values, spec), spec, check=False)

    @classmethod
    def zeros(cls, rows: int, cols: int, spec: FixedSpec) -> FxMatrix:
        return cls(np.zeros((rows, cols), dtype=np.int64), spec, check=False)

    @classmethod
    def identity(cls, n: int, spec: FixedSpec) -> FxMatrix:
        return cls(np.eye(n, dtype=np.int64) << spec.f, spec, check=False)

    @property
    def rows(self) -> int:
        return self.raw.shape[0]

    @property
    def cols(self) -> int:
        return self.raw.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.raw.shape

    @property
    def T(self) -> FxMatrix:
        return FxMatrix(self.raw.T, self.spec, check=False)

    def to_real(self) -> np.ndarray:
        return decode_raw(self.raw, self.spec)

    def __getitem__(self, idx) -> FxScalar:
        i, j = idx
        return FxScalar(int(self.raw[i, j]), self.spec)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FxMatrix):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.raw, other.raw)

    __hash__ = None

    def __add__(self, other: FxMatrix) -> FxMatrix:
        return fx_mat_add(self, other)

    def __sub__(self, other: FxMatrix) -> FxMatrix:
        return fx_mat_sub(self, other)

    def __matmul__(self, other: FxMatrix) -> FxMatrix:
        return fx_matmul(self, other)

    def __repr__(self) -> str:
        return f"FxMatrix({self.rows}x{self.cols}, Q({self.spec.k},{self.spec.f}))"

    def to_bytes(self) -> bytes:
        """Header plus little-endian two's-complement raws in 64-bit words."""
        head = _HEADER.pack(_MAGIC, self.spec.k, self.spec.f, self.rows, self.cols)
        return head + self.raw.astype("<i8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> FxMatrix:
        if len(buf) < _HEADER.size:
            raise FormatError("truncated FxMatrix header", 0)
        magic, k, f, rows, cols = _HEADER.unpack_from(buf, 0)
        if magic != _MAGIC:
            raise FormatError(f"bad magic {magic!r}", 0)
        need = _HEADER.size + 8 * rows * cols
        if len(buf) != need:
            raise FormatError(f"expected {need} bytes, got {len(buf)}", min(len(buf), need))
        raw = np.frombuffer(buf, dtype="<i8", offset=_HEADER.size).reshape(rows, cols)
        return cls(raw.astype(np.int64), FixedSpec(k, f))


def _check_same_shape(a: FxMatrix, b: FxMatrix):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")


def fx_mat_add(a: FxMatrix, b: FxMatrix) -> FxMatrix:
    spec = _same_spec(a, b)
    _check_same_shape(a, b)
    return FxMatrix(add_raw(a.raw, b.raw, spec), spec, check=False)


def fx_mat_sub(a: FxMatrix, b: FxMatrix) -> FxMatrix:
    spec = _same_spec(a, b)
    _check_same_shape(a, b)
    return FxMatrix(sub_raw(a.raw, b.raw, spec), spec, check=False)


def fx_scalar_matmul(c: FxScalar, m: FxMatrix) -> FxMatrix:
    spec = _same_spec(c, m)
    return FxMatrix(mul_raw(np.int64(c.raw), m.raw, spec), spec, check=False)


def fx_matmul(a: FxMatrix, b: FxMatrix) -> FxMatrix:
    spec = _same_spec(a, b)
    return FxMatrix(matmul_raw(a.raw, b.raw, spec), spec, check=False)


def fx_mat_sum(mats, spec: FixedSpec) -> FxMatrix:
    """Modular sum of equally shaped matrices (order-independent)."""
    mats = list(mats)
    if not mats:
        raise DimensionError("empty sum")
    out = mats[0].raw
    for m in mats[1:]:
        if m.spec != spec:
            raise SpecMismatchError(f"{m.spec} != {spec}")
        _check_same_shape(mats[0], m)
        out = add_raw(out, m.raw, spec)
    return FxMatrix(out, spec, check=False)
