"""One-time padding, share encoding and server-side key stripping.

Device ``j`` pads its first-epoch gradient and Gram matrix with keys drawn
uniformly from Z<k>::

    psi_j = G_j ⊕ delta_j          phi_j = gram_j ⊕ xi_j

and device ``i`` encodes the padded shares of its code support with its row of
B. Each epoch it returns ``C_i ⊕ Cbar_i·eps``. The server removes the keys in
the same association order the device used::

    P_i = G~_i ⊖ (Σ_j b_ij·delta_j) ⊖ (Σ_j b_ij·xi_j)·eps

Multiplying a padded value by a non-integer public constant is only additive
modulo 2**k when the padded sum did not wrap. Aggregating the keys first keeps
all wraps confined to the key terms, so the stripped result differs from the
unpadded computation by floor discrepancies alone. Full-range keys still wrap
with probability about |value| / 2**k per entry. ``gen_key_registry`` can
exclude a guard band at the range ends to rule that out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .fixedpoint import (
    FixedSpec,
    FxMatrix,
    FxScalar,
    add_raw,
    fx_mat_add,
    fx_mat_sub,
    fx_matmul,
    mul_raw,
)
from .rng import stream

MAX_REKEY_ROUNDS = 64


@dataclass
class DeviceKeys:
    delta: FxMatrix
    xi: FxMatrix

    def __post_init__(self):
        if self.xi.rows != self.xi.cols or not np.array_equal(self.xi.raw, self.xi.raw.T):
            raise ValueError("xi must be a symmetric square matrix")


@dataclass
class PaddedShare:
    psi: FxMatrix
    phi: FxMatrix
    sends: int = field(default=0, compare=False)

    def transmit(self) -> PaddedShare:
        """Hand the share to the relay; a padded share goes out exactly once."""
        if self.sends:
            raise RuntimeError("padded share already transmitted; one-time pad reuse")
        self.sends += 1
        return self


@dataclass
class EncodedShare:
    c_mat: FxMatrix
    cbar_mat: FxMatrix


@dataclass
class GradientMsg:
    values: FxMatrix
    device: int
    epoch: int


@dataclass
class KeyAggregate:
    """Per-row key sums the server subtracts: Σ b·delta and Σ b·xi."""

    delta: FxMatrix
    xi: FxMatrix


def _uniform_raw(rng: np.random.Generator, spec: FixedSpec, size, guard: int = 0) -> np.ndarray:
    lo, hi = spec.lo + guard, spec.hi - guard
    if lo > hi:
        raise ValueError(f"guard {guard} leaves no key space in Z<{spec.k}>")
    return rng.integers(lo, hi, size=size, dtype=np.int64, endpoint=True)


def _symmetric_uniform(rng, d: int, spec: FixedSpec, guard: int = 0) -> np.ndarray:
    iu = np.triu_indices(d)
    out = np.zeros((d, d), dtype=np.int64)
    out[iu] = _uniform_raw(rng, spec, len(iu[0]), guard)
    out.T[iu] = out[iu]
    return out


def gen_keys(rng: np.random.Generator, d: int, c: int, spec: FixedSpec,
             delta_guard: int = 0, xi_guard: int = 0) -> DeviceKeys:
    """Uniform pad keys; guards (raw units) trim that much off both range ends."""
    if d < 1 or c < 1:
        raise DimensionError("d and c must be positive")
    delta = _uniform_raw(rng, spec, (d, c), delta_guard)
    xi = _symmetric_uniform(rng, d, spec, xi_guard)
    return DeviceKeys(FxMatrix(delta, spec, check=False), FxMatrix(xi, spec, check=False))


def _row_raw(b_row) -> list[int]:
    return [b.raw if isinstance(b, FxScalar) else int(b) for b in b_row]


def _aggregate_raw(b_raw: list[int], mats: list[np.ndarray], spec: FixedSpec) -> np.ndarray:
    acc = mul_raw(np.int64(b_raw[0]), mats[0], spec)
    for b, m in zip(b_raw[1:], mats[1:]):
        acc = add_raw(acc, mul_raw(np.int64(b), m, spec), spec)
    return acc


def _guard_raw(bound: float | None, spec: FixedSpec) -> int:
    return 0 if bound is None else int(np.ceil(bound * 2.0 ** spec.f)) + 1


def gen_key_registry(seed: int, code, d: int, c: int, spec: FixedSpec,
                     grad_bound: float | None = None,
                     gram_bound: float | None = None) -> list[DeviceKeys]:
    """Keys for every device, optionally with guard bands.

    ``grad_bound`` and ``gram_bound`` are public magnitude bounds on first-epoch
    gradient and Gram entries. When given, delta/xi avoid the outermost
    ``bound`` of the range, and xi entries are redrawn until every row's
    aggregate Σ b·xi keeps clear of the range ends by Σ|b|·gram_bound. That
    keeps every multiplication input in the pipeline from wrapping. Guarding
    costs a statistical distance of roughly 2·guard / 2**k per entry. With
    no bounds the keys are exactly uniform.
    """
    D = code.D
    delta_guard, xi_guard = _guard_raw(grad_bound, spec), _guard_raw(gram_bound, spec)
    keys = [gen_keys(stream(seed, "keys", j), d, c, spec, delta_guard, xi_guard) for j in range(D)]
    if gram_bound is None or code.alpha == 1:
        return keys
    rekey = [stream(seed, "rekey", j) for j in range(D)]
    rows = [(code.support(i), _row_raw(code.row_coefficients(i))) for i in range(D)]
    iu = np.triu_indices(d)
    for _ in range(MAX_REKEY_ROUNDS):
        bad = np.zeros((d, d), dtype=bool)
        for sup, b in rows:
            agg = _aggregate_raw(b, [keys[j].xi.raw for j in sup], spec)
            # b is already in raw units, so b_raw * bound is the raw product magnitude
            margin = sum(abs(x) for x in b) * gram_bound + len(b) + 1
            bad |= np.abs(agg.astype(np.float64)) > spec.hi - margin
        bad = bad[iu]
        if not bad.any():
            return keys
        pos = (iu[0][bad], iu[1][bad])
        for j in range(D):
            xi = keys[j].xi.raw.copy()
            xi[pos] = _uniform_raw(rekey[j], spec, len(pos[0]), xi_guard)
            xi.T[pos] = xi[pos]
            keys[j] = DeviceKeys(keys[j].delta, FxMatrix(xi, spec, check=False))
    raise RuntimeError(f"aggregate keys still in the guard band after {MAX_REKEY_ROUNDS} rounds")


def pad_share(gram: FxMatrix, grad1: FxMatrix, keys: DeviceKeys) -> PaddedShare:
    if gram.shape != keys.xi.shape or grad1.shape != keys.delta.shape:
        raise DimensionError(
            f"data shapes {gram.shape}/{grad1.shape} do not match keys "
            f"{keys.xi.shape}/{keys.delta.shape}"
        )
    return PaddedShare(psi=fx_mat_add(grad1, keys.delta), phi=fx_mat_add(gram, keys.xi))


def encode_shares(b_row, shares: list[PaddedShare]) -> EncodedShare:
    """Combine the padded shares of a code support with that row's coefficients."""
    b_row = list(b_row)
    if len(b_row) != len(shares) or not shares:
        raise DimensionError(f"{len(b_row)} coefficients for {len(shares)} shares")
    spec = shares[0].psi.spec
    b = _row_raw(b_row)
    c_raw = _aggregate_raw(b, [s.psi.raw for s in shares], spec)
    cbar_raw = _aggregate_raw(b, [s.phi.raw for s in shares], spec)
    return EncodedShare(FxMatrix(c_raw, spec, check=False), FxMatrix(cbar_raw, spec, check=False))


def coded_gradient(share: EncodedShare, eps: FxMatrix) -> FxMatrix:
    """Device-side epoch computation ``C ⊕ Cbar·eps``."""
    return fx_mat_add(share.c_mat, fx_matmul(share.cbar_mat, eps))


def aggregate_keys(b_row, keys_on_support: list[DeviceKeys]) -> KeyAggregate:
    b_row = list(b_row)
    if len(b_row) != len(keys_on_support) or not keys_on_support:
        raise DimensionError(f"{len(b_row)} coefficients for {len(keys_on_support)} key sets")
    spec = keys_on_support[0].delta.spec
    b = _row_raw(b_row)
    delta = _aggregate_raw(b, [k.delta.raw for k in keys_on_support], spec)
    xi = _aggregate_raw(b, [k.xi.raw for k in keys_on_support], spec)
    return KeyAggregate(FxMatrix(delta, spec, check=False), FxMatrix(xi, spec, check=False))


def strip_keys(gmsg: GradientMsg, b_row, keys_on_support: list[DeviceKeys] | None,
               eps: FxMatrix, agg: KeyAggregate | None = None) -> GradientMsg:
    """Remove the pad from a coded gradient, leaving Σ_j b_ij·G_j up to floor error.

    Pass a precomputed ``agg`` to skip re-aggregating the keys every epoch.
    """
    if agg is None:
        agg = aggregate_keys(b_row, keys_on_support)
    if gmsg.values.shape != agg.delta.shape or agg.xi.cols != eps.rows:
        raise DimensionError(
            f"message {gmsg.values.shape}, keys {agg.delta.shape}/{agg.xi.shape}, eps {eps.shape}"
        )
    key_term = fx_mat_add(agg.delta, fx_matmul(agg.xi, eps))
    return GradientMsg(fx_mat_sub(gmsg.values, key_term), gmsg.device, gmsg.epoch)

