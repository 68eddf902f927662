"""Cyclic (alpha, D) gradient codes.

Row ``i`` of the D x D encoding matrix B is supported on the cyclic window
``{i, i+1, ..., i+alpha-1} mod D`` (0-based here). Every row lies in the null
space of a random (alpha-1) x D matrix H whose columns sum to zero, so the
all-ones vector is in that (D-alpha+1)-dimensional null space and any
D-alpha+1 rows span it with probability one. That is what lets the server
rebuild the plain sum of all partial gradients from any D-alpha+1 encodings.

Decoding vectors are solved on demand per received set and memoised; the full
decoding matrix is never formed.
"""

from __future__ import annotations

import itertools
import json
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionError,
    InsufficientDevicesError,
    ResidualToleranceError,
    SingularSystemError,
)
from .fixedpoint import FixedSpec, FxMatrix, FxScalar
from .rng import stream

MAX_RESAMPLES = 16
DEFAULT_TOL = 1e-3
REAL_TOL = 1e-9
_COND_LIMIT = 1e12


def cyclic_support(i: int, alpha: int, D: int) -> list[int]:
    return [(i + t) % D for t in range(alpha)]


@dataclass(frozen=True)
class CyclicLayout:
    """Support pattern of a cyclic code without coefficients (enough for timing)."""

    D: int
    alpha: int

    @property
    def wait_count(self) -> int:
        return self.D - self.alpha + 1

    def support(self, i: int) -> list[int]:
        return cyclic_support(i, self.alpha, self.D)


@dataclass(frozen=True)
class DecodeVector:
    coefficients: np.ndarray
    received: tuple[int, ...]
    residual: float


@dataclass
class GradientCode:
    D: int
    alpha: int
    B_real: np.ndarray
    B_fx: FxMatrix
    seed: int | None = None
    tol: float = DEFAULT_TOL
    _memo: dict = field(default_factory=dict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def spec(self) -> FixedSpec:
        return self.B_fx.spec

    @property
    def wait_count(self) -> int:
        return self.D - self.alpha + 1

    @property
    def supports(self) -> list[list[int]]:
        return [cyclic_support(i, self.alpha, self.D) for i in range(self.D)]

    def support(self, i: int) -> list[int]:
        return cyclic_support(i, self.alpha, self.D)

    def holders(self, j: int) -> list[int]:
        """Devices whose encoding uses device ``j``'s data (j itself first)."""
        return [(j - t) % self.D for t in range(self.alpha)]

    def row_coefficients(self, i: int) -> list[FxScalar]:
        """Fixed-point coefficients of row ``i`` in support order."""
        return [self.B_fx[i, j] for j in self.support(i)]

    def decoded_B(self) -> np.ndarray:
        return self.B_fx.to_real()

    def to_json(self) -> str:
        spec = self.spec
        return json.dumps(
            {
                "D": self.D,
                "alpha": self.alpha,
                "seed": self.seed,
                "k": spec.k,
                "f": spec.f,
                "tol": self.tol,
                "B_real": self.B_real.tolist(),
                "B_fx_raw": self.B_fx.raw.tolist(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> GradientCode:
        doc = json.loads(text)
        spec = FixedSpec(doc["k"], doc["f"])
        return cls(
            D=doc["D"],
            alpha=doc["alpha"],
            B_real=np.array(doc["B_real"], dtype=np.float64),
            B_fx=FxMatrix(np.array(doc["B_fx_raw"], dtype=np.int64), spec),
            seed=doc["seed"],
            tol=doc["tol"],
        )


def _draw_h(rng: np.random.Generator, alpha: int, D: int) -> np.ndarray:
    h = np.empty((alpha - 1, D))
    h[:, : D - 1] = rng.standard_normal((alpha - 1, D - 1))
    h[:, D - 1] = -h[:, : D - 1].sum(axis=1)
    return h


def code_from_h(h: np.ndarray, alpha: int) -> np.ndarray:
    """Encoding matrix whose rows are cyclic, have a unit diagonal, and satisfy H b^T = 0."""
    D = h.shape[1]
    B = np.zeros((D, D))
    for i in range(D):
        sup = cyclic_support(i, alpha, D)
        rest = sup[1:]
        M = h[:, rest]
        if np.linalg.cond(M) > _COND_LIMIT:
            raise SingularSystemError(f"local system for row {i} is singular")
        B[i, i] = 1.0
        B[i, rest] = np.linalg.solve(M, -h[:, i])
    return B


def _code_quality(B: np.ndarray, spec: FixedSpec, alpha: int) -> tuple[float, float]:
    """Worst real and quantised decode residuals over (possibly sampled) received sets."""
    D = B.shape[0]
    Bq = FxMatrix.from_real(B, spec).to_real()
    _, sets = received_sets(D, alpha, np.random.default_rng(0), samples=2_000)
    worst_r = worst_q = 0.0
    for s in sets:
        worst_r = max(worst_r, solve_decode(B, s)[1])
        worst_q = max(worst_q, solve_decode(Bq, s)[1])
    return worst_r, worst_q


def build_code(D: int, alpha: int, rng: np.random.Generator | int,
               spec: FixedSpec = FixedSpec(), tol: float = DEFAULT_TOL,
               validate: bool = True) -> GradientCode:
    """Draw a cyclic code.

    With ``validate`` a draw is rejected (and H resampled, at most
    ``MAX_RESAMPLES`` times) when some received set decodes with real residual
    above ``REAL_TOL`` or quantised residual above ``tol``; the best draw seen is
    kept if none passes.
    """
    if not (1 <= alpha <= D):
        raise ValueError(f"need 1 <= alpha <= D, got alpha={alpha}, D={D}")
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = stream(seed, "gradcode", D, alpha)
    if alpha == 1:
        B = np.eye(D)
    elif alpha == D:
        B = np.ones((D, D))
    else:
        best, best_score = None, math.inf
        for _ in range(MAX_RESAMPLES):
            try:
                cand = code_from_h(_draw_h(rng, alpha, D), alpha)
            except SingularSystemError:
                continue
            if not validate:
                best = cand
                break
            res_r, res_q = _code_quality(cand, spec, alpha)
            score = max(res_r / REAL_TOL, res_q / tol)
            if score < best_score:
                best, best_score = cand, score
            if score <= 1.0:
                break
        if best is None:
            raise SingularSystemError(f"no non-singular H after {MAX_RESAMPLES} draws")
        B = best
    return GradientCode(D=D, alpha=alpha, B_real=B, B_fx=FxMatrix.from_real(B, spec),
                        seed=seed, tol=tol)


def solve_decode(B: np.ndarray, received) -> tuple[np.ndarray, float]:
    """Least-squares ``a`` with ``a @ B[received] ~ 1``; returns (a, max-norm residual)."""
    rows = B[list(received)]
    a, *_ = np.linalg.lstsq(rows.T, np.ones(B.shape[1]), rcond=None)
    residual = float(np.max(np.abs(a @ rows - 1.0)))
    return a, residual


def decode_vector(code: GradientCode, received, *, real: bool = False,
                  tol: float | None = None) -> DecodeVector:
    """Decoding coefficients for a set of responding devices (0-based).

    Uses the lowest-indexed D-alpha+1 responders. ``real=True`` decodes against
    the unquantised B instead of the fixed-point one.
    """
    received = [int(r) for r in received]
    if len(set(received)) != len(received) or any(not 0 <= r < code.D for r in received):
        raise DimensionError(f"received indices must be distinct and in [0, {code.D})")
    received.sort()
    need = code.wait_count
    if len(received) < need:
        raise InsufficientDevicesError(f"need {need} responders, got {len(received)}")
    used = tuple(received[:need])
    key = (used, real)
    dv = code._memo.get(key)
    if dv is None:
        B = code.B_real if real else code.decoded_B()
        a, res = solve_decode(B, used)
        dv = DecodeVector(coefficients=a, received=used, residual=res)
        with code._lock:
            code._memo.setdefault(key, dv)
    limit = code.tol if tol is None else tol
    if dv.residual > limit:
        raise ResidualToleranceError(f"residual {dv.residual:.3e} > {limit:.1e} for {used}")
    return dv


@dataclass
class VerifyReport:
    D: int
    alpha: int
    tol: float
    exhaustive: bool
    tested: int
    max_residual: float
    failures: list[tuple[int, ...]]

    @property
    def ok(self) -> bool:
        return not self.failures


def received_sets(D: int, alpha: int, rng: np.random.Generator | None = None,
                  exhaustive_limit: int = 100_000, samples: int = 10_000):
    """Yield received sets of size D-alpha+1: all of them if few enough, else a sample."""
    size = D - alpha + 1
    total = math.comb(D, size)
    if total <= exhaustive_limit:
        return True, itertools.combinations(range(D), size)
    rng = rng if rng is not None else np.random.default_rng(0)
    sets = (tuple(sorted(rng.choice(D, size=size, replace=False).tolist())) for _ in range(samples))
    return False, sets


def verify_code(code: GradientCode, tol: float, *, real: bool = False,
                exhaustive: bool | None = None, samples: int = 10_000,
                rng: np.random.Generator | None = None) -> VerifyReport:
    if tol <= 0:
        raise ValueError("tol must be positive")
    limit = 100_000
    if exhaustive is True:
        limit = math.inf
    elif exhaustive is False:
        limit = -1
    is_exh, sets = received_sets(code.D, code.alpha, rng, limit, samples)
    B = code.B_real if real else code.decoded_B()
    worst = 0.0
    failures = []
    n = 0
    for s in sets:
        _, res = solve_decode(B, s)
        n += 1
        worst = max(worst, res)
        if not res <= tol:
            failures.append(tuple(s))
    return VerifyReport(code.D, code.alpha, tol, is_exh, n, worst, failures)
