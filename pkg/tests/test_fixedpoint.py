from fractions import Fraction
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codedfl.errors import DimensionError, SpecMismatchError
from codedfl.fixedpoint import (
    FixedSpec,
    FxMatrix,
    FxScalar,
    add_raw,
    decode_raw,
    encode_raw,
    fx_add,
    fx_decode,
    fx_encode,
    fx_mat_sum,
    fx_matmul,
    fx_mul,
    fx_scalar_matmul,
    fx_sub,
    fx_uniform,
    matmul_raw,
    mul_raw,
    track_overflows,
    wrap_raw,
)

SPEC = FixedSpec()


def wrap_oracle(x: int, spec: FixedSpec) -> int:
    m = 1 << spec.k
    x %= m
    return x - m if x > spec.hi else x


def mul_oracle(a: int, b: int, spec: FixedSpec) -> int:
    # floor of the exact rational product, then reduce
    return wrap_oracle(math.floor(Fraction(a * b, 1 << spec.f)), spec)


def raw_ints(spec=SPEC):
    return st.integers(spec.lo, spec.hi)


def test_spec_validation():
    assert FixedSpec(48, 24).ulp == 2.0 ** -24
    assert FixedSpec(8, 4).lo == -128 and FixedSpec(8, 4).hi == 127
    for k, f in [(8, 8), (64, 24), (8, 0)]:
        with pytest.raises(ValueError):
            FixedSpec(k, f)


def test_encode_rounds_half_away_from_zero():
    spec = FixedSpec(16, 2)
    assert encode_raw([0.125, -0.125, 0.124, 0.375], spec).tolist() == [1, -1, 0, 2]


def test_encode_range_error_names_the_value():
    with pytest.raises(OverflowError, match="largest magnitude 1e\\+20"):
        encode_raw([1.0, 1e20], SPEC)
    with pytest.raises(OverflowError):
        encode_raw([np.nan], SPEC)


def test_encode_decode_error_at_most_half_ulp():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1e6, 1e6, 1000)
    err = np.abs(decode_raw(encode_raw(x, SPEC), SPEC) - x)
    assert err.max() <= SPEC.ulp / 2


@given(raw_ints(), raw_ints())
def test_add_sub_wrap_like_integers_mod_2k(a, b):
    assert int(add_raw(a, b, SPEC)) == wrap_oracle(a + b, SPEC)
    assert fx_sub(FxScalar(a, SPEC), FxScalar(b, SPEC)).raw == wrap_oracle(a - b, SPEC)


@given(raw_ints(), raw_ints())
def test_scalar_and_vector_mul_match_rational_floor(a, b):
    want = mul_oracle(a, b, SPEC)
    assert fx_mul(FxScalar(a, SPEC), FxScalar(b, SPEC)).raw == want
    assert int(mul_raw(np.int64(a), np.int64(b), SPEC)) == want


def test_mul_floors_toward_minus_infinity():
    spec = FixedSpec(16, 4)
    # -1/16 * 1/16 = -1/256 floors to -1/16
    assert int(mul_raw(-1, 1, spec)) == -1
    assert int(mul_raw(1, 1, spec)) == 0


@pytest.mark.parametrize("k,f", [(8, 4), (32, 16), (48, 24), (63, 31), (63, 40)])
def test_matmul_matches_python_int_oracle(k, f):
    spec = FixedSpec(k, f)
    rng = np.random.default_rng(k * 100 + f)
    a = rng.integers(spec.lo, spec.hi, (5, 7), endpoint=True)
    b = rng.integers(spec.lo, spec.hi, (7, 3), endpoint=True)
    got = matmul_raw(a, b, spec)
    for i in range(5):
        for j in range(3):
            acc = sum((int(a[i, t]) * int(b[t, j])) >> f for t in range(7))
            assert int(got[i, j]) == wrap_oracle(acc, spec)


def test_matmul_block_path_matches_small_path(monkeypatch):
    import codedfl.fixedpoint as fp

    rng = np.random.default_rng(3)
    a = rng.integers(SPEC.lo, SPEC.hi, (40, 30), endpoint=True)
    b = rng.integers(SPEC.lo, SPEC.hi, (30, 20), endpoint=True)
    full = matmul_raw(a, b, SPEC)
    monkeypatch.setattr(fp, "_BLOCK_ELEMS", 600)
    assert np.array_equal(matmul_raw(a, b, SPEC), full)


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        matmul_raw(np.zeros((2, 3)), np.zeros((2, 3)), SPEC)


def test_wrap_is_identity_in_range_and_periodic():
    x = np.array([SPEC.lo, -1, 0, 1, SPEC.hi], dtype=np.int64)
    assert np.array_equal(wrap_raw(x, SPEC), x)
    assert np.array_equal(wrap_raw(x + (1 << SPEC.k), SPEC), x)


def test_mixed_specs_rejected():
    with pytest.raises(SpecMismatchError):
        fx_add(FxScalar(1, SPEC), FxScalar(1, FixedSpec(32, 16)))
    with pytest.raises(SpecMismatchError):
        FxMatrix.zeros(2, 2, SPEC) + FxMatrix.zeros(2, 2, FixedSpec(32, 16))


def test_scalar_value_round_trip():
    a = fx_encode(-3.25, SPEC)
    assert fx_decode(a) == -3.25 and a.value == -3.25
    assert (-a).value == 3.25


def test_matrix_ops_and_identity():
    rng = np.random.default_rng(0)
    A = FxMatrix.from_real(rng.normal(size=(4, 4)), SPEC)
    I = FxMatrix.identity(4, SPEC)
    assert A @ I == A
    assert (A + A) - A == A
    assert A.T.T == A
    assert isinstance(A[1, 2], FxScalar)
    two = fx_encode(2.0, SPEC)
    assert fx_scalar_matmul(two, A) == A + A
    assert fx_mat_sum([A, A, A], SPEC) == A + A + A


def test_matrix_product_close_to_real():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(6, 9))
    b = rng.normal(size=(9, 4))
    A, B = FxMatrix.from_real(a, SPEC), FxMatrix.from_real(b, SPEC)
    # each product floors (1 ulp) on top of the encoding error of the inputs
    bound = 9 * (SPEC.ulp + SPEC.ulp / 2 * (np.abs(a).max() + np.abs(b).max()) + SPEC.ulp ** 2)
    assert np.abs(fx_matmul(A, B).to_real() - a @ b).max() <= bound


def test_bytes_round_trip_and_corruption():
    rng = np.random.default_rng(4)
    A = FxMatrix(rng.integers(SPEC.lo, SPEC.hi, (3, 5), endpoint=True), SPEC)
    buf = A.to_bytes()
    assert FxMatrix.from_bytes(buf) == A
    with pytest.raises(ValueError):
        FxMatrix.from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(ValueError):
        FxMatrix.from_bytes(buf[:-1])


def test_matrix_rejects_out_of_range_raw():
    with pytest.raises(ValueError):
        FxMatrix(np.array([[SPEC.hi + 1]]), SPEC)


def test_uniform_covers_range():
    rng = np.random.default_rng(5)
    spec = FixedSpec(8, 4)
    draws = fx_uniform(rng, spec, 20000)
    assert draws.min() == spec.lo and draws.max() == spec.hi
    assert isinstance(fx_uniform(rng, spec), FxScalar)


def test_overflow_tracking_counts_wraps_only_inside_block():
    spec = FixedSpec(16, 4)
    with track_overflows() as ov:
        add_raw(spec.hi, 1, spec)
        mul_raw(spec.hi, spec.hi, spec)
        add_raw(1, 1, spec)
    assert ov.count == 2
    add_raw(spec.hi, 1, spec)
    assert ov.count == 2


@settings(max_examples=50)
@given(st.integers(2, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32))
def test_matmul_distributes_over_addition_exactly_when_floors_agree(n, p, q, seed):
    # (a+b)@c and a@c + b@c differ by at most p ulps per entry (one floor per term)
    rng = np.random.default_rng(seed)
    a, b = (rng.integers(-2**30, 2**30, (n, p)) for _ in range(2))
    c = rng.integers(-2**30, 2**30, (p, q))
    lhs = matmul_raw(add_raw(a, b, SPEC), c, SPEC)
    rhs = add_raw(matmul_raw(a, c, SPEC), matmul_raw(b, c, SPEC), SPEC)
    diff = wrap_raw(lhs - rhs, SPEC)
    assert np.abs(diff).max() <= p
