import numpy as np
import pytest
from scipy import stats

from codedfl.errors import DimensionError
from codedfl.fixedpoint import FixedSpec, FxMatrix, add_raw, fx_mat_add, fx_matmul, fx_scalar_matmul
from codedfl.gradcode import build_code
from codedfl.privacy import (
    DeviceKeys,
    GradientMsg,
    PaddedShare,
    aggregate_keys,
    coded_gradient,
    encode_shares,
    gen_key_registry,
    gen_keys,
    pad_share,
    strip_keys,
)

SPEC = FixedSpec()


def _setup(D=3, alpha=2, d=6, c=2, seed=0):
    rng = np.random.default_rng(seed)
    code = build_code(D, alpha, seed)
    X = [rng.normal(size=(12, d)) * 0.3 for _ in range(D)]
    Y = [rng.normal(size=(12, c)) * 0.3 for _ in range(D)]
    gram = [FxMatrix.from_real(x.T @ x, SPEC) for x in X]
    xty = [FxMatrix.from_real(x.T @ y, SPEC) for x, y in zip(X, Y)]
    return rng, code, gram, xty


def test_keys_shapes_and_symmetry():
    k = gen_keys(np.random.default_rng(0), 5, 3, SPEC)
    assert k.delta.shape == (5, 3) and k.xi.shape == (5, 5)
    assert np.array_equal(k.xi.raw, k.xi.raw.T)
    with pytest.raises(ValueError):
        DeviceKeys(k.delta, FxMatrix(np.arange(4).reshape(2, 2), SPEC))
    with pytest.raises(DimensionError):
        gen_keys(np.random.default_rng(0), 0, 3, SPEC)


def test_guard_band_keeps_keys_away_from_range_ends():
    spec = FixedSpec(16, 4)
    k = gen_keys(np.random.default_rng(0), 30, 30, spec, delta_guard=1000, xi_guard=2000)
    assert k.delta.raw.min() >= spec.lo + 1000 and k.delta.raw.max() <= spec.hi - 1000
    assert k.xi.raw.min() >= spec.lo + 2000 and k.xi.raw.max() <= spec.hi - 2000
    with pytest.raises(ValueError):
        gen_keys(np.random.default_rng(0), 2, 2, spec, delta_guard=1 << 15)


def test_padded_share_goes_out_once():
    share = PaddedShare(FxMatrix.zeros(2, 1, SPEC), FxMatrix.zeros(2, 2, SPEC))
    assert share.transmit() is share
    with pytest.raises(RuntimeError, match="one-time pad"):
        share.transmit()


def test_zero_keys_strip_is_exact():
    _, code, gram, xty = _setup()
    theta1 = FxMatrix.zeros(6, 2, SPEC)
    grad1 = [fx_mat_add(fx_matmul(g, theta1), FxMatrix(-x.raw, SPEC)) for g, x in zip(gram, xty)]
    zero = DeviceKeys(FxMatrix.zeros(6, 2, SPEC), FxMatrix.zeros(6, 6, SPEC))
    eps = FxMatrix.from_real(np.random.default_rng(9).normal(size=(6, 2)), SPEC)
    for i in range(code.D):
        sup = code.support(i)
        b = code.row_coefficients(i)
        shares = [pad_share(gram[j], grad1[j], zero) for j in sup]
        enc = encode_shares(b, shares)
        # unpadded encoding: Σ b_ij G_j and Σ b_ij gram_j computed the same way
        c_plain = FxMatrix.zeros(6, 2, SPEC)
        for bj, j in zip(b, sup):
            c_plain = c_plain + fx_scalar_matmul(bj, grad1[j])
        assert enc.c_mat == c_plain
        g = coded_gradient(enc, eps)
        out = strip_keys(GradientMsg(g, i, 1), b, [zero] * len(sup), eps)
        assert out.values == g


def test_strip_recovers_unpadded_coded_gradient():
    _, code, gram, xty = _setup(seed=3)
    rng = np.random.default_rng(4)
    d, c = 6, 2
    theta1 = FxMatrix.from_real(rng.normal(size=(d, c)) * 0.1, SPEC)
    grad1 = [fx_mat_add(fx_matmul(g, theta1), FxMatrix(-x.raw, SPEC)) for g, x in zip(gram, xty)]
    keys = [gen_keys(rng, d, c, SPEC) for _ in range(code.D)]
    eps = FxMatrix.from_real(rng.normal(size=(d, c)), SPEC)
    for i in range(code.D):
        sup = code.support(i)
        b = code.row_coefficients(i)
        enc = encode_shares(b, [pad_share(gram[j], grad1[j], keys[j]) for j in sup])
        got = strip_keys(GradientMsg(coded_gradient(enc, eps), i, 2), b, [keys[j] for j in sup], eps)
        plain = sum(bj.value * (gram[j].to_real() @ eps.to_real() + grad1[j].to_real())
                    for bj, j in zip(b, sup))
        assert np.abs(got.values.to_real() - plain).max() < 1e-4


def test_precomputed_aggregate_matches_on_the_fly():
    _, code, gram, xty = _setup()
    rng = np.random.default_rng(1)
    keys = [gen_keys(rng, 6, 2, SPEC) for _ in range(code.D)]
    sup, b = code.support(0), code.row_coefficients(0)
    msg = GradientMsg(FxMatrix.from_real(rng.normal(size=(6, 2)), SPEC), 0, 1)
    eps = FxMatrix.from_real(rng.normal(size=(6, 2)), SPEC)
    agg = aggregate_keys(b, [keys[j] for j in sup])
    assert strip_keys(msg, b, [keys[j] for j in sup], eps).values == \
        strip_keys(msg, None, None, eps, agg=agg).values


def test_dimension_checks():
    k = gen_keys(np.random.default_rng(0), 4, 2, SPEC)
    with pytest.raises(DimensionError):
        pad_share(FxMatrix.zeros(3, 3, SPEC), FxMatrix.zeros(4, 2, SPEC), k)
    with pytest.raises(DimensionError):
        encode_shares([1, 2], [PaddedShare(k.delta, k.xi)])
    with pytest.raises(DimensionError):
        aggregate_keys([], [])


def test_registry_is_deterministic_and_guarded():
    code = build_code(5, 3, 0)
    a = gen_key_registry(7, code, 4, 2, SPEC, grad_bound=100.0, gram_bound=50.0)
    b = gen_key_registry(7, code, 4, 2, SPEC, grad_bound=100.0, gram_bound=50.0)
    assert all(x.delta == y.delta and x.xi == y.xi for x, y in zip(a, b))
    guard = int(np.ceil(50.0 * 2 ** SPEC.f)) + 1
    for k in a:
        assert np.abs(k.xi.raw).max() <= SPEC.hi - guard
    for i in range(code.D):
        agg = aggregate_keys(code.row_coefficients(i), [a[j] for j in code.support(i)])
        margin = sum(abs(x.value) for x in code.row_coefficients(i)) * 50.0 * 2 ** SPEC.f
        assert np.abs(agg.xi.raw).max() <= SPEC.hi - margin


def test_guarded_pipeline_never_wraps_before_stripping():
    # with guards the padded sums stay in range, so padding is plain addition
    _, code, gram, xty = _setup(seed=5)
    g_bound = max(np.abs(g.to_real()).max() for g in gram)
    x_bound = max(np.abs(x.to_real()).max() for x in xty)
    keys = gen_key_registry(1, code, 6, 2, SPEC, grad_bound=x_bound, gram_bound=g_bound)
    for j in range(code.D):
        raw_sum = gram[j].raw.astype(object) + keys[j].xi.raw.astype(object)
        assert all(SPEC.lo <= v <= SPEC.hi for v in raw_sum.ravel())


def test_padded_entry_is_uniform_chi_square():
    spec = FixedSpec(8, 4)
    rng = np.random.default_rng(123)
    plain = 37
    keys = rng.integers(spec.lo, spec.hi, 50_000, endpoint=True)
    padded = add_raw(np.full(keys.shape, plain), keys, spec)
    counts = np.bincount(padded - spec.lo, minlength=256)
    assert stats.chisquare(counts).pvalue > 0.01
