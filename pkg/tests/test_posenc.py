import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xlab import tensor as T
from xlab.posenc import (
    _inv_freq,
    PositionalScheme,
    SchemeError,
    alibi_bias,
    alibi_head_exponents,
    alibi_slopes,
    build_bias,
    log_bias,
    rotary_apply,
    sandwich_bias,
    sandwich_raw,
    sinusoidal_table,
    windowed_mask,
)

from conftest import check_grads

# scheme parsing


@pytest.mark.parametrize(
    "text, canonical",
    [
        ("sandwich:dbar=128", "sandwich:dbar=128,base=10000"),
        ("alibi:shift=6", "alibi:shift=6"),
        ("alibi", "alibi:shift=0"),
        ("alibi:h=4", "alibi:shift=0,h=4"),
        ("windowed:w=100", "windowed:w=100"),
        ("logbias:c=-0.8,r1=0.825,r2=1", "logbias:c=-0.8,r1=0.825,r2=1"),
        ("none", "none"),
        ("rotary", "rotary:base=10000"),
    ],
)
def test_scheme_round_trip(text, canonical):
    s = PositionalScheme.parse(text)
    assert str(s) == canonical
    assert PositionalScheme.parse(str(s)) == s


def test_sandwich_spec_parses_dbar():
    s = PositionalScheme.parse("sandwich:dbar=128")
    assert s.kind == "sandwich" and s.get("dbar") == 128 and s.get("base") == 1e4


@pytest.mark.parametrize(
    "text",
    ["windowed", "windowed:w=0", "sandwich:dbar=3", "sandwich:base=1", "logbias:c=1,r1=1,r2=-1",
     "alibi:w=3", "bogus", "alibi:shift=1.5", "alibi:shift", "rotary:base=x"],
)
def test_scheme_rejects(text):
    with pytest.raises(SchemeError):
        PositionalScheme.parse(text)


def test_inactive_params_absent():
    assert dict(PositionalScheme.parse("windowed:w=4").params) == {"w": 4}


# alibi


def test_alibi_h8_default():
    hs = alibi_head_exponents(8)
    assert hs.tolist() == [1, 2, 3, 4, 5, 6, 7, 8]
    assert alibi_slopes(hs).tolist() == [1 / 2**k for k in range(1, 9)]


def test_alibi_h12_head3():
    hs = alibi_head_exponents(12)
    assert hs[2] == 2.0 and alibi_slopes(hs)[2] == 0.25


def test_alibi_equalized_zero():
    assert alibi_slopes(alibi_head_exponents(6, equalized=0)).tolist() == [1.0] * 6


def test_alibi_shift():
    assert alibi_head_exponents(4, shift=-3).tolist() == [-1, 1, 3, 5]


def test_alibi_zero_heads():
    with pytest.raises(ValueError):
        alibi_head_exponents(0)


def test_alibi_bias_values():
    b = alibi_bias(5, [1.0, 0.5, 0.0])
    assert b.head(0)[3, 1] == -2.0
    assert b.head(1)[3, 1] == -1.0
    for h in range(3):
        assert np.all(np.diag(b.head(h)) == 0)
    assert np.all(b.head(2)[b.mask()] == 0)


def test_alibi_zero_length():
    with pytest.raises(ValueError):
        alibi_bias(0, [1.0])


# windowed


def test_windowed_w2():
    mask = windowed_mask(5, 2).mask()
    for m in range(5):
        assert set(np.nonzero(mask[m])[0]) == {n for n in (m - 1, m) if n >= 0}


def test_windowed_large_w_is_causal():
    for w in (6, 7, 100):
        np.testing.assert_array_equal(windowed_mask(6, w).mask(), np.tril(np.ones((6, 6), bool)))


@given(st.integers(1, 30), st.integers(1, 40))
def test_windowed_row_counts(L, w):
    mask = windowed_mask(L, w).mask()
    # row m (1-based) has min(w, m) entries
    assert mask.sum(1).tolist() == [min(w, m) for m in range(1, L + 1)]
    assert not np.any(np.triu(mask, 1))


def test_windowed_zero_raises():
    with pytest.raises(ValueError):
        windowed_mask(4, 0)


# sinusoidal


def test_sinusoidal_position_zero():
    t = sinusoidal_table(3, 8)
    assert np.all(t[0, 0::2] == 0) and np.all(t[0, 1::2] == 1)


def test_sinusoidal_quarter_period():
    d, base = 8, 1e4
    freqs = _inv_freq(d, base)
    for i in range(d // 2):
        m = base ** (2 * i / d) * math.pi / 2
        assert math.sin(m * freqs[i]) == pytest.approx(1.0, abs=1e-12)
    # integer rows use the same frequencies
    np.testing.assert_array_equal(sinusoidal_table(3, d, base)[2, 0::2], np.sin(2 * freqs))


def test_sinusoidal_naive_oracle():
    L, d, base = 4, 4, 1e4
    naive = np.zeros((L, d))
    for m in range(L):
        for i in range(d // 2):
            naive[m, 2 * i] = math.sin(m / base ** (2 * i / d))
            naive[m, 2 * i + 1] = math.cos(m / base ** (2 * i / d))
    np.testing.assert_array_equal(sinusoidal_table(L, d, base), naive)


def test_sinusoidal_odd_width():
    with pytest.raises(ValueError):
        sinusoidal_table(4, 5)


def test_interleaved_and_block_layouts_give_same_inner_products():
    L, d = 40, 16
    inter = sinusoidal_table(L, d)
    block = np.concatenate([inter[:, 0::2], inter[:, 1::2]], axis=1)
    np.testing.assert_allclose(inter @ inter.T, block @ block.T, atol=1e-12)
    dist = np.arange(L)
    np.testing.assert_allclose((inter @ inter.T)[L - 1, ::-1], sandwich_raw(dist, d), atol=1e-12)


# rotary


def test_rotary_identity_at_zero(rng):
    x = T.Tensor(rng.standard_normal((1, 8)))
    np.testing.assert_array_equal(rotary_apply(x, [0]).data, x.data)


def test_rotary_preserves_pair_norms(rng):
    x = rng.standard_normal((10, 8))
    y = rotary_apply(T.Tensor(x), np.arange(10) * 37).data
    np.testing.assert_allclose(np.hypot(y[:, 0::2], y[:, 1::2]), np.hypot(x[:, 0::2], x[:, 1::2]), atol=1e-12)


@given(st.integers(0, 5000), st.integers(0, 5000), st.integers(0, 2**31 - 1))
def test_rotary_relative(m, n, seed):
    rng = np.random.default_rng(seed)
    q, k = rng.standard_normal((1, 16)), rng.standard_normal((1, 16))
    lhs = (rotary_apply(T.Tensor(q), [m]).data @ rotary_apply(T.Tensor(k), [n]).data.T)[0, 0]
    rhs = (rotary_apply(T.Tensor(q), [m - n]).data @ k.T)[0, 0]
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_rotary_odd_width():
    with pytest.raises(ValueError):
        rotary_apply(T.Tensor(np.ones((2, 3))), [0, 1])


def test_rotary_grad(rng):
    x = T.Tensor(rng.standard_normal((2, 5, 6)), requires_grad=True)
    w = rng.standard_normal((2, 5, 6))
    assert check_grads(lambda: (rotary_apply(x, np.arange(5) * 3) * w).sum(), [x]) < 1e-6


# sandwich


def test_sandwich_zero_distance():
    b = sandwich_bias(10, 32, head_exponents=[1, 2])
    assert np.all(np.diag(b.head(0)) == 0) and np.all(np.diag(b.head(1)) == 0)
    assert sandwich_raw([0], 32)[0] == 16


def test_sandwich_dbar4_distance1():
    raw = sandwich_raw([1], 4, 1e4)[0]
    assert raw == pytest.approx(math.cos(1) + math.cos(0.01), abs=1e-15)
    assert raw == pytest.approx(1.540252, abs=1e-6)
    b = sandwich_bias(2, 4, 1e4, [1.0])
    assert b.head(0)[1, 0] == pytest.approx(-0.459748, abs=1e-6)


def test_sandwich_zero_exponent():
    with pytest.raises(ZeroDivisionError):
        sandwich_bias(4, 8, head_exponents=[0.0, 1.0])


def test_sandwich_reference_construction_small():
    # block sin/cos outer product divided by per-head compression ratios
    L, dbar, H, base = 300, 32, 6, 1e4
    pos = np.arange(L)[:, None]
    i = np.arange(dbar // 2)
    embs = np.concatenate([np.sin(pos / base ** (2 * i / dbar)), np.cos(pos / base ** (2 * i / dbar))], axis=-1)
    ref = (embs @ embs.T)[None] / (np.arange(1, H + 1) * 8 / H)[:, None, None]
    ours = sandwich_bias(L, dbar, base, alibi_head_exponents(H))
    mask = ours.mask()
    shift = (dbar / 2) / alibi_head_exponents(H)
    for h in range(H):
        assert np.abs(ours.head(h)[mask] + shift[h] - ref[h][mask]).max() < 1e-9


def test_sandwich_strict_peak_at_zero():
    for dbar in (8, 32, 128, 512):
        raw = sandwich_raw(np.arange(2000), dbar)
        assert np.all(raw[1:] < raw[0])


def test_sandwich_shift_is_attention_invariant(rng):
    L, dbar = 12, 16
    raw = sandwich_raw(np.arange(L), dbar)
    dist = np.arange(L)[:, None] - np.arange(L)[None, :]
    mask = dist >= 0
    with_shift = (raw[np.clip(dist, 0, None)] - dbar / 2) / 2.0
    without = raw[np.clip(dist, 0, None)] / 2.0
    logits = T.Tensor(rng.standard_normal((L, L)))
    a = T.scaled_softmax_rows(logits, 2.0, mask, with_shift).data
    b = T.scaled_softmax_rows(logits, 2.0, mask, without).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_sandwich_larger_dbar_larger_deficit():
    # the gap below the peak, dbar/2 - raw(delta), widens with dbar at every distance
    delta = np.arange(1, 513)
    deficits = [dbar / 2 - sandwich_raw(delta, dbar) for dbar in (32, 128, 512)]
    assert np.all(deficits[1] > deficits[0])
    assert np.all(deficits[2] > deficits[1])


# log bias


def test_log_bias_distance_zero():
    assert log_bias(5, -0.3, 2.0, 1.5).head(0)[4, 4] == -0.3


def test_log_bias_value():
    b = log_bias(2, -0.8, 0.825, 1.0)
    assert b.head(0)[1, 0] == pytest.approx(-0.8 - 0.825 * math.log(2), abs=1e-15)
    assert b.head(0)[1, 0] == pytest.approx(-1.3719, abs=1e-4)


def test_log_bias_r1_zero_matches_no_bias(rng):
    L = 9
    b = log_bias(L, 0.7, 0.0, 1.0)
    mask = b.mask()
    logits = T.Tensor(rng.standard_normal((L, L)))
    a = T.scaled_softmax_rows(logits, 1.0, mask, b.head(0)).data
    c = T.scaled_softmax_rows(logits, 1.0, mask).data
    np.testing.assert_allclose(a, c, atol=1e-12)


def test_log_bias_negative_r2():
    with pytest.raises(ValueError):
        log_bias(4, 0, 1, -1)


# shared properties


SCHEMES = ["alibi", "alibi:shift=-3", "alibi:h=2", "sandwich:dbar=32", "logbias:c=-0.8,r1=0.825,r2=1", "windowed:w=3"]


@pytest.mark.parametrize("text", SCHEMES)
def test_toeplitz_and_causal(text):
    L = 24
    b = build_bias(PositionalScheme.parse(text), 4, L)
    mask = b.mask()
    assert not np.any(np.triu(mask, 1))
    for h in range(max(b.n_heads, 1)):
        mat = b.head(h, L)
        for k in range(L):
            d = np.diagonal(mat, -k)[np.diagonal(mask, -k)]
            assert np.all(d == d[0]) if len(d) else True


@pytest.mark.parametrize("text", ["alibi", "alibi:shift=8", "logbias:c=0,r1=0.5,r2=2"])
def test_bias_nonincreasing_in_distance(text):
    b = build_bias(PositionalScheme.parse(text), 4, 200)
    assert np.all(np.diff(b.by_distance, axis=1) <= 0)


def test_block_matches_dense():
    b = build_bias(PositionalScheme.parse("alibi"), 2, 16)
    bias, mask = b.block(np.arange(10, 16), np.arange(16))
    np.testing.assert_array_equal(bias, b.dense()[:, 10:16, :])
    np.testing.assert_array_equal(mask, b.mask()[10:16])


def test_block_beyond_extent():
    b = build_bias(PositionalScheme.parse("alibi"), 2, 8)
    with pytest.raises(ValueError):
        b.block(np.array([9]), np.array([0]))


def test_no_table_for_plain_schemes():
    for text in ("none", "sinusoidal", "rotary"):
        assert build_bias(PositionalScheme.parse(text), 4, 8) is None
