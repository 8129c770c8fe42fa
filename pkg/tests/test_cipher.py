import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from frag.errors import ErrorCode, FragError
from frag.he import (
    CipherParams, Plaintext, decode, decrypt, decrypt_many, deserialize_ct, encode, encrypt, encrypt_many,
    eval_add, eval_mul_cipher, eval_mul_plain, eval_neg, eval_sum, keygen, make_ct, serialize_ct,
)
from frag.he.cipher import phase_coefficients

TOL = 1e-6
unit = st.floats(-1.0, 1.0, allow_nan=False)


def test_calibration_round_trip_error(pk, sk):
    # empirical bound the 1e-6 tolerance was frozen against
    xs = np.random.default_rng(10).uniform(-1, 1, 10_000)
    data = encrypt_many(xs, pk, np.random.default_rng(11))
    got = np.array(decrypt_many([make_ct(d, 1, pk.params_id) for d in data], sk))
    err = np.abs(got - xs).max()
    print(f"calibration: max |dec(enc(x)) - x| over 10000 samples = {err:.3e}")
    assert err < TOL / 4


def test_encrypt_half(pk, sk):
    assert abs(decrypt(encrypt(0.5, pk), sk) - 0.5) < TOL


def test_examples(pk, sk):
    assert abs(decrypt(eval_add(encrypt(0.2, pk), encrypt(0.3, pk)), sk) - 0.5) < TOL
    assert abs(decrypt(eval_mul_cipher(encrypt(0.5, pk), encrypt(0.25, pk)), sk) - 0.125) < TOL
    assert abs(decrypt(eval_mul_plain(encrypt(0.5, pk), 0.5), sk) - 0.25) < TOL
    assert abs(decrypt(eval_neg(encrypt(0.5, pk)), sk) + 0.5) < TOL


def test_encode_decode(params):
    for x in (0.0, 1.0, -1.0, 0.123456789, -0.987654321):
        assert abs(decode(encode(x, params), params) - x) <= 2.0 ** (-params.scale_bits + 1)
    assert decode(Plaintext(1 << 64, 2), params) == 1.0


@given(unit, unit)
def test_add_property(pk, sk, a, b):
    assert abs(decrypt(eval_add(encrypt(a, pk), encrypt(b, pk)), sk) - (a + b)) < TOL


@given(unit, unit)
def test_mul_property(pk, sk, a, b):
    ct = eval_mul_cipher(encrypt(a, pk), encrypt(b, pk))
    assert ct.degree == 2 and ct.scale_exp == 2
    assert abs(decrypt(ct, sk) - a * b) < TOL


@given(unit, unit, unit)
def test_bilinearity(pk, sk, a, b, c):
    ea, eb, ec = encrypt(a, pk), encrypt(b, pk), encrypt(c, pk)
    left = decrypt(eval_mul_cipher(eval_add(ea, eb), ec), sk)
    right = decrypt(eval_add(eval_mul_cipher(ea, ec), eval_mul_cipher(eb, ec)), sk)
    assert abs(left - right) < 2e-6


def test_sum_of_1024_products(pk, sk):
    rng = np.random.default_rng(2)
    a, b = rng.uniform(-1, 1, 1024), rng.uniform(-1, 1, 1024)
    ea = [make_ct(d, 1, pk.params_id) for d in encrypt_many(a, pk, rng)]
    eb = [make_ct(d, 1, pk.params_id) for d in encrypt_many(b, pk, rng)]
    total = eval_sum([eval_mul_cipher(x, y) for x, y in zip(ea, eb)])
    assert abs(decrypt(total, sk) - float(a @ b)) < 1e-3


def test_freshness(pk):
    frames = {serialize_ct(encrypt(0.5, pk)) for _ in range(100)}
    assert len(frames) == 100


def test_keygen_determinism(params):
    ids = set()
    for seed in range(10):
        pk1, sk1 = keygen(params, seed)
        pk2, sk2 = keygen(params, seed)
        assert np.array_equal(pk1.data, pk2.data) and np.array_equal(sk1.coeffs, sk2.coeffs)
        ids.add(pk1.data.tobytes())
    assert len(ids) == 10


def test_secret_is_ternary(sk):
    assert set(np.unique(sk.coeffs)) <= {-1, 0, 1}


def test_public_key_noise_bound(pk, sk, params):
    bound = 6 * params.noise_stddev * math.sqrt(params.ring_degree)
    coeffs = []
    for _ in range(20):
        coeffs += phase_coefficients(encrypt(0.0, pk), sk)
    frac = np.mean(np.abs(coeffs) < bound)
    assert frac > 0.999


def test_errors(pk, sk, params):
    with pytest.raises(FragError) as e:
        eval_mul_plain(encrypt(0.1, pk), 2.0**40)
    assert e.value.code == ErrorCode.PLAINTEXT_OUT_OF_RANGE
    with pytest.raises(FragError) as e:
        encrypt(float("nan"), pk)
    assert e.value.code == ErrorCode.PLAINTEXT_OUT_OF_RANGE
    c2 = eval_mul_cipher(encrypt(0.1, pk), encrypt(0.1, pk))
    with pytest.raises(FragError) as e:
        eval_mul_cipher(c2, encrypt(0.1, pk))
    assert e.value.code == ErrorCode.DEPTH_EXCEEDED
    with pytest.raises(FragError) as e:
        eval_add(c2, eval_mul_plain(encrypt(0.1, pk), 1.0))
    assert e.value.code == ErrorCode.DEGREE_MISMATCH
    with pytest.raises(FragError) as e:
        eval_add(encrypt(0.1, pk), eval_mul_plain(encrypt(0.1, pk), 1.0))
    assert e.value.code == ErrorCode.SCALE_MISMATCH
    other_pk, other_sk = keygen(CipherParams(scale_bits=30), 1)
    with pytest.raises(FragError) as e:
        eval_add(encrypt(0.1, pk), encrypt(0.1, other_pk))
    assert e.value.code == ErrorCode.PARAMS_MISMATCH
    with pytest.raises(FragError) as e:
        decrypt(encrypt(0.1, pk), other_sk)
    assert e.value.code == ErrorCode.PARAMS_MISMATCH
    d3 = make_ct(np.zeros((4, 2, params.ring_degree), dtype=np.uint64), 3, pk.params_id)
    with pytest.raises(FragError) as e:
        decrypt(d3, sk)
    assert e.value.code == ErrorCode.DEGREE_UNSUPPORTED


def test_ciphertexts_are_immutable(pk):
    ct = encrypt(0.3, pk)
    with pytest.raises(ValueError):
        ct.data[0, 0, 0] = 1


def test_large_plaintext_within_headroom(pk, sk, params):
    x = params.plaintext_bound
    assert abs(decrypt(encrypt(x, pk), sk) - x) < TOL
    with pytest.raises(FragError):
        encrypt(x * 2, pk)


def test_round_trip_serialization_keeps_value(pk, sk):
    ct = eval_mul_cipher(encrypt(0.7, pk), encrypt(-0.3, pk))
    back = deserialize_ct(serialize_ct(ct))
    assert back == ct and abs(decrypt(back, sk) + 0.21) < TOL
