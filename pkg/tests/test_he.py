import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppir.he import (CapacityError, CkksContext, HeError, HeParams, LevelError, NttTables, RotationKeyError,
                     is_prime, ntt_primes)


@pytest.fixture(scope="module")
def ctx():
    return CkksContext(HeParams())


@pytest.fixture(scope="module")
def keys(ctx):
    return ctx.keygen(np.random.default_rng(0))


def _trial_division(n):
    if n < 2:
        return False
    d = 2
    while d * d <= n:
        if n % d == 0:
            return False
        d += 1
    return True


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_is_prime_matches_trial_division(n):
    assert is_prime(n) == _trial_division(n)


def test_ntt_primes_support_negacyclic_transform():
    primes = ntt_primes(64, 1 << 20, 3)
    assert len(set(primes)) == 3
    for p in primes:
        assert p < 1 << 20 and p % 128 == 1 and _trial_division(p)


def _negacyclic(a, b, p):
    n = len(a)
    out = [0] * n
    for i in range(n):
        for j in range(n):
            k = i + j
            if k < n:
                out[k] = (out[k] + a[i] * b[j]) % p
            else:
                out[k - n] = (out[k - n] - a[i] * b[j]) % p
    return out


def test_ntt_product_is_negacyclic_convolution():
    n = 16
    primes = ntt_primes(n, 1 << 30, 2)
    tables = NttTables(n, primes)
    rng = np.random.default_rng(1)
    a = np.stack([rng.integers(0, p, n) for p in primes])
    b = np.stack([rng.integers(0, p, n) for p in primes])
    fa, fb = tables.forward(a, [0, 1]), tables.forward(b, [0, 1])
    np.testing.assert_array_equal(fa, tables.forward_reference(a, [0, 1]))
    mods = np.array(primes)[:, None]
    prod = tables.inverse(fa * fb % mods, [0, 1])
    for limb, p in enumerate(primes):
        assert prod[limb].tolist() == _negacyclic(a[limb].tolist(), b[limb].tolist(), p)
    np.testing.assert_array_equal(tables.inverse(fa, [0, 1]), a)


def test_encode_decode_roundtrip(ctx):
    z = np.random.default_rng(2).uniform(-100, 100, ctx.slots)
    np.testing.assert_allclose(ctx.decode(ctx.encode(z)), z, atol=1e-6)


def test_encrypt_decrypt_roundtrip(ctx, keys):
    rng = np.random.default_rng(3)
    z = rng.uniform(-255, 255, 1000)
    out = ctx.decrypt_vector(ctx.encrypt_vector(z, keys.keys, rng), keys, 1000)
    assert np.max(np.abs(out - z)) <= 1e-4


def test_ciphertexts_are_randomized(ctx, keys):
    rng = np.random.default_rng(4)
    z = np.ones(10)
    a, b = ctx.encrypt_vector(z, keys.keys, rng), ctx.encrypt_vector(z, keys.keys, rng)
    assert not np.array_equal(a.data, b.data)


def test_wrong_key_gives_noise(ctx, keys):
    rng = np.random.default_rng(5)
    other = ctx.keygen(np.random.default_rng(99), rotation_steps=[])
    z = rng.uniform(-100, 100, 512)
    out = ctx.decrypt_vector(ctx.encrypt_vector(z, keys.keys, rng), other, 512)
    assert abs(np.corrcoef(out, z)[0, 1]) < 0.2


def test_mul_by_ones_and_scale_bookkeeping(ctx, keys):
    rng = np.random.default_rng(6)
    z = rng.uniform(-50, 50, 300)
    ct = ctx.encrypt_vector(z, keys.keys, rng)
    prod = ctx.mul_plain(ct, np.ones(300))
    assert prod.level == ct.level - 1
    assert prod.scale == pytest.approx(ct.scale)
    np.testing.assert_allclose(ctx.decrypt_vector(prod, keys, 300), z, atol=1e-3)


def test_rotations(ctx, keys):
    rng = np.random.default_rng(7)
    z = rng.uniform(-10, 10, ctx.slots)
    ct = ctx.encrypt_vector(z, keys.keys, rng)
    assert ctx.rotate(ct, 0, keys.keys) is ct
    r1 = ctx.decrypt_vector(ctx.rotate(ct, 1, keys.keys), keys)
    np.testing.assert_allclose(r1, np.roll(z, -1), atol=1e-3)
    k = 5
    back = ctx.rotate_any(ctx.rotate_any(ct, k, keys.keys), ctx.slots - k, keys.keys)
    np.testing.assert_allclose(ctx.decrypt_vector(back, keys), z, atol=1e-3)
    with pytest.raises(RotationKeyError):
        ctx.rotate(ct, 3, keys.keys)


def test_dot_examples(ctx, keys):
    rng = np.random.default_rng(8)
    ct = ctx.encrypt_vector(np.arange(1.0, 9.0), keys.keys, rng)
    out = ctx.decrypt_vector(ctx.dot_plain(ct, np.ones((1, 8)), keys.keys), keys)
    assert out.shape == (1, ctx.slots)
    assert out[0, 0] == pytest.approx(36.0, abs=1e-3)
    zero = ctx.encrypt_vector(np.zeros(8), keys.keys, rng)
    out = ctx.decrypt_vector(ctx.dot_plain(zero, rng.standard_normal((1, 8)), keys.keys), keys)
    assert abs(out[0, 0]) <= 1e-3


def test_dot_rows_relative_error(ctx, keys):
    rng = np.random.default_rng(9)
    rows, v = rng.uniform(-1, 1, (6, 128)), rng.uniform(0, 255, 128)
    ct = ctx.encrypt_vector(np.tile(v, ctx.slots // 128), keys.keys, rng)
    before = ctx.counters.rotate
    out = ctx.decrypt_vector(ctx.dot_plain(ct, rows, keys.keys), keys)
    assert ctx.counters.rotate - before == 7  # log2(128)
    got = out[0, np.arange(6) * 128]
    ref = rows @ v
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) <= 1e-3


def test_serialization_roundtrip(ctx, keys):
    rng = np.random.default_rng(10)
    ct = ctx.encrypt_vector(rng.standard_normal(20), keys.keys, rng)
    buf = ctx.serialize(ct)
    assert len(buf) == ctx.ciphertext_bytes(ct.level)
    back = ctx.deserialize(buf)
    np.testing.assert_array_equal(back.data, ct.data)
    assert back.scale == ct.scale and back.level == ct.level
    with pytest.raises(HeError):
        ctx.deserialize(buf[:-8])
    pk = ctx.deserialize_keys(ctx.serialize_keys(keys.keys))
    np.testing.assert_array_equal(pk.public, keys.keys.public)
    assert sorted(pk.galois) == sorted(keys.keys.galois)


def test_parameter_mismatch_detected(ctx, keys):
    other = CkksContext(HeParams(ring_degree=1024))
    ct = other.encrypt_vector(np.ones(4), other.keygen(np.random.default_rng(0), []).keys, np.random.default_rng(1))
    with pytest.raises(HeError):
        ctx.deserialize(other.serialize(ct))
    with pytest.raises(HeError):
        ctx.encrypt_vector(np.ones(4), other.keygen(np.random.default_rng(0), []).keys, np.random.default_rng(1))


def test_capacity_and_level_errors(ctx, keys):
    rng = np.random.default_rng(11)
    with pytest.raises(CapacityError):
        ctx.encode(np.zeros(ctx.slots + 1))
    ct = ctx.encrypt_vector(np.ones(4), keys.keys, rng, level=0)
    with pytest.raises(LevelError):
        ctx.mul_plain(ct, np.ones(4))
