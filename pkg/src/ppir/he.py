"""Leveled CKKS over RNS with ciphertext-plaintext products only.

Polynomials live in ``Z[X]/(X^N + 1)`` and are stored limb-wise (one row
per prime) in the negacyclic NTT domain, so additions, plaintext products
and automorphisms are elementwise or permutations.  Every prime is below
``2^31`` so a product of two residues fits in ``int64``.

The default chain is ``q0, q1 ≈ 2^31`` (base), ``q2 ≈ 2^30`` (dropped by
the single rescale) and a special prime ``P ≈ 2^31`` for hybrid key
switching.  Plaintext multipliers are encoded at scale ``q2``, so after the
rescale a product keeps the ciphertext's scale exactly.

Parameters are demonstration-grade: they are not chosen to meet any
standard security level.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

try:
    from . import _ntt_kernels as _kernels
except ImportError:  # numba missing: fall back to the numpy transform
    _kernels = None


class HeError(RuntimeError):
    pass


class CapacityError(HeError, ValueError):
    pass


class ScaleMismatchError(HeError, ValueError):
    pass


class LevelError(HeError):
    pass


class RotationKeyError(HeError, KeyError):
    pass


# ---------------------------------------------------------------------------
# Number theory helpers

_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, exact for n < 3.3e24."""
    if n < 2:
        return False
    for p in _MR_BASES:
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def ntt_primes(ring_degree: int, below: int, count: int, exclude=()) -> list[int]:
    """The ``count`` largest primes ``p < below`` with ``p ≡ 1 (mod 2N)``."""
    step = 2 * ring_degree
    p = (below - 1) // step * step + 1
    out = []
    while len(out) < count:
        if p <= step:
            raise HeError("ran out of NTT-friendly primes")
        if p < below and p not in exclude and is_prime(p):
            out.append(p)
        p -= step
    return out


def ntt_prime_above(ring_degree: int, above: int, exclude=()) -> int:
    step = 2 * ring_degree
    p = above // step * step + 1
    while p <= above or p in exclude or not is_prime(p):
        p += step
    return p


def _factor_small(n: int) -> list[int]:
    out, d = [], 2
    while d * d <= n:
        if n % d == 0:
            out.append(d)
            while n % d == 0:
                n //= d
        d += 1
    if n > 1:
        out.append(n)
    return out


def primitive_2n_root(p: int, ring_degree: int) -> int:
    """Smallest primitive ``2N``-th root of unity mod ``p``."""
    factors = _factor_small(p - 1)
    for g in range(2, p):
        if all(pow(g, (p - 1) // f, p) != 1 for f in factors):
            psi = pow(g, (p - 1) // (2 * ring_degree), p)
            assert pow(psi, ring_degree, p) == p - 1
            return psi
    raise HeError(f"no generator for {p}")


# ---------------------------------------------------------------------------
# Parameters and NTT

@dataclass(frozen=True)
class HeParams:
    ring_degree: int = 4096
    scale_bits: int = 30
    base_bits: int = 31
    base_primes: int = 2

    def __post_init__(self):
        n = self.ring_degree
        if n < 8 or n & (n - 1):
            raise ValueError(f"ring degree must be a power of two >= 8, got {n}")
        if not 20 <= self.scale_bits < self.base_bits <= 31:
            raise ValueError("need 20 <= scale_bits < base_bits <= 31")
        if self.base_primes < 1:
            raise ValueError("need at least one base prime")

    @cached_property
    def coeff_moduli(self) -> tuple[int, ...]:
        base = ntt_primes(self.ring_degree, 1 << self.base_bits, self.base_primes)
        rescale = ntt_prime_above(self.ring_degree, 1 << self.scale_bits, exclude=base)
        return tuple(base) + (rescale,)

    @cached_property
    def special_modulus(self) -> int:
        return ntt_primes(self.ring_degree, 1 << self.base_bits, 1, exclude=self.coeff_moduli)[0]

    @property
    def scale(self) -> float:
        return float(1 << self.scale_bits)

    @property
    def slot_count(self) -> int:
        return self.ring_degree // 2

    @property
    def max_level(self) -> int:
        return len(self.coeff_moduli) - 1

    @cached_property
    def digest(self) -> bytes:
        text = f"{self.ring_degree}|{self.coeff_moduli}|{self.special_modulus}|{self.scale_bits}"
        return hashlib.blake2b(text.encode(), digest_size=8).digest()

    def describe(self) -> dict:
        return {"ring_degree": self.ring_degree, "scale_bits": self.scale_bits,
                "coeff_moduli": list(self.coeff_moduli), "special_modulus": self.special_modulus}


class NttTables:
    """Negacyclic NTT for a list of primes, applied along axis -1 with the
    limb axis at -2.  Evaluation point ``j`` is ``ψ^{2j+1}``."""

    def __init__(self, ring_degree: int, primes):
        n = ring_degree
        self.n = n
        self.primes = list(primes)
        L = len(self.primes)
        self.mod = np.array(self.primes, dtype=np.int64)
        self.psi_pow = np.empty((L, n), dtype=np.int64)
        self.psi_inv_pow = np.empty((L, n), dtype=np.int64)
        self.n_inv = np.empty(L, dtype=np.int64)
        self.stages = []
        self.inv_stages = []
        logn = n.bit_length() - 1
        roots = []
        for i, p in enumerate(self.primes):
            psi = primitive_2n_root(p, n)
            roots.append(psi)
            self.psi_pow[i] = self._powers(psi, n, p)
            self.psi_inv_pow[i] = self._powers(pow(psi, -1, p), n, p)
            self.n_inv[i] = pow(n, -1, p)
        for s in range(logn):
            h = 1 << s
            fwd = np.empty((L, h), dtype=np.int64)
            inv = np.empty((L, h), dtype=np.int64)
            for i, p in enumerate(self.primes):
                w = pow(roots[i], 2 * (n // (2 * h)), p)
                fwd[i] = self._powers(w, h, p)
                inv[i] = self._powers(pow(w, -1, p), h, p)
            self.stages.append(fwd)
            self.inv_stages.append(inv)
        rev = np.zeros(n, dtype=np.int64)
        for b in range(logn):
            rev |= ((np.arange(n) >> b) & 1) << (logn - 1 - b)
        self.bitrev = rev
        self._subsets = {}

    @staticmethod
    def _powers(w: int, count: int, p: int) -> np.ndarray:
        out = np.empty(count, dtype=np.int64)
        acc = 1
        for i in range(count):
            out[i] = acc
            acc = acc * w % p
        return out

    def _subset(self, limbs):
        key = tuple(limbs)
        if key not in self._subsets:
            idx = np.array(key, dtype=np.int64)
            self._subsets[key] = (
                self.mod[idx][:, None],
                self.psi_pow[idx], self.psi_inv_pow[idx], self.n_inv[idx][:, None],
                [t[idx] for t in self.stages], [t[idx] for t in self.inv_stages],
            )
        return self._subsets[key]

    def _transform(self, a, p, stages):
        n = self.n
        a = a[..., self.bitrev]
        lead = a.shape[:-1]
        pm = p[:, :, None]
        for s, w in enumerate(stages):
            h = 1 << s
            a = a.reshape(lead + (n // (2 * h), 2, h))
            u = a[..., 0, :]
            v = a[..., 1, :] * w[:, None, :] % pm
            out = np.empty_like(a)
            np.add(u, v, out=out[..., 0, :])
            np.subtract(u, v, out=out[..., 1, :])
            a = out
            a %= pm[..., None]
        return a.reshape(lead + (n,))

    def forward_reference(self, a: np.ndarray, limbs) -> np.ndarray:
        """Vectorized numpy transform; the compiled kernel is checked against it."""
        p, psi, _, _, stages, _ = self._subset(limbs)
        return self._transform(a * psi % p, p, stages)

    def inverse_reference(self, a: np.ndarray, limbs) -> np.ndarray:
        p, _, psi_inv, n_inv, _, inv_stages = self._subset(limbs)
        a = self._transform(a, p, inv_stages)
        return a * n_inv % p * psi_inv % p

    def _flat_tables(self, limbs):
        key = ("flat",) + tuple(limbs)
        if key not in self._subsets:
            idx = np.array(limbs, dtype=np.int64)
            fwd = np.concatenate([t[idx] for t in self.stages], axis=1)
            inv = np.concatenate([t[idx] for t in self.inv_stages], axis=1)
            self._subsets[key] = (self.mod[idx], self.psi_pow[idx], self.psi_inv_pow[idx],
                                  self.n_inv[idx], np.ascontiguousarray(fwd), np.ascontiguousarray(inv))
        return self._subsets[key]

    def forward(self, a: np.ndarray, limbs) -> np.ndarray:
        if _kernels is None:
            return self.forward_reference(a, limbs)
        mods, psi, _, _, fwd, _ = self._flat_tables(limbs)
        a = np.ascontiguousarray(a, dtype=np.int64)
        flat = a.reshape(-1, len(limbs), self.n)
        out = _kernels.forward(flat, mods, psi, fwd, self.bitrev)
        return out.reshape(a.shape)

    def inverse(self, a: np.ndarray, limbs) -> np.ndarray:
        if _kernels is None:
            return self.inverse_reference(a, limbs)
        mods, _, psi_inv, n_inv, _, inv = self._flat_tables(limbs)
        a = np.ascontiguousarray(a, dtype=np.int64)
        flat = a.reshape(-1, len(limbs), self.n)
        out = _kernels.inverse(flat, mods, psi_inv, n_inv, inv, self.bitrev)
        return out.reshape(a.shape)


# ---------------------------------------------------------------------------
# Data types

@dataclass(frozen=True)
class Plaintext:
    data: np.ndarray  # (..., L, N), NTT domain
    scale: float
    level: int


@dataclass(frozen=True)
class Ciphertext:
    data: np.ndarray  # (..., 2, L, N), NTT domain
    scale: float
    level: int
    params_digest: bytes = b""

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.data.shape[:-3]

    def __getitem__(self, idx) -> "Ciphertext":
        data = self.data[idx]
        if data.ndim < 3:
            raise IndexError("cannot index into the polynomial axes")
        return Ciphertext(data, self.scale, self.level, self.params_digest)


@dataclass(frozen=True)
class PublicKeys:
    """Everything a peer needs to encrypt and evaluate."""

    public: np.ndarray  # (2, L_top, N)
    galois: dict  # step -> (digits, 2, L_top + 1, N)
    params_digest: bytes


@dataclass(frozen=True)
class KeySet:
    secret: np.ndarray  # (L_top + 1, N), NTT domain over q_0..q_top, P
    keys: PublicKeys


@dataclass
class OpCounters:
    encrypt: int = 0
    decrypt: int = 0
    add: int = 0
    mul_plain: int = 0
    rotate: int = 0
    rescale: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# Context

class CkksContext:
    """Encoder and evaluator for one parameter set.

    Counters track homomorphic operations; a batched ciphertext counts once
    per element.
    """

    def __init__(self, params: HeParams = HeParams()):
        self.params = params
        self.n = params.ring_degree
        self.slots = params.slot_count
        self.moduli = list(params.coeff_moduli)
        self.special = params.special_modulus
        self.ntt = NttTables(self.n, self.moduli + [self.special])
        self.top = params.max_level
        self.special_index = len(self.moduli)
        self.counters = OpCounters()
        two_n = 2 * self.n
        rot = np.array([pow(5, j, two_n) for j in range(self.slots)], dtype=np.int64)
        self._slot_pos = (rot - 1) // 2
        self._slot_neg = (two_n - rot - 1) // 2
        self._twist = np.exp(1j * np.pi * np.arange(self.n) / self.n)
        self._perms = {}
        # inverse of the dropped prime, per remaining limb
        self._rescale_inv = {
            lvl: np.array([pow(self.moduli[lvl], -1, q) for q in self.moduli[:lvl]], dtype=np.int64)[:, None]
            for lvl in range(1, self.top + 1)
        }
        self._p_inv = np.array([pow(self.special, -1, q) for q in self.moduli], dtype=np.int64)[:, None]

    # -- helpers --------------------------------------------------------
    def limbs(self, level: int) -> list[int]:
        return list(range(level + 1))

    def _mod(self, level: int, with_special: bool = False) -> np.ndarray:
        limbs = self.limbs(level) + ([self.special_index] if with_special else [])
        return self.ntt.mod[limbs][:, None]

    def _small_to_ntt(self, coeffs: np.ndarray, limbs) -> np.ndarray:
        """Lift signed integer coefficients (..., N) to NTT limbs (..., L, N)."""
        mods = self.ntt.mod[list(limbs)][:, None]
        rns = coeffs[..., None, :] % mods
        return self.ntt.forward(rns, limbs)

    def galois_element(self, step: int) -> int:
        return pow(5, step % self.slots, 2 * self.n)

    def _perm(self, g: int) -> np.ndarray:
        if g not in self._perms:
            j = np.arange(self.n)
            self._perms[g] = ((g * (2 * j + 1)) % (2 * self.n) - 1) // 2
        return self._perms[g]

    # -- encoding -------------------------------------------------------
    def encode_coeffs(self, values) -> np.ndarray:
        """Real coefficient vectors (..., N) whose canonical embedding is ``values``."""
        z = np.asarray(values)
        if z.shape[-1] > self.slots:
            raise CapacityError(f"vector of length {z.shape[-1]} exceeds {self.slots} slots")
        full = np.zeros(z.shape[:-1] + (self.n,), dtype=np.complex128)
        full[..., self._slot_pos[:z.shape[-1]]] = z
        full[..., self._slot_neg[:z.shape[-1]]] = np.conj(z)
        return (np.fft.fft(full, axis=-1) / self.n * np.conj(self._twist)).real

    def decode_coeffs(self, coeffs: np.ndarray) -> np.ndarray:
        full = np.fft.ifft(np.asarray(coeffs) * self._twist, axis=-1) * self.n
        return full[..., self._slot_pos].real

    def encode(self, values, scale: float | None = None, level: int | None = None) -> Plaintext:
        scale = self.params.scale if scale is None else float(scale)
        level = self.top if level is None else level
        coeffs = np.rint(self.encode_coeffs(np.asarray(values, dtype=np.float64)) * scale)
        if coeffs.size and np.max(np.abs(coeffs)) >= 2.0 ** 62:
            raise CapacityError("encoded values overflow the coefficient range; lower the scale")
        return Plaintext(self._small_to_ntt(coeffs.astype(np.int64), self.limbs(level)), scale, level)

    def _crt_centered(self, rns: np.ndarray, level: int) -> np.ndarray:
        """Centered integer lift of (..., L, N) residues, returned as float64."""
        mods = self.moduli[:level + 1]
        if level == 0:
            q = mods[0]
            x = rns[..., 0, :]
            return np.where(x > q // 2, x - q, x).astype(np.float64)
        # Garner mixed radix with Python integers for exactness
        x = rns[..., 0, :].astype(object)
        radix = 1
        digits = [rns[..., 0, :].astype(np.int64)]
        acc = digits[0].astype(object)
        for i in range(1, level + 1):
            qi = mods[i]
            radix *= mods[i - 1]
            t = (rns[..., i, :].astype(object) - acc) * pow(radix, -1, qi) % qi
            acc = acc + radix * t
        Q = radix * mods[level]
        centered = np.where(acc > Q // 2, acc - Q, acc)
        del x, digits
        return centered.astype(np.float64)

    def decode(self, pt: Plaintext, length: int | None = None) -> np.ndarray:
        coeffs = self._crt_centered(self.ntt.inverse(pt.data, self.limbs(pt.level)), pt.level)
        out = self.decode_coeffs(coeffs / pt.scale)
        return out if length is None else out[..., :length]

    # -- keys -----------------------------------------------------------
    def keygen(self, rng: np.random.Generator, rotation_steps=None) -> KeySet:
        n, top = self.n, self.top
        all_limbs = self.limbs(top) + [self.special_index]
        s_coef = rng.integers(-1, 2, size=n)
        s = self._small_to_ntt(s_coef, all_limbs)
        q_limbs = self.limbs(top)
        a = self._uniform(rng, q_limbs)
        e = self._small_to_ntt(self._noise(rng), q_limbs)
        mods = self._mod(top)
        pk = np.stack([(-a * s[:-1] + e) % mods, a])
        if rotation_steps is None:
            rotation_steps = [1 << i for i in range(int(math.log2(self.slots)))]
        galois = {int(step): self._switching_key(rng, s, s[:, self._perm(self.galois_element(step))])
                  for step in rotation_steps}
        return KeySet(s, PublicKeys(pk, galois, self.params.digest))

    def _uniform(self, rng, limbs) -> np.ndarray:
        mods = self.ntt.mod[list(limbs)]
        return np.stack([rng.integers(0, int(q), size=self.n, dtype=np.int64) for q in mods])

    def _noise(self, rng, shape=()) -> np.ndarray:
        return np.rint(rng.normal(0.0, 3.2, size=tuple(shape) + (self.n,))).astype(np.int64)

    def _switching_key(self, rng, s: np.ndarray, s_new: np.ndarray) -> np.ndarray:
        """Key switching ``s_new -> s``: one digit per base prime, extended by ``P``."""
        top = self.top
        all_limbs = self.limbs(top) + [self.special_index]
        mods = self.ntt.mod[all_limbs][:, None]
        out = np.empty((top + 1, 2) + s.shape, dtype=np.int64)
        for j in range(top + 1):
            a = self._uniform(rng, all_limbs)
            e = self._small_to_ntt(self._noise(rng), all_limbs)
            b = (-a * s + e) % mods
            b[j] = (b[j] + (self.special % self.moduli[j]) * s_new[j]) % mods[j]
            out[j, 0], out[j, 1] = b, a
        return out

    # -- encryption -----------------------------------------------------
    def encrypt(self, pt: Plaintext, keys: PublicKeys, rng: np.random.Generator) -> Ciphertext:
        self._check_digest(keys.params_digest)
        level = pt.level
        limbs = self.limbs(level)
        batch = pt.data.shape[:-2]
        mods = self._mod(level)
        u = self._small_to_ntt(rng.integers(-1, 2, size=batch + (self.n,)), limbs)
        e0 = self._small_to_ntt(self._noise(rng, batch), limbs)
        e1 = self._small_to_ntt(self._noise(rng, batch), limbs)
        pk = keys.public[:, :level + 1]
        c0 = (pk[0] * u % mods + e0 + pt.data) % mods
        c1 = (pk[1] * u % mods + e1) % mods
        self.counters.encrypt += int(np.prod(batch, dtype=np.int64))
        return Ciphertext(np.stack([c0, c1], axis=-3), pt.scale, level, self.params.digest)

    def decrypt(self, ct: Ciphertext, secret: KeySet | np.ndarray) -> Plaintext:
        s = secret.secret if isinstance(secret, KeySet) else secret
        mods = self._mod(ct.level)
        s = s[:ct.level + 1]
        m = (ct.data[..., 0, :, :] + ct.data[..., 1, :, :] * s % mods) % mods
        self.counters.decrypt += int(np.prod(ct.batch_shape, dtype=np.int64))
        return Plaintext(m, ct.scale, ct.level)

    def encrypt_vector(self, values, keys: PublicKeys, rng, level: int | None = None) -> Ciphertext:
        return self.encrypt(self.encode(values, level=level), keys, rng)

    def decrypt_vector(self, ct: Ciphertext, secret, length: int | None = None) -> np.ndarray:
        return self.decode(self.decrypt(ct, secret), length)

    def _check_digest(self, digest: bytes):
        if digest and digest != self.params.digest:
            raise HeError("key material belongs to a different parameter set")

    # -- evaluation -----------------------------------------------------
    def add(self, a: Ciphertext, b: Ciphertext | Plaintext) -> Ciphertext:
        if a.level != b.level:
            raise ScaleMismatchError(f"level mismatch: {a.level} vs {b.level}")
        if not math.isclose(a.scale, b.scale, rel_tol=1e-12):
            raise ScaleMismatchError(f"scale mismatch: {a.scale} vs {b.scale}")
        mods = self._mod(a.level)
        if isinstance(b, Plaintext):
            data = a.data.copy()
            data[..., 0, :, :] = (data[..., 0, :, :] + b.data) % mods
        else:
            data = (a.data + b.data) % mods
        self.counters.add += int(np.prod(data.shape[:-3], dtype=np.int64))
        return Ciphertext(data, a.scale, a.level, a.params_digest)

    def sum_batch(self, ct: Ciphertext, axis: int = 0) -> Ciphertext:
        """Homomorphic sum over one batch axis."""
        if axis < 0 or axis >= len(ct.batch_shape):
            raise ValueError("axis must index a batch dimension")
        mods = self._mod(ct.level)
        data = ct.data.sum(axis=axis) % mods
        self.counters.add += int(np.prod(ct.batch_shape, dtype=np.int64)) - int(np.prod(data.shape[:-3], dtype=np.int64))
        return Ciphertext(data, ct.scale, ct.level, ct.params_digest)

    def encode_multiplier(self, values, level: int) -> Plaintext:
        """Plaintext multiplier at the scale that the next rescale removes."""
        if level < 1:
            raise LevelError("no level left for a multiplication; use larger parameters")
        return self.encode(values, scale=float(self.moduli[level]), level=level)

    def mul_plain(self, ct: Ciphertext, pt: Plaintext | np.ndarray, rescale: bool = True) -> Ciphertext:
        if not isinstance(pt, Plaintext):
            pt = self.encode_multiplier(pt, ct.level)
        if ct.level < 1:
            raise LevelError("ciphertext has no level left for a multiplication; use larger parameters")
        if pt.level != ct.level:
            raise ScaleMismatchError(f"plaintext level {pt.level} vs ciphertext level {ct.level}")
        mods = self._mod(ct.level)
        data = ct.data * pt.data[..., None, :, :] % mods
        batch = data.shape[:-3]
        self.counters.mul_plain += int(np.prod(batch, dtype=np.int64))
        out = Ciphertext(data, ct.scale * pt.scale, ct.level, ct.params_digest)
        return self.rescale(out) if rescale else out

    def rescale(self, ct: Ciphertext) -> Ciphertext:
        level = ct.level
        if level < 1:
            raise LevelError("cannot rescale at level 0")
        q_last = self.moduli[level]
        last = self.ntt.inverse(ct.data[..., level:level + 1, :], [level])
        last = np.where(last > q_last // 2, last - q_last, last)
        low = self.limbs(level - 1)
        mods = self._mod(level - 1)
        lift = self.ntt.forward(last % mods, low)
        data = (ct.data[..., :level, :] - lift) % mods * self._rescale_inv[level] % mods
        self.counters.rescale += int(np.prod(ct.batch_shape, dtype=np.int64))
        return Ciphertext(data, ct.scale / q_last, level - 1, ct.params_digest)

    def rotate(self, ct: Ciphertext, step: int, keys: PublicKeys) -> Ciphertext:
        """Cyclic left rotation of the slots by ``step``."""
        step %= self.slots
        if step == 0:
            return ct
        if step not in keys.galois:
            raise RotationKeyError(f"no rotation key for step {step}; available: {sorted(keys.galois)}")
        perm = self._perm(self.galois_element(step))
        c0 = ct.data[..., 0, :, :][..., perm]
        c1 = ct.data[..., 1, :, :][..., perm]
        k0, k1 = self._key_switch(c1, ct.level, keys.galois[step])
        mods = self._mod(ct.level)
        data = np.stack([(c0 + k0) % mods, k1], axis=-3)
        self.counters.rotate += int(np.prod(ct.batch_shape, dtype=np.int64))
        return Ciphertext(data, ct.scale, ct.level, ct.params_digest)

    def rotate_any(self, ct: Ciphertext, step: int, keys: PublicKeys) -> Ciphertext:
        """Rotation by an arbitrary step as a chain of power-of-two rotations."""
        step %= self.slots
        bit = 0
        while step:
            if step & 1:
                ct = self.rotate(ct, 1 << bit, keys)
            step >>= 1
            bit += 1
        return ct

    def _key_switch(self, d: np.ndarray, level: int, key: np.ndarray):
        limbs = self.limbs(level)
        ext = limbs + [self.special_index]
        ext_mods = self.ntt.mod[ext][:, None]
        coeffs = self.ntt.inverse(d, limbs)  # (..., L, N)
        # digit j is the j-th residue, centered in (-q_j/2, q_j/2] and reduced mod every limb;
        # uncentered digits carry a (q_j/2)·Σ X^i bias that piles noise onto the slots near X = 1
        q = self.ntt.mod[limbs][:, None]
        coeffs = np.where(coeffs > q // 2, coeffs - q, coeffs)
        digits = coeffs[..., :, None, :] % ext_mods  # (..., L, L+1, N)
        digits = self.ntt.forward(digits, ext)
        k = key[:level + 1][:, :, ext]  # (L, 2, L+1, N)
        acc = (digits[..., :, None, :, :] * k % ext_mods).sum(axis=-4) % ext_mods  # (..., 2, L+1, N)
        # ModDown: divide by P with rounding
        p = self.special
        last = self.ntt.inverse(acc[..., -1:, :], [self.special_index])
        last = np.where(last > p // 2, last - p, last)
        mods = self._mod(level)
        lift = self.ntt.forward(last % mods, limbs)
        out = (acc[..., :-1, :] - lift) % mods * self._p_inv[:level + 1] % mods
        return out[..., 0, :, :], out[..., 1, :, :]

    def rotate_and_sum(self, ct: Ciphertext, block: int, keys: PublicKeys) -> Ciphertext:
        """After this, slot ``b·block`` holds the sum of slots ``b·block .. b·block+block-1``."""
        if block & (block - 1) or block < 1:
            raise ValueError(f"block size must be a power of two, got {block}")
        step = block // 2
        while step >= 1:
            ct = self.add(ct, self.rotate(ct, step, keys))
            step //= 2
        return ct

    def dot_plain(self, ct: Ciphertext, rows, keys: PublicKeys) -> Ciphertext:
        """Per-row dot products with the encrypted vector.

        ``ct`` must hold the vector tiled every ``block`` slots, where
        ``block`` is the row length rounded up to a power of two (a single
        copy suffices for one row).  Row ``r`` of group ``g`` lands in slot
        ``(r mod rows_per_group)·block`` of output ciphertext ``g``.
        """
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        m, length = rows.shape
        if length > self.slots:
            raise CapacityError(f"row length {length} exceeds {self.slots} slots")
        block = 1 << max(0, (length - 1).bit_length())
        per_group = self.slots // block
        groups = -(-m // per_group)
        packed = np.zeros((groups, per_group, block))
        padded = np.zeros((groups * per_group, block))
        padded[:m, :length] = rows
        packed[:] = padded.reshape(groups, per_group, block)
        mult = self.encode_multiplier(packed.reshape(groups, self.slots), ct.level)
        prod = self.mul_plain(ct, mult)
        return self.rotate_and_sum(prod, block, keys)

    # -- serialization --------------------------------------------------
    _HEADER = struct.Struct("<4sBBBB8sQi")

    def serialize(self, ct: Ciphertext) -> bytes:
        mant, exp = math.frexp(ct.scale)
        mantissa = int(mant * (1 << 53))
        batch = ct.batch_shape
        head = self._HEADER.pack(b"PPHE", 1, ct.level, len(batch), 0, self.params.digest, mantissa, exp - 53)
        dims = struct.pack(f"<{len(batch)}I", *batch)
        return head + dims + ct.data.astype("<u8").tobytes()

    def deserialize(self, buf: bytes) -> Ciphertext:
        magic, kind, level, rank, _, digest, mantissa, exp = self._HEADER.unpack_from(buf)
        if magic != b"PPHE" or kind != 1:
            raise HeError("not a serialized ciphertext")
        if digest != self.params.digest:
            raise HeError("ciphertext was produced under different parameters")
        off = self._HEADER.size
        batch = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        shape = tuple(batch) + (2, level + 1, self.n)
        data = np.frombuffer(buf, dtype="<u8", offset=off).astype(np.int64)
        if data.size != math.prod(shape):
            raise HeError(f"ciphertext payload has {data.size} words, header implies {math.prod(shape)}")
        return Ciphertext(data.reshape(shape), math.ldexp(mantissa, exp), level, digest)

    def serialize_keys(self, keys: PublicKeys) -> bytes:
        steps = sorted(keys.galois)
        head = self._HEADER.pack(b"PPHE", 2, self.top, len(steps), 0, self.params.digest, 0, 0)
        parts = [head, struct.pack(f"<{len(steps)}I", *steps), keys.public.astype("<u8").tobytes()]
        parts += [keys.galois[s].astype("<u8").tobytes() for s in steps]
        return b"".join(parts)

    def deserialize_keys(self, buf: bytes) -> PublicKeys:
        magic, kind, top, count, _, digest, _, _ = self._HEADER.unpack_from(buf)
        if magic != b"PPHE" or kind != 2:
            raise HeError("not serialized key material")
        if digest != self.params.digest:
            raise HeError("keys were produced under different parameters")
        off = self._HEADER.size
        steps = struct.unpack_from(f"<{count}I", buf, off)
        off += 4 * count
        pk_shape = (2, top + 1, self.n)
        gk_shape = (top + 1, 2, top + 2, self.n)

        def take(shape):
            nonlocal off
            size = math.prod(shape)
            arr = np.frombuffer(buf, dtype="<u8", count=size, offset=off).astype(np.int64).reshape(shape)
            off += 8 * size
            return arr

        pk = take(pk_shape)
        galois = {s: take(gk_shape) for s in steps}
        if off != len(buf):
            raise HeError("trailing bytes after key material")
        return PublicKeys(pk, galois, digest)

    def ciphertext_bytes(self, level: int, batch: int = 1) -> int:
        rank = 0 if batch == 1 else 1
        return self._HEADER.size + 4 * rank + batch * 2 * (level + 1) * self.n * 8


# ---------------------------------------------------------------------------
# Functional aliases

def he_add(ctx: CkksContext, a, b):
    return ctx.add(a, b)


def he_mul_plain(ctx: CkksContext, ct, pt):
    return ctx.mul_plain(ct, pt)


def he_rotate(ctx: CkksContext, ct, step, keys):
    return ctx.rotate(ct, step, keys)


def he_dot_plain(ctx: CkksContext, ct, rows, keys):
    return ctx.dot_plain(ct, rows, keys)
