"""Two-party additive secret sharing over a power-of-two ring.

Secrets are fixed-point encoded reals.  Products use Beaver triples from a
trusted dealer, followed by a dealer-assisted truncation that removes the
extra ``2^f`` scale.  All ring arithmetic is done on ``np.uint64`` arrays,
whose wrap-around is exactly reduction mod ``2^64``; narrower rings are
masked after every operation.

The functions named ``*_step`` are the local computations of a single party
between two communication rounds.  ``LocalPair`` runs both parties in
lockstep in one thread, which is what the unit tests and oracles use; the
actor-based protocols in :mod:`ppir.protocols` call the same steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError


class EncodingOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class FixedPointCodec:
    frac_bits: int = 16
    ring_bits: int = 64

    def __post_init__(self):
        if not 8 <= self.ring_bits <= 64:
            raise ValueError(f"ring_bits must be in [8, 64], got {self.ring_bits}")
        if not 0 <= self.frac_bits < self.ring_bits - 1:
            raise ValueError(f"frac_bits {self.frac_bits} incompatible with a {self.ring_bits}-bit ring")

    @property
    def modulus(self) -> int:
        return 1 << self.ring_bits

    @property
    def scale(self) -> float:
        return float(1 << self.frac_bits)

    @property
    def bound(self) -> float:
        """Encodable reals lie in ``[-bound, bound)``."""
        return float(2 ** (self.ring_bits - 1 - self.frac_bits))

    @property
    def product_bound(self) -> float:
        """Largest magnitude a product may reach before truncation breaks."""
        return float(2 ** (self.ring_bits - 2 - 2 * self.frac_bits))

    @property
    def element_bytes(self) -> int:
        return 4 if self.ring_bits <= 32 else 8

    def wrap(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.uint64)
        if self.ring_bits == 64:
            return a
        return a & np.uint64(self.modulus - 1)

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise EncodingOverflowError("cannot encode non-finite values")
        if x.size and np.max(np.abs(x)) >= self.bound:
            raise EncodingOverflowError(
                f"|x| = {np.max(np.abs(x)):.6g} exceeds the fixed-point range {self.bound:.6g}")
        return self.wrap(np.rint(x * self.scale).astype(np.int64).astype(np.uint64))

    def to_signed(self, r) -> np.ndarray:
        r = self.wrap(r)
        if self.ring_bits == 64:
            return r.astype(np.int64)
        v = r.astype(np.int64)
        return np.where(v >= (1 << (self.ring_bits - 1)), v - self.modulus, v)

    def decode(self, r, frac_bits: int | None = None) -> np.ndarray:
        f = self.frac_bits if frac_bits is None else frac_bits
        return self.to_signed(r).astype(np.float64) / float(1 << f)


def fp_encode(x, codec: FixedPointCodec = FixedPointCodec()) -> np.ndarray:
    return codec.encode(x)


def fp_decode(r, codec: FixedPointCodec = FixedPointCodec()) -> np.ndarray:
    return codec.decode(r)


def random_ring(rng: np.random.Generator, shape, codec: FixedPointCodec) -> np.ndarray:
    return codec.wrap(rng.integers(0, 1 << 64, size=shape, dtype=np.uint64, endpoint=False))


# ---------------------------------------------------------------------------
# Shares

@dataclass(frozen=True)
class Share:
    party_id: int
    payload: np.ndarray

    @property
    def shape(self):
        return self.payload.shape


def make_shares(secret, rng: np.random.Generator, codec: FixedPointCodec = FixedPointCodec()):
    """Split an encoded ring tensor into two additive shares."""
    secret = codec.wrap(secret)
    s1 = random_ring(rng, secret.shape, codec)
    s2 = codec.wrap(secret - s1)
    return Share(1, s1), Share(2, s2)


def reconstruct(a: Share, b: Share, codec: FixedPointCodec = FixedPointCodec()) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"share shapes differ: {a.shape} vs {b.shape}")
    return codec.wrap(a.payload + b.payload)


def mpc_add(x: Share, y: Share, codec: FixedPointCodec = FixedPointCodec()) -> Share:
    if x.party_id != y.party_id:
        raise ValueError(f"cannot add shares held by parties {x.party_id} and {y.party_id}")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return Share(x.party_id, codec.wrap(x.payload + y.payload))


# ---------------------------------------------------------------------------
# Correlated randomness

_LIMB_BITS = 16
_LIMB_CHUNK = 1 << 18  # inner-dimension chunk keeping limb sums below 2^53


def _limbs(x: np.ndarray, count: int) -> list[np.ndarray]:
    mask = np.uint64((1 << _LIMB_BITS) - 1)
    return [((x >> np.uint64(_LIMB_BITS * i)) & mask).astype(np.float64) for i in range(count)]


def ring_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` mod 2^64 for uint64 operands.

    numpy's integer matmul does not use BLAS and is slow. Splitting both
    operands into 16-bit limbs turns it into float64 BLAS products whose
    partial sums stay exact, and only limb pairs below bit 64 are needed.
    """
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    vec = b.ndim == 1
    if vec:
        b = b[:, None]
    k = a.shape[-1]
    out = np.zeros(a.shape[:-1] + b.shape[1:], dtype=np.uint64)
    parts = 64 // _LIMB_BITS
    for start in range(0, k, _LIMB_CHUNK):
        la = _limbs(a[..., start:start + _LIMB_CHUNK], parts)
        lb = _limbs(b[start:start + _LIMB_CHUNK], parts)
        for s in range(parts):
            acc = sum(la[i] @ lb[s - i] for i in range(s + 1))
            out += acc.astype(np.uint64) << np.uint64(_LIMB_BITS * s)
    return out[..., 0] if vec else out


def _ring_product(kind: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if kind == "elementwise":
        return a * b
    if a.dtype == np.uint64 and b.dtype == np.uint64:
        return ring_matmul(a, b)
    return a @ b


@dataclass(frozen=True)
class BeaverTriple:
    """One party's shares of ``(a, b, c = a·b)``."""

    party_id: int
    kind: str  # "elementwise" | "matmul" (matvec is matmul with 1-D b)
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray


@dataclass(frozen=True)
class TruncationPair:
    """One party's shares of a random ``r``, ``r >> f`` and ``r``'s top bit."""

    party_id: int
    r: np.ndarray
    r_high: np.ndarray
    r_msb: np.ndarray


class Dealer:
    """Trusted dealer producing single-use correlated randomness."""

    def __init__(self, seed=None, codec: FixedPointCodec = FixedPointCodec()):
        self.rng = np.random.default_rng(seed)
        self.codec = codec
        self.issued = 0

    def _split(self, value):
        s1, s2 = make_shares(value, self.rng, self.codec)
        return s1.payload, s2.payload

    def triple(self, kind: str, a_shape, b_shape):
        if kind not in ("elementwise", "matmul"):
            raise ValueError(f"unknown triple kind {kind!r}")
        codec = self.codec
        a = random_ring(self.rng, a_shape, codec)
        b = random_ring(self.rng, b_shape, codec)
        c = codec.wrap(_ring_product(kind, a, b))
        (a1, a2), (b1, b2), (c1, c2) = self._split(a), self._split(b), self._split(c)
        self.issued += 1
        return BeaverTriple(1, kind, a1, b1, c1), BeaverTriple(2, kind, a2, b2, c2)

    def matvec_triple(self, m: int, n: int):
        return self.triple("matmul", (m, n), (n,))

    def matmul_triple(self, m: int, n: int, k: int):
        return self.triple("matmul", (m, n), (n, k))

    def truncation_pair(self, shape):
        codec = self.codec
        r = random_ring(self.rng, shape, codec)
        r_high = r >> np.uint64(codec.frac_bits)
        r_msb = r >> np.uint64(codec.ring_bits - 1)
        (r1, r2), (h1, h2), (m1, m2) = self._split(r), self._split(r_high), self._split(r_msb)
        self.issued += 1
        return TruncationPair(1, r1, h1, m1), TruncationPair(2, r2, h2, m2)


def dealer_gen_triples(kind: str, a_shape, b_shape, count: int, rng=None,
                       codec: FixedPointCodec = FixedPointCodec()):
    """Pre-generate ``count`` triples; returns per-party pools."""
    dealer = Dealer(rng, codec)
    pool1, pool2 = TriplePool(1), TriplePool(2)
    for _ in range(count):
        t1, t2 = dealer.triple(kind, a_shape, b_shape)
        pool1.put(t1)
        pool2.put(t2)
    return pool1, pool2


class TriplePool:
    """FIFO of one party's correlated randomness; every item is handed out once."""

    def __init__(self, party_id: int):
        self.party_id = party_id
        self._items = []
        self._used = set()

    def __len__(self):
        return len(self._items)

    def put(self, item):
        if item.party_id != self.party_id:
            raise ValueError("share belongs to the other party")
        self._items.append(item)

    def take(self):
        if not self._items:
            raise ProtocolError(f"party {self.party_id}: correlated randomness exhausted, regenerate the pool")
        item = self._items.pop(0)
        self._used.add(id(item))
        return item

    def check_unused(self, item):
        if id(item) in self._used:
            raise ProtocolError("Beaver triple reuse detected")


# ---------------------------------------------------------------------------
# Per-party protocol steps

def beaver_mask_step(x: np.ndarray, y: np.ndarray, triple: BeaverTriple, codec: FixedPointCodec):
    """Masked values this party opens: ``(x - a, y - b)``."""
    if x.shape != triple.a.shape or y.shape != triple.b.shape:
        raise ProtocolError(f"triple shape {triple.a.shape}/{triple.b.shape} does not fit operands {x.shape}/{y.shape}")
    return codec.wrap(x - triple.a), codec.wrap(y - triple.b)


def beaver_product_step(party_id: int, e: np.ndarray, f: np.ndarray, triple: BeaverTriple,
                        codec: FixedPointCodec) -> np.ndarray:
    """Share of ``x·y`` (at scale ``2^{2f}``) from the opened masks ``e, f``."""
    prod = lambda u, v: _ring_product(triple.kind, u, v)
    z = triple.c + prod(e, triple.b) + prod(triple.a, f)
    if party_id == 1:
        z = z + prod(e, f)
    return codec.wrap(z)


def truncation_mask_step(party_id: int, z: np.ndarray, pair: TruncationPair, codec: FixedPointCodec) -> np.ndarray:
    """Opened value ``z + 2^{k-2} + r``; the offset makes the secret non-negative."""
    out = z + pair.r
    if party_id == 1:
        out = out + np.uint64(1 << (codec.ring_bits - 2))
    return codec.wrap(out)


def truncation_finish_step(party_id: int, c: np.ndarray, pair: TruncationPair, codec: FixedPointCodec) -> np.ndarray:
    """Share of ``z >> f`` given the opened ``c``.

    ``z' + r`` wraps past the modulus exactly when ``r`` has its top bit set
    and ``c`` does not, because ``z' < 2^{k-1}``.  The low-bit borrow is not
    corrected, so results may be one unit in the last place low.
    """
    k, f = codec.ring_bits, codec.frac_bits
    c = codec.wrap(c)
    c_msb = c >> np.uint64(k - 1)
    wrap = (np.uint64(1) - c_msb) * pair.r_msb
    t = wrap * np.uint64(1 << (k - f)) if k - f < 64 else np.zeros_like(c)
    t = t - pair.r_high
    if party_id == 1:
        t = t + (c >> np.uint64(f)) - np.uint64(1 << (k - 2 - f))
    return codec.wrap(t)


# ---------------------------------------------------------------------------
# Lockstep two-party simulation

@dataclass
class Transcript:
    """Counts what each party sends; ``opened`` lists (label, bytes) per open."""

    sent: dict = field(default_factory=lambda: {1: 0, 2: 0})
    opened: list = field(default_factory=list)

    def record(self, label: str, party_id: int, array: np.ndarray, codec: FixedPointCodec):
        nbytes = int(array.size) * codec.element_bytes
        self.sent[party_id] += nbytes
        self.opened.append((label, party_id, nbytes))


class LocalPair:
    """Both parties of the sharing protocols, run step by step in one thread."""

    def __init__(self, codec: FixedPointCodec = FixedPointCodec(), seed=None, dealer_seed=None):
        self.codec = codec
        self.rng = np.random.default_rng(seed)
        self.dealer = Dealer(dealer_seed, codec)
        self.transcript = Transcript()

    def share(self, x) -> tuple[Share, Share]:
        return make_shares(self.codec.encode(x), self.rng, self.codec)

    def open(self, x: tuple[Share, Share], label: str = "open") -> np.ndarray:
        a, b = x
        self.transcript.record(label, 1, a.payload, self.codec)
        self.transcript.record(label, 2, b.payload, self.codec)
        return self.codec.decode(reconstruct(a, b, self.codec))

    def add(self, x, y):
        return mpc_add(x[0], y[0], self.codec), mpc_add(x[1], y[1], self.codec)

    def _multiply(self, kind, x, y, t1, t2):
        codec = self.codec
        e1, f1 = beaver_mask_step(x[0].payload, y[0].payload, t1, codec)
        e2, f2 = beaver_mask_step(x[1].payload, y[1].payload, t2, codec)
        for label, party, arr in (("beaver-e", 1, e1), ("beaver-f", 1, f1), ("beaver-e", 2, e2), ("beaver-f", 2, f2)):
            self.transcript.record(label, party, arr, codec)
        e, f = codec.wrap(e1 + e2), codec.wrap(f1 + f2)
        z1 = beaver_product_step(1, e, f, t1, codec)
        z2 = beaver_product_step(2, e, f, t2, codec)
        p1, p2 = self.dealer.truncation_pair(z1.shape)
        c1 = truncation_mask_step(1, z1, p1, codec)
        c2 = truncation_mask_step(2, z2, p2, codec)
        self.transcript.record("trunc", 1, c1, codec)
        self.transcript.record("trunc", 2, c2, codec)
        c = codec.wrap(c1 + c2)
        return (Share(1, truncation_finish_step(1, c, p1, codec)),
                Share(2, truncation_finish_step(2, c, p2, codec)))

    def mul(self, x, y):
        t1, t2 = self.dealer.triple("elementwise", x[0].shape, y[0].shape)
        return self._multiply("elementwise", x, y, t1, t2)

    def matvec(self, S, v):
        m, n = S[0].shape
        t1, t2 = self.dealer.matvec_triple(m, n)
        return self._multiply("matmul", S, v, t1, t2)

    def matmul(self, A, B):
        m, n = A[0].shape
        t1, t2 = self.dealer.matmul_triple(m, n, B[0].shape[1])
        return self._multiply("matmul", A, B, t1, t2)


def mpc_mul_matvec(S_shares, v_shares, pair: LocalPair):
    return pair.matvec(S_shares, v_shares)


def mpc_matmul(A_shares, B_shares, pair: LocalPair):
    return pair.matmul(A_shares, B_shares)


def product_error_bound(x, y, codec: FixedPointCodec = FixedPointCodec(), kind: str = "elementwise") -> np.ndarray:
    """Worst-case decoding error of one secure product.

    Input rounding contributes ``2^{-f-1}(|x||δy| + ...)`` per term plus one
    truncation ulp; ``kind="matmul"`` sums the per-term contributions.
    """
    ulp = 2.0 ** -codec.frac_bits
    x = np.abs(np.asarray(x, dtype=np.float64))
    y = np.abs(np.asarray(y, dtype=np.float64))
    if kind == "elementwise":
        return ulp * (x + y + 1.0)
    n = x.shape[-1]
    # Σ_j (|x_j| + |y_j|)·ulp/2 + n·ulp²/4 rounding cross terms + 1 ulp truncation
    return 0.5 * ulp * (x @ np.ones_like(y) + np.ones_like(x) @ y) + n * ulp * ulp + ulp
