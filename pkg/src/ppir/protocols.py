"""Two-party orchestration of the products that mix both images.

Party 1 holds the moving image and drives the registration; party 2 holds
the fixed image and runs :class:`FixedImageServer` on its own thread.  The
driver sees a session object with a small request API:

* ``set_level(scale, sigma)``: both sides move to a pyramid level;
* ``matvec(rows, indices)``: ``rows @ J[indices]`` (``R = Sᵀ J`` and friends);
* ``target_energy(indices)``: ``Σ J²`` over the samples (a disclosed scalar);
* ``joint_pdf(A, indices, bins)`` and ``joint_pdf_derivative(C, indices, bins)``.

:class:`ClearSession` answers the same calls without any cryptography, so
the optimizer has a single code path.

Sample indices travel to party 2 in the clear for the MPC and FHE-v2
backends; FHE-v1 instead scatters the sampled rows over the whole image.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from . import mpc
from .errors import HandshakeError, ProtocolError
from .he import CkksContext, Ciphertext, HeParams
from .image import Image, downsample, gaussian_blur
from .mi import ParzenAxis, histogram_matrix_b
from .transport import (Endpoint, FrameType, Phase, pack_share, transport_pair,
                        unpack_share)

BACKENDS = ("clear", "mpc", "fhe-v1", "fhe-v2")


@dataclass(frozen=True)
class PartitionPlan:
    """Packing of a length-``n`` vector into ``k`` sub-arrays of ``D`` values.

    Each sub-array occupies a power-of-two slot block; a non-power-of-two
    ``D`` is zero-padded up to the block size.
    """

    D: int = 128
    layout: str = "v1"

    def __post_init__(self):
        if self.D < 1:
            raise ValueError(f"block size must be positive, got {self.D}")
        if self.layout not in ("v1", "v2"):
            raise ValueError(f"unknown layout {self.layout!r}")

    @property
    def block(self) -> int:
        return 1 << (self.D - 1).bit_length()

    def partitions(self, n: int) -> int:
        return -(-n // self.D)

    def padded_length(self, n: int) -> int:
        return self.partitions(n) * self.D

    def split(self, vector) -> np.ndarray:
        """(k, block) array of zero-padded sub-arrays."""
        v = np.asarray(vector, dtype=np.float64)
        k = self.partitions(v.size)
        out = np.zeros((k, self.block))
        padded = np.zeros(k * self.D)
        padded[:v.size] = v
        out[:, :self.D] = padded.reshape(k, self.D)
        return out

    def split_half(self, n: int) -> int:
        """v2: length of each of the two halves, a multiple of ``D``."""
        return self.partitions(-(-n // 2)) * self.D


@dataclass(frozen=True)
class SessionConfig:
    backend: str = "mpc"
    frac_bits: int = 16
    ring_bits: int = 64
    he: HeParams = field(default_factory=HeParams)
    block_size: int = 128
    mask_bits: int = 24
    seed: int | None = None
    dealer_seed: int | None = None
    timeout: float = 300.0
    keep_frames: bool = False

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; expected one of {BACKENDS}")

    @property
    def codec(self) -> mpc.FixedPointCodec:
        return mpc.FixedPointCodec(self.frac_bits, self.ring_bits)

    @property
    def plan(self) -> PartitionPlan:
        return PartitionPlan(self.block_size, "v2" if self.backend == "fhe-v2" else "v1")

    def handshake(self) -> dict:
        return {"backend": self.backend, "frac_bits": self.frac_bits, "ring_bits": self.ring_bits,
                "ring_degree": self.he.ring_degree, "scale_bits": self.he.scale_bits,
                "block_size": self.block_size}


def value_bound(image: Image) -> float:
    """Public power-of-two bound on ``|J|``; only its bit length is revealed."""
    m = float(np.max(np.abs(image.data)))
    return float(2.0 ** math.ceil(math.log2(m))) if m > 0 else 1.0


def prescale_shift(X: np.ndarray, y_bound: float, budget_bits: float) -> int:
    """Power-of-two shift keeping ``|X @ y| < 2^{budget_bits}``."""
    X = np.asarray(X, dtype=np.float64)
    worst = float(np.max(np.sum(np.abs(X), axis=-1))) * y_bound if X.size else 0.0
    if worst <= 0:
        return 0
    return max(0, math.ceil(math.log2(worst)) - int(budget_bits))


def level_image(J: Image, scale: int, sigma: float) -> Image:
    return gaussian_blur(downsample(J, scale), sigma)


def fixed_axis(J_level: Image, bins: int) -> ParzenAxis:
    lo, hi = J_level.intensity_range
    if hi <= lo:
        hi = lo + 1.0
    return ParzenAxis.box(lo, hi, bins)


# ---------------------------------------------------------------------------
# Trusted dealer shared by the two in-process actors

class DealerService:
    """Hands each party its half of the correlated randomness for operation
    ``op_id``.  Items are created on first request and destroyed once both
    halves are taken, so nothing can be drawn twice."""

    def __init__(self, seed=None, codec: mpc.FixedPointCodec = mpc.FixedPointCodec()):
        self.dealer = mpc.Dealer(seed, codec)
        self._lock = threading.Lock()
        self._pending = {}
        self._spent = set()

    def _get(self, party_id, key, make):
        with self._lock:
            if (key, party_id) in self._spent:
                raise ProtocolError(f"party {party_id}: correlated randomness {key} already used")
            if key not in self._pending:
                self._pending[key] = make()
            pair = self._pending[key]
            self._spent.add((key, party_id))
            if (key, 3 - party_id) in self._spent:
                del self._pending[key]
            return pair[party_id - 1]

    def triple(self, party_id, op_id, a_shape, b_shape):
        return self._get(party_id, ("triple", op_id), lambda: self.dealer.triple("matmul", a_shape, b_shape))

    def truncation(self, party_id, op_id, shape):
        return self._get(party_id, ("trunc", op_id), lambda: self.dealer.truncation_pair(shape))


# ---------------------------------------------------------------------------
# MPC product, one party's half

def mpc_product_party(ep: Endpoint, party_id: int, codec: mpc.FixedPointCodec, rng, dealer: DealerService,
                      op_id: int, operand, x_shape, y_shape):
    """Secure ``X @ Y`` with ``X`` at party 1 and ``Y`` at party 2.

    Rounds: exchange input shares, open Beaver masks, open the truncation
    mask, then party 2 sends its result share to party 1.  Both parties send
    before receiving in each round.
    """
    elem = codec.element_bytes
    mine, theirs = mpc.make_shares(codec.encode(operand), rng, codec)
    # party 1 keeps share 1 of X; party 2 keeps share 2 of Y
    keep, send = (mine, theirs) if party_id == 1 else (theirs, mine)
    ep.send(FrameType.SHARE, pack_share(send.payload, FrameType.SHARE, ep.send_round, elem))
    _, buf = ep.recv(FrameType.SHARE)
    peer = unpack_share(buf)
    x_i, y_i = (keep.payload, peer) if party_id == 1 else (peer, keep.payload)
    if x_i.shape != tuple(x_shape) or y_i.shape != tuple(y_shape):
        raise ProtocolError(f"party {party_id}: operand shapes {x_i.shape}, {y_i.shape} disagree with {x_shape}, {y_shape}")

    triple = dealer.triple(party_id, op_id, x_shape, y_shape)
    e_i, f_i = mpc.beaver_mask_step(x_i, y_i, triple, codec)
    ep.send(FrameType.MASKED_OPEN, pack_share(e_i, FrameType.MASKED_OPEN, ep.send_round, elem))
    ep.send(FrameType.MASKED_OPEN, pack_share(f_i, FrameType.MASKED_OPEN, ep.send_round, elem))
    e_p = unpack_share(ep.recv(FrameType.MASKED_OPEN)[1])
    f_p = unpack_share(ep.recv(FrameType.MASKED_OPEN)[1])
    z_i = mpc.beaver_product_step(party_id, codec.wrap(e_i + e_p), codec.wrap(f_i + f_p), triple, codec)

    pair = dealer.truncation(party_id, op_id, z_i.shape)
    c_i = mpc.truncation_mask_step(party_id, z_i, pair, codec)
    ep.send(FrameType.TRUNC_OPEN, pack_share(c_i, FrameType.TRUNC_OPEN, ep.send_round, elem))
    c_p = unpack_share(ep.recv(FrameType.TRUNC_OPEN)[1])
    t_i = mpc.truncation_finish_step(party_id, codec.wrap(c_i + c_p), pair, codec)

    if party_id == 2:
        ep.send(FrameType.RESULT_SHARE, pack_share(t_i, FrameType.RESULT_SHARE, ep.send_round, elem))
        return None
    t_p = unpack_share(ep.recv(FrameType.RESULT_SHARE)[1])
    return codec.decode(codec.wrap(t_i + t_p))


def mpc_matvec_bytes(m: int, n: int, codec: mpc.FixedPointCodec = mpc.FixedPointCodec()) -> dict:
    """Closed-form frame bytes of one secure ``(m, n) @ (n,)`` per direction."""
    from .transport import FRAME_HEADER, share_wire_size
    e = codec.element_bytes
    frame = FRAME_HEADER.size
    common = (frame + share_wire_size((m, n), e) + frame + share_wire_size((n, 1), e)
              + frame + share_wire_size((m, 1), e))
    return {1: frame + share_wire_size((m, n), e) + common,
            2: frame + share_wire_size((n, 1), e) + common + frame + share_wire_size((m, 1), e)}


# ---------------------------------------------------------------------------
# FHE helpers

def v1_encrypt_partitions(ctx: CkksContext, plan: PartitionPlan, vector, keys, rng) -> Ciphertext:
    """Sub-arrays of ``vector`` tiled across all slot blocks, one ciphertext each."""
    parts = plan.split(vector)
    copies = ctx.slots // plan.block
    return ctx.encrypt_vector(np.tile(parts, (1, copies)), keys, rng)


def v1_masked_product(ctx: CkksContext, plan: PartitionPlan, X, parts: Ciphertext, keys, rng,
                      mask_bits: int) -> tuple[Ciphertext, int]:
    """``X @ v`` against the encrypted partitions of ``v``.

    Per partition and row group: one plaintext product and a rotate-and-sum
    over the block; partitions are then added.  Every slot that is not an
    output slot gets a fresh random mask before the ciphertext leaves.
    Returns the ciphertext with one group per batch entry and the number of
    rows per group.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    m, n = X.shape
    k = parts.batch_shape[0]
    if plan.partitions(n) != k:
        raise ProtocolError(f"row length {n} needs {plan.partitions(n)} partitions, peer encrypted {k}")
    block, D = plan.block, plan.D
    per_group = ctx.slots // block
    groups = -(-m // per_group)
    padded = np.zeros((groups * per_group, k * D))
    padded[:m, :n] = X
    mult = np.zeros((groups, k, per_group, block))
    mult[..., :D] = padded.reshape(groups, per_group, k, D).transpose(0, 2, 1, 3)
    pt = ctx.encode_multiplier(mult.reshape(groups, k, ctx.slots), parts.level)
    prod = ctx.mul_plain(parts, pt)
    summed = ctx.sum_batch(ctx.rotate_and_sum(prod, block, keys), axis=1)
    noise = rng.uniform(-1.0, 1.0, size=(groups, per_group, block)) * 2.0 ** mask_bits
    noise[..., 0] = 0.0
    mask = ctx.encode(noise.reshape(groups, ctx.slots), scale=summed.scale, level=summed.level)
    return ctx.add(summed, mask), per_group


def v1_extract(values: np.ndarray, plan: PartitionPlan, per_group: int, m: int) -> np.ndarray:
    return values[:, ::plan.block][:, :per_group].reshape(-1)[:m]


def _chunk(vector: np.ndarray, slots: int) -> np.ndarray:
    count = max(1, -(-vector.size // slots))
    out = np.zeros(count * slots)
    out[:vector.size] = vector
    return out.reshape(count, slots)


# ---------------------------------------------------------------------------
# Party 2

class FixedImageServer:
    """Party 2: answers requests about the fixed image ``J``."""

    def __init__(self, J: Image, config: SessionConfig, endpoint: Endpoint, dealer: DealerService | None):
        self.J = J
        self.config = config
        self.ep = endpoint
        self.dealer = dealer
        self.codec = config.codec
        self.rng = np.random.default_rng(None if config.seed is None else [config.seed, 2])
        self.level = J  # full resolution until the driver picks a level
        self.op_id = 0
        self.error: BaseException | None = None
        self.ctx = self.keys = self.peer_keys = None

    # handshake and dispatch -------------------------------------------
    def _handshake(self):
        ep = self.ep
        ep.phase = Phase.HANDSHAKE
        meta, _ = ep.recv_message(FrameType.HANDSHAKE)
        mine = self.config.handshake()
        for key, value in mine.items():
            if meta.get(key) != value:
                msg = f"{key}: party1={meta.get(key)} party2={value}"
                ep.send_message(FrameType.ERROR, {"kind": "handshake", "message": msg})
                raise HandshakeError(msg)
        ep.send_message(FrameType.HANDSHAKE, {"ok": True, "value_bound": value_bound(self.J),
                                              "dims": list(self.J.dims)})
        backend = self.config.backend
        if backend.startswith("fhe"):
            self.ctx = CkksContext(self.config.he)
            steps = None if backend == "fhe-v1" else []
            self.keys = self.ctx.keygen(self.rng, rotation_steps=steps)
            ep.send(FrameType.PUBLIC_KEY, self.ctx.serialize_keys(self.keys.keys))
            if backend == "fhe-v2":
                _, buf = ep.recv(FrameType.PUBLIC_KEY)
                self.peer_keys = self.ctx.deserialize_keys(buf)

    def serve(self):
        try:
            self._handshake()
            while True:
                self.ep.phase = Phase.CONTROL
                meta, arrays = self.ep.recv_message(FrameType.CONTROL, FrameType.CLOSE)
                op = meta.get("op")
                if op == "close":
                    return
                handler = getattr(self, f"_op_{op}", None)
                if handler is None:
                    raise ProtocolError(f"unknown request {op!r}")
                handler(meta, arrays)
        except BaseException as exc:  # report to the driver, then stop
            self.error = exc
            try:
                if not isinstance(exc, HandshakeError):
                    self.ep.send_message(FrameType.ERROR, {"kind": "protocol", "message": f"{type(exc).__name__}: {exc}"})
            except Exception:
                pass

    def _values(self, indices):
        J = self.level.data.ravel()
        if indices is None:
            return J
        if indices.size and (indices.min() < 0 or indices.max() >= J.size):
            raise ProtocolError("sample index out of range")
        return J[indices]

    # requests ------------------------------------------------------------
    def _op_set_level(self, meta, arrays):
        self.level = level_image(self.J, meta["scale"], meta["sigma"])
        if self.config.backend == "fhe-v1":
            self.ep.phase = Phase.SETUP
            parts = v1_encrypt_partitions(self.ctx, self.config.plan, self.level.data.ravel(),
                                          self.keys.keys, self.rng)
            self.ep.send(FrameType.CIPHERTEXT, self.ctx.serialize(parts))

    def _op_energy(self, meta, arrays):
        self.ep.phase = Phase.ENERGY
        y = self._values(arrays[0] if arrays else None)
        self.ep.send_message(FrameType.DISCLOSURE, {"energy": float(y @ y)})

    def _op_matvec(self, meta, arrays):
        self.ep.phase = Phase.MATVEC
        indices = arrays[0] if arrays else None
        self._product(meta, self._values(indices)[:, None] if self.config.backend == "mpc" else self._values(indices))

    def _op_histogram(self, meta, arrays):
        self.ep.phase = Phase.MATMUL
        indices = arrays[0] if arrays else None
        B = histogram_matrix_b(self._values(indices), fixed_axis(self.level, meta["bins"]))
        self._product(meta, B)

    def _product(self, meta, Y):
        backend = self.config.backend
        m, n = meta["m"], meta["n"]
        if backend == "mpc":
            self.op_id += 1
            mpc_product_party(self.ep, 2, self.codec, self.rng, self.dealer, self.op_id, Y,
                              (m, n), Y.shape)
            return
        columns = [Y] if Y.ndim == 1 else list(Y.T)
        for col in columns:
            if backend == "fhe-v1":
                self._v1_product(col, meta)
            else:
                self._v2_product(col, m)

    def _v1_product(self, y, meta):
        ctx, ep = self.ctx, self.ep
        if not meta.get("cached"):
            parts = v1_encrypt_partitions(ctx, self.config.plan, y, self.keys.keys, self.rng)
            ep.send(FrameType.CIPHERTEXT, ctx.serialize(parts))
        _, buf = ep.recv(FrameType.CIPHERTEXT)
        values = ctx.decrypt_vector(ctx.deserialize(buf), self.keys)
        per_group = ctx.slots // self.config.plan.block
        R = v1_extract(values, self.config.plan, per_group, meta["m"])
        ep.send_message(FrameType.CLEAR_RESULT, {}, [R])

    def _v2_product(self, y, m):
        ctx, ep, plan = self.ctx, self.ep, self.config.plan
        h = plan.split_half(y.size)
        halves = np.zeros(2 * h)
        halves[:y.size] = y
        j1, j2 = halves[:h], halves[h:]
        # replicate each half once per parameter row to line up with the flattened matrix
        ep.send(FrameType.CIPHERTEXT, ctx.serialize(
            ctx.encrypt_vector(_chunk(np.tile(j1, m), ctx.slots), self.keys.keys, self.rng)))
        _, buf = ep.recv(FrameType.CIPHERTEXT)
        s2 = ctx.deserialize(buf)
        j2_rep = _chunk(np.tile(j2, m), ctx.slots)
        if s2.batch_shape != (j2_rep.shape[0],):
            raise ProtocolError(f"replicated layout mismatch: expected {j2_rep.shape[0]} ciphertexts, got {s2.batch_shape}")
        mask = self.rng.uniform(-1.0, 1.0, size=j2_rep.shape) * 2.0 ** self.config.mask_bits
        prod = ctx.mul_plain(s2, ctx.encode_multiplier(j2_rep, s2.level))
        ep.send(FrameType.CIPHERTEXT, ctx.serialize(ctx.add(prod, ctx.encode(mask, prod.scale, prod.level))))
        _, buf = ep.recv(FrameType.CIPHERTEXT)
        w1 = ctx.decrypt_vector(ctx.deserialize(buf), self.keys).reshape(-1)[:m * h].reshape(m, h)
        mask_sums = mask.reshape(-1)[:m * h].reshape(m, h).sum(axis=1)
        ep.send_message(FrameType.CLEAR_RESULT, {}, [w1.sum(axis=1), mask_sums])


# ---------------------------------------------------------------------------
# Party 1

class SecureSession:
    """Party 1's handle on a running two-party session."""

    def __init__(self, config: SessionConfig, endpoint: Endpoint, dealer: DealerService | None,
                 server: FixedImageServer | None = None, thread: threading.Thread | None = None):
        self.config = config
        self.backend = config.backend
        self.ep = endpoint
        self.ledger = endpoint.ledger
        self.dealer = dealer
        self.codec = config.codec
        self.rng = np.random.default_rng(None if config.seed is None else [config.seed, 1])
        self.server = server
        self.thread = thread
        self.op_id = 0
        self.ctx = self.peer_keys = self.keys = None
        self.parts = None
        self.level_dims = None
        self.closed = False
        self._handshake()

    def _handshake(self):
        ep = self.ep
        ep.phase = Phase.HANDSHAKE
        with self.ledger.phase("handshake"):
            ep.send_message(FrameType.HANDSHAKE, self.config.handshake())
            meta, _ = ep.recv_message(FrameType.HANDSHAKE)
            self.value_bound = float(meta["value_bound"])
            self.target_dims = tuple(meta["dims"])
            if self.backend.startswith("fhe"):
                self.ctx = CkksContext(self.config.he)
                _, buf = ep.recv(FrameType.PUBLIC_KEY)
                self.peer_keys = self.ctx.deserialize_keys(buf)
                if self.backend == "fhe-v2":
                    self.keys = self.ctx.keygen(self.rng, rotation_steps=[])
                    ep.send(FrameType.PUBLIC_KEY, self.ctx.serialize_keys(self.keys.keys))

    def _control(self, op, arrays=(), **meta):
        self.ep.send_message(FrameType.CONTROL, {"op": op, **meta}, arrays, phase=Phase.CONTROL)

    # public API ----------------------------------------------------------
    def set_level(self, scale: int, sigma: float, dims=None):
        self._control("set_level", scale=int(scale), sigma=float(sigma))
        self.level_dims = dims
        if self.backend == "fhe-v1":
            self.ep.phase = Phase.SETUP
            with self.ledger.phase("setup"):
                _, buf = self.ep.recv(FrameType.CIPHERTEXT)
                self.parts = self.ctx.deserialize(buf)

    def target_energy(self, indices=None) -> float:
        self.ep.phase = Phase.ENERGY
        self._control("energy", [] if indices is None else [np.asarray(indices, dtype=np.int64)])
        meta, _ = self.ep.recv_message(FrameType.DISCLOSURE)
        return float(meta["energy"])

    def matvec(self, rows, indices=None) -> np.ndarray:
        """``rows @ J[indices]``."""
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        m, n = rows.shape
        self.ep.phase = Phase.MATVEC
        with self.ledger.phase("matvec"):
            if self.backend == "fhe-v1":
                if self.parts is None:
                    raise ProtocolError("fhe-v1 needs set_level before the first product")
                # no indices leave party 1: the sampled rows are scattered over the full level
                full = self._scatter(rows, indices)
                self._control("matvec", m=m, n=full.shape[1], cached=True)
                return self._v1(full, self.parts, self.value_bound)
            idx = [] if indices is None else [np.asarray(indices, dtype=np.int64)]
            self._control("matvec", idx, m=m, n=n)
            return self._product(rows, self.value_bound, ncols=None)

    def joint_pdf(self, A, indices, bins: int) -> np.ndarray:
        """``P = Aᵀ B / n`` with ``B`` the fixed image's box-window histogram."""
        A = np.asarray(A, dtype=np.float64)
        n = A.shape[0]
        out = self._histogram_product(A.T, indices, bins)
        return out / n

    def joint_pdf_derivative(self, C, indices, bins: int) -> np.ndarray:
        """``P'[t, r, p] = -(1/n) Σ_k B[k, t] C[k, r, p]``."""
        C = np.asarray(C, dtype=np.float64)
        n, nr, npar = C.shape
        out = self._histogram_product(C.reshape(n, nr * npar).T, indices, bins)
        return -(out.T.reshape(bins, nr, npar)) / n

    def close(self):
        if self.closed:
            return
        self.closed = True
        try:
            self.ep.send_message(FrameType.CLOSE, {"op": "close"}, phase=Phase.CONTROL)
        except Exception:
            pass
        if self.thread is not None:
            self.thread.join(timeout=self.config.timeout)
        self.ep.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def report(self) -> dict:
        return ledger_report(self)

    def he_counters(self) -> dict:
        """Homomorphic operation counts of both parties (zeros without FHE)."""
        out = {}
        for name, ctx in (("party1", self.ctx), ("party2", self.server.ctx if self.server else None)):
            out[name] = ctx.counters.as_dict() if ctx is not None else {}
        return out

    # internals -----------------------------------------------------------
    def _scatter(self, rows, indices):
        total = int(np.prod(self.level_dims)) if self.level_dims is not None else None
        if indices is None:
            return rows
        if total is None:
            raise ProtocolError("set_level must be called with the level dimensions before sampled products")
        full = np.zeros((rows.shape[0], total))
        full[:, np.asarray(indices, dtype=np.int64)] = rows
        return full

    def _histogram_product(self, X, indices, bins):
        m, n = X.shape
        self.ep.phase = Phase.MATMUL
        with self.ledger.phase("matmul"):
            idx = [] if indices is None else [np.asarray(indices, dtype=np.int64)]
            self._control("histogram", idx, m=m, n=n, bins=int(bins))
            return self._product(X, 1.0, ncols=bins)

    def _product(self, X, y_bound, ncols):
        """``X @ Y`` with ``Y`` at party 2: a vector when ``ncols`` is None."""
        m, n = X.shape
        if self.backend == "mpc":
            budget = self.codec.ring_bits - 3 - 2 * self.codec.frac_bits
            shift = prescale_shift(X, y_bound, budget)
            self.op_id += 1
            y_shape = (n, 1) if ncols is None else (n, ncols)
            out = mpc_product_party(self.ep, 1, self.codec, self.rng, self.dealer, self.op_id,
                                    X * 2.0 ** -shift, (m, n), y_shape) * 2.0 ** shift
            return out[:, 0] if ncols is None else out
        cols = []
        for _ in range(1 if ncols is None else ncols):
            if self.backend == "fhe-v1":
                _, buf = self.ep.recv(FrameType.CIPHERTEXT)
                cols.append(self._v1(X, self.ctx.deserialize(buf), y_bound))
            else:
                cols.append(self._v2(X, y_bound))
        return cols[0] if ncols is None else np.stack(cols, axis=1)

    def _v1(self, X, parts, y_bound):
        shift = prescale_shift(X, y_bound, 29)
        ct, _ = v1_masked_product(self.ctx, self.config.plan, X * 2.0 ** -shift, parts, self.peer_keys,
                                  self.rng, self.config.mask_bits)
        self.ep.send(FrameType.CIPHERTEXT, self.ctx.serialize(ct))
        _, (R,) = self.ep.recv_message(FrameType.CLEAR_RESULT)
        return R * 2.0 ** shift

    def _v2(self, X, y_bound):
        ctx, ep, plan = self.ctx, self.ep, self.config.plan
        m, n = X.shape
        shift = prescale_shift(X[:, None, :], y_bound, 29)  # per slot, not per row
        Xs = X * 2.0 ** -shift
        h = plan.split_half(n)
        padded = np.zeros((m, 2 * h))
        padded[:, :n] = Xs
        s1, s2 = padded[:, :h], padded[:, h:]
        ep.send(FrameType.CIPHERTEXT, ctx.serialize(
            ctx.encrypt_vector(_chunk(s2.reshape(-1), ctx.slots), self.keys.keys, self.rng)))
        _, buf = ep.recv(FrameType.CIPHERTEXT)
        j1 = ctx.deserialize(buf)
        s1_flat = _chunk(s1.reshape(-1), ctx.slots)
        if j1.batch_shape != (s1_flat.shape[0],):
            raise ProtocolError(f"replicated layout mismatch: expected {s1_flat.shape[0]} ciphertexts, got {j1.batch_shape}")
        mask = self.rng.uniform(-1.0, 1.0, size=s1_flat.shape) * 2.0 ** self.config.mask_bits
        prod = ctx.mul_plain(j1, ctx.encode_multiplier(s1_flat, j1.level))
        ep.send(FrameType.CIPHERTEXT, ctx.serialize(ctx.add(prod, ctx.encode(mask, prod.scale, prod.level))))
        _, buf = ep.recv(FrameType.CIPHERTEXT)
        w2 = ctx.decrypt_vector(ctx.deserialize(buf), self.keys).reshape(-1)[:m * h].reshape(m, h)
        _, (u1, m2) = ep.recv_message(FrameType.CLEAR_RESULT)
        m1 = mask.reshape(-1)[:m * h].reshape(m, h).sum(axis=1)
        return ((u1 - m1) + (w2.sum(axis=1) - m2)) * 2.0 ** shift


# ---------------------------------------------------------------------------
# Cleartext stand-in

class ClearSession:
    """Same API as :class:`SecureSession`, computed directly on ``J``."""

    backend = "clear"

    def __init__(self, J: Image):
        from .transport import Ledger

        self.J = J
        self.level = J
        self.level_dims = None
        self.ledger = Ledger(1)
        self.value_bound = value_bound(J)

    def set_level(self, scale, sigma, dims=None):
        self.level = level_image(self.J, scale, sigma)

    def _values(self, indices):
        J = self.level.data.ravel()
        return J if indices is None else J[np.asarray(indices, dtype=np.int64)]

    def target_energy(self, indices=None):
        y = self._values(indices)
        return float(y @ y)

    def matvec(self, rows, indices=None):
        return np.atleast_2d(np.asarray(rows, dtype=np.float64)) @ self._values(indices)

    def _B(self, indices, bins):
        return histogram_matrix_b(self._values(indices), fixed_axis(self.level, bins))

    def joint_pdf(self, A, indices, bins):
        A = np.asarray(A, dtype=np.float64)
        return A.T @ self._B(indices, bins) / A.shape[0]

    def joint_pdf_derivative(self, C, indices, bins):
        C = np.asarray(C, dtype=np.float64)
        n, nr, npar = C.shape
        out = self._B(indices, bins).T @ C.reshape(n, nr * npar)
        return -out.reshape(bins, nr, npar) / n

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        pass

    def report(self):
        return {}

    def he_counters(self):
        return {"party1": {}, "party2": {}}


# ---------------------------------------------------------------------------
# Session setup and reporting

def establish_session(config: SessionConfig, J: Image, transport: str = "loopback",
                      session_id: int = 1, party2_config: SessionConfig | None = None):
    """Start party 2 on a thread and return party 1's session.

    ``party2_config`` lets tests give the two sides different parameters.
    """
    if config.backend == "clear":
        return ClearSession(J)
    t1, t2 = transport_pair(transport)
    ep1 = Endpoint(1, t1, session_id, config.timeout, config.keep_frames)
    cfg2 = party2_config or config
    ep2 = Endpoint(2, t2, session_id, cfg2.timeout, cfg2.keep_frames)
    dealer = DealerService(config.dealer_seed, config.codec) if config.backend == "mpc" else None
    server = FixedImageServer(J, cfg2, ep2, dealer)
    thread = threading.Thread(target=server.serve, name=f"party2-session{session_id}", daemon=True)
    thread.start()
    try:
        return SecureSession(config, ep1, dealer, server, thread)
    except BaseException:
        thread.join(timeout=5)
        ep1.close()
        if isinstance(server.error, HandshakeError):
            raise server.error from None
        raise


def ledger_report(session) -> dict:
    """``{party: {phase: (bytes sent, bytes received, seconds)}}``."""
    if isinstance(session, ClearSession) or session.backend == "clear":
        return {1: {}, 2: {}}
    out = {1: session.ep.ledger.report()}
    out[2] = session.server.ep.ledger.report() if session.server is not None else {}
    return out


def total_bytes(session, party: int = 1, direction: str = "sent") -> int:
    if isinstance(session, ClearSession):
        return 0
    ep = session.ep if party == 1 else session.server.ep
    return ep.ledger.bytes(direction)
