import numpy as np
import pytest

from ppir.errors import HandshakeError, ProtocolError
from ppir.image import Image
from ppir.mi import histogram_matrix_b
from ppir.mpc import FixedPointCodec, product_error_bound
from ppir.protocols import (ClearSession, PartitionPlan, SessionConfig, establish_session, fixed_axis,
                            mpc_matvec_bytes, prescale_shift, total_bytes, value_bound)
from ppir.transport import FRAME_HEADER


def _session(backend, J, **kw):
    return establish_session(SessionConfig(backend, seed=kw.pop("seed", 1), dealer_seed=2, **kw), J)


def _mpc_bound(S, y):
    # no pre-scaling happens at these sizes, so the plain fixed-point bound applies
    return product_error_bound(S, y[:, None], FixedPointCodec(), "matmul")[:, 0]


def test_value_bound_and_prescale():
    assert value_bound(Image(np.array([3.0, -200.0]))) == 256.0
    assert value_bound(Image(np.zeros(3))) == 1.0
    assert prescale_shift(np.ones((2, 4)), 256.0, 20) == 0
    assert prescale_shift(np.ones((2, 1 << 12)), 256.0, 16) == 4


def test_partition_plan():
    plan = PartitionPlan(3)
    assert plan.block == 4 and plan.partitions(7) == 3
    np.testing.assert_array_equal(plan.split(np.arange(1.0, 8.0)),
                                  [[1, 2, 3, 0], [4, 5, 6, 0], [7, 0, 0, 0]])
    assert PartitionPlan(4, "v2").split_half(10) == 8
    with pytest.raises(ValueError):
        PartitionPlan(0)


def test_handshake_mismatch_names_both_values():
    J = Image(np.zeros((4, 4)))
    cfg1 = SessionConfig("mpc", block_size=128)
    cfg2 = SessionConfig("mpc", block_size=256)
    with pytest.raises(HandshakeError, match="party1=128 party2=256"):
        establish_session(cfg1, J, party2_config=cfg2)


def test_mpc_matvec_bytes_match_closed_form():
    rng = np.random.default_rng(0)
    J = Image(rng.uniform(0, 255, (16, 16)))
    S = rng.uniform(-1, 1, (6, 256))
    with _session("mpc", J) as s:
        R = s.matvec(S)
        ledger1, ledger2 = s.ep.ledger, s.server.ep.ledger
        want = mpc_matvec_bytes(6, 256)
        assert ledger1.bytes("sent", "matvec") == want[1]
        assert ledger2.bytes("sent", "matvec") == want[2]
    assert np.all(np.abs(R - S @ J.data.ravel()) <= _mpc_bound(S, J.data.ravel()))


def test_mpc_sampled_matvec_and_energy():
    rng = np.random.default_rng(1)
    J = Image(rng.uniform(0, 255, (12, 12)))
    idx = np.sort(rng.choice(144, 30, replace=False))
    S = rng.uniform(-1, 1, (4, 30))
    with _session("mpc", J) as s:
        s.set_level(1, 0.0)
        y = J.data.ravel()[idx]
        assert np.all(np.abs(s.matvec(S, idx) - S @ y) <= _mpc_bound(S, y))
        assert s.target_energy(idx) == pytest.approx(float(J.data.ravel()[idx] @ J.data.ravel()[idx]))


def test_joint_pdf_secure_matches_clear():
    rng = np.random.default_rng(2)
    J = Image(rng.uniform(0, 100, (10, 10)))
    A = rng.random((100, 8))
    A /= A.sum(axis=1, keepdims=True)
    clear = ClearSession(J)
    clear.set_level(1, 0.0)
    want = clear.joint_pdf(A, None, 6)
    B = histogram_matrix_b(J.data.ravel(), fixed_axis(J, 6))
    np.testing.assert_allclose(want, A.T @ B / 100, atol=1e-15)
    with _session("mpc", J) as s:
        s.set_level(1, 0.0)
        got = s.joint_pdf(A, None, 6)
        C = rng.standard_normal((100, 8, 3))
        dP = s.joint_pdf_derivative(C, None, 6)
    assert got.sum() == pytest.approx(1.0, abs=1e-4)
    np.testing.assert_allclose(got, want, atol=1e-5)
    np.testing.assert_allclose(dP, clear.joint_pdf_derivative(C, None, 6), atol=1e-5)


def test_bad_index_fails_cleanly():
    J = Image(np.ones((4, 4)))
    with _session("mpc", J) as s:
        s.set_level(1, 0.0)
        with pytest.raises(ProtocolError):
            s.matvec(np.ones((1, 2)), np.array([0, 99]))


def test_v1_zero_matrix():
    J = Image(np.random.default_rng(3).uniform(0, 255, (16, 16)))
    with _session("fhe-v1", J) as s:
        s.set_level(1, 0.0, (16, 16))
        assert np.max(np.abs(s.matvec(np.zeros((3, 256))))) <= 1e-3


@pytest.mark.parametrize("backend", ["fhe-v1", "fhe-v2"])
def test_fhe_zero_image(backend):
    S = np.random.default_rng(4).uniform(-1, 1, (3, 256))
    with _session(backend, Image(np.zeros((16, 16)))) as s:
        s.set_level(1, 0.0, (16, 16))
        assert np.max(np.abs(s.matvec(S))) <= 1e-3


def test_v1_requires_level():
    with _session("fhe-v1", Image(np.ones((4, 4)))) as s:
        with pytest.raises(ProtocolError):
            s.matvec(np.ones((1, 16)))


@pytest.mark.parametrize("backend", ["fhe-v1", "fhe-v2"])
def test_fhe_matvec_accuracy(backend):
    rng = np.random.default_rng(4)
    J = Image(rng.uniform(0, 255, (32, 32)))
    S = rng.uniform(-1, 1, (6, 1024))
    with _session(backend, J) as s:
        s.set_level(1, 0.0, (32, 32))
        R = s.matvec(S)
    ref = S @ J.data.ravel()
    assert np.max(np.abs(R - ref)) / np.max(np.abs(ref)) <= 1e-3


def test_v1_encrypts_image_once_and_counts_rotations():
    rng = np.random.default_rng(5)
    J = Image(rng.uniform(0, 255, (32, 32)))
    with _session("fhe-v1", J) as s:
        s.set_level(1, 0.0, (32, 32))
        setup = s.server.ep.ledger.bytes("sent", "setup")
        k = 1024 // 128
        assert setup == FRAME_HEADER.size + s.ctx.ciphertext_bytes(s.ctx.top, k)
        for _ in range(3):
            s.matvec(rng.uniform(-1, 1, (6, 1024)))
        assert s.server.ep.ledger.bytes("sent", "setup") == setup
        assert s.server.ep.ledger.bytes("sent", "matvec") < setup
        # one group of rows, k partitions, log2(128) rotations each
        assert s.he_counters()["party1"]["rotate"] == 3 * k * 7


def test_v1_sampled_rows_are_scattered():
    rng = np.random.default_rng(6)
    J = Image(rng.uniform(0, 255, (16, 16)))
    idx = np.sort(rng.choice(256, 40, replace=False))
    S = rng.uniform(-1, 1, (2, 40))
    with _session("fhe-v1", J) as s:
        s.set_level(1, 0.0, (16, 16))
        R = s.matvec(S, idx)
        # party 2 never receives the indices
        assert all(e.frame_type != "control" or e.nbytes < 200 for e in s.server.ep.ledger.entries)
    np.testing.assert_allclose(R, S @ J.data.ravel()[idx], rtol=1e-3, atol=1e-2)


def test_v2_uses_no_rotations():
    rng = np.random.default_rng(7)
    J = Image(rng.uniform(0, 255, (16, 16)))
    with _session("fhe-v2", J) as s:
        s.set_level(1, 0.0, (16, 16))
        s.matvec(rng.uniform(-1, 1, (4, 256)))
        counters = s.he_counters()
    assert counters["party1"]["rotate"] == 0 and counters["party2"]["rotate"] == 0
    assert counters["party1"]["mul_plain"] > 0 and counters["party2"]["mul_plain"] > 0


def test_sessions_have_independent_ledgers():
    J = Image(np.random.default_rng(8).uniform(0, 255, (8, 8)))
    with _session("mpc", J) as a, establish_session(SessionConfig("mpc", seed=3, dealer_seed=4), J,
                                                    session_id=2) as b:
        a.matvec(np.ones((2, 64)))
        before = total_bytes(a)
        b.matvec(np.ones((2, 64)))
        b.matvec(np.ones((2, 64)))
        assert total_bytes(a) == before
        assert total_bytes(b) > before


def test_seeded_runs_have_identical_transcripts():
    J = Image(np.random.default_rng(9).uniform(0, 255, (8, 8)))
    digests = []
    for _ in range(2):
        with _session("mpc", J, seed=11) as s:
            s.set_level(1, 0.0)
            s.matvec(np.linspace(-1, 1, 128).reshape(2, 64))
            digests.append((s.ep.transcript_digest(), s.server.ep.transcript_digest()))
    assert digests[0] == digests[1]


def test_clear_session_has_no_traffic():
    s = ClearSession(Image(np.ones((3, 3))))
    s.matvec(np.ones((1, 9)))
    assert total_bytes(s) == 0
    assert s.he_counters() == {"party1": {}, "party2": {}}
