import threading

import numpy as np
import pytest

from ppir.errors import HandshakeError, ProtocolError, TransportError
from ppir.transport import (FRAME_HEADER, FRAME_MAGIC, Endpoint, FrameType, LoopbackTransport, Phase, pack_message,
                            pack_share, share_wire_size, transport_pair, unpack_message, unpack_share)


def _pair(timeout=2.0, session=(1, 1)):
    t1, t2 = LoopbackTransport.pair()
    return Endpoint(1, t1, session[0], timeout), Endpoint(2, t2, session[1], timeout)


@pytest.mark.parametrize("width", [4, 8])
def test_share_roundtrip(width):
    top = 1 << (8 * width)
    a = np.random.default_rng(0).integers(0, top, (3, 5), dtype=np.uint64, endpoint=False)
    buf = pack_share(a, elem_bytes=width)
    assert len(buf) == share_wire_size(a.shape, width) == 16 + 8 + 15 * width
    np.testing.assert_array_equal(unpack_share(buf), a)


def test_share_wire_layout():
    buf = pack_share(np.array([1, 2], dtype=np.uint64), msg_type=3, round_=7)
    assert buf[:4] == b"PPIR"
    assert buf[16:20] == (2).to_bytes(4, "little")
    assert buf[20:28] == (1).to_bytes(8, "little")


def test_share_rejects_bad_input():
    buf = pack_share(np.zeros(4, dtype=np.uint64))
    with pytest.raises(ProtocolError):
        unpack_share(b"XXXX" + buf[4:])
    with pytest.raises(ProtocolError):
        unpack_share(buf[:-8])


def test_message_roundtrip():
    arrays = [np.arange(6.0).reshape(2, 3), np.array([1, 2], dtype=np.int64)]
    meta, back = unpack_message(pack_message({"op": "x", "n": 3}, arrays))
    assert meta == {"op": "x", "n": 3}
    for a, b in zip(arrays, back):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ProtocolError):
        unpack_message(pack_message({}, arrays) + b"\0")


def test_frames_and_ledger():
    a, b = _pair()
    a.send(FrameType.CONTROL, b"hello", Phase.SETUP)
    ftype, payload = b.recv(FrameType.CONTROL)
    assert ftype == FrameType.CONTROL and payload == b"hello"
    assert a.ledger.bytes("sent") == FRAME_HEADER.size + 5 == b.ledger.bytes("recv")
    assert a.ledger.report() == {"setup": (29, 0, 0.0)}
    assert b.ledger.entries[0].frame_type == "control" and b.ledger.entries[0].round == 0


def test_round_desync_detected():
    a, b = _pair()
    a.send_round = 3
    a.send(FrameType.CONTROL, b"")
    with pytest.raises(ProtocolError, match="desynchronized"):
        b.recv()


def test_session_mismatch_detected():
    a, b = _pair(session=(1, 2))
    a.send(FrameType.CONTROL, b"")
    with pytest.raises(ProtocolError, match="session"):
        b.recv()


def test_unexpected_type_and_error_frames():
    a, b = _pair()
    a.send(FrameType.SHARE, b"")
    with pytest.raises(ProtocolError, match="expected"):
        b.recv(FrameType.CIPHERTEXT)
    a.send_message(FrameType.ERROR, {"message": "boom"})
    with pytest.raises(ProtocolError, match="boom"):
        b.recv()
    a.send_message(FrameType.ERROR, {"message": "bad params", "kind": "handshake"})
    with pytest.raises(HandshakeError):
        b.recv()


def test_truncated_and_foreign_frames():
    t1, t2 = LoopbackTransport.pair()
    b = Endpoint(2, t2, 1, 1.0)
    t1.send_bytes(FRAME_HEADER.pack(FRAME_MAGIC, 1, 0, 0, 2, 10) + b"abc")
    with pytest.raises(ProtocolError, match="truncated"):
        b.recv()
    t1.send_bytes(FRAME_HEADER.pack(b"NOPE", 1, 1, 0, 2, 0))
    with pytest.raises(ProtocolError, match="magic"):
        b.recv()


def test_timeout():
    _, b = _pair(timeout=0.05)
    with pytest.raises(TransportError):
        b.recv()


def test_tcp_duplex_large_payloads():
    t1, t2 = transport_pair("tcp:127.0.0.1:0")
    a, b = Endpoint(1, t1), Endpoint(2, t2)
    big = bytes(range(256)) * 20000
    out = {}

    def other():
        b.send(FrameType.SHARE, big)
        out["b"] = b.recv()[1]

    th = threading.Thread(target=other)
    th.start()
    a.send(FrameType.SHARE, big)
    got = a.recv()[1]
    th.join(10)
    assert got == big and out["b"] == big
    a.close()
    with pytest.raises(TransportError):
        b.recv()
    b.close()


def test_transcript_digest_tracks_traffic():
    a1, b1 = _pair()
    a2, b2 = _pair()
    for a, b, msg in ((a1, b1, b"x"), (a2, b2, b"x")):
        a.send(FrameType.CONTROL, msg)
        b.recv()
    assert a1.transcript_digest() == a2.transcript_digest()
    assert b1.transcript_digest() == b2.transcript_digest()
    a1.send(FrameType.CONTROL, b"y")
    assert a1.transcript_digest() != a2.transcript_digest()


def test_bad_transport_spec():
    with pytest.raises(ValueError):
        transport_pair("udp:1")
    with pytest.raises(ValueError):
        transport_pair("tcp:localhost:abc")
