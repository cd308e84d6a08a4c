"""Codec round trips and framing behaviour for the server protocol."""

import random
import socket
import threading

import pytest

from lluad.dnsmsg import DomainName, RecordAnswer, RecordKey, RecordType
from lluad.maintenance import LbUpdate, MembershipUpdate
from lluad.mixnet import MisbehaviorReport, MixPacket, RoundContext
from lluad.poplist import RecordDef, build_list
from lluad import wire

from conftest import random_defs


def key(text, rtype=RecordType.A):
    return RecordKey(DomainName.from_text(text), rtype)


def test_frame_encode_shape():
    frame = wire.encode_frame(wire.MSG_ERROR, b"abc")
    assert frame == b"\x00\x00\x00\x04" + bytes([wire.MSG_ERROR]) + b"abc"


def test_frame_stream_round_trip_over_socketpair():
    left, right = socket.socketpair()
    a, b = wire.FrameStream(left), wire.FrameStream(right)
    payloads = [(wire.MSG_LIST_REQUEST, b"x" * 10), (wire.MSG_ERROR, b""), (0x7F, b"y" * 100_000)]

    def sender():
        for msg_type, body in payloads:
            a.send(msg_type, body)

    thread = threading.Thread(target=sender)
    thread.start()
    for expected_type, expected_body in payloads:
        msg_type, body = b.recv()
        assert (msg_type, body) == (expected_type, expected_body)
    thread.join()
    a.close()
    with pytest.raises(wire.ConnectionClosed):
        b.recv()
    b.close()


def test_list_request_round_trip():
    body = wire.encode_list_request("client-7", "s3cret tok")
    assert wire.decode_list_request(body) == ("client-7", "s3cret tok")
    with pytest.raises(wire.FrameError):
        wire.decode_list_request(body + b"x")
    with pytest.raises(wire.FrameError):
        wire.decode_list_request(body[:-3])


def test_list_snapshot_round_trip_preserves_generation():
    rng = random.Random(5)
    defs = random_defs(rng)
    plist = build_list(defs, generation=4242)
    body = wire.encode_list_snapshot(plist)
    restored = wire.decode_list_snapshot(body)
    assert restored.generation == 4242
    assert restored.same_structure(plist)


def test_lb_update_round_trip_and_entry_size():
    update = LbUpdate(entries=((0, 1), (999, -5), ((1 << 24) - 1, 32767)))
    body = wire.encode_lb_update(update)
    assert len(body) == 2 + 5 * 3
    assert wire.decode_lb_update(body) == update
    assert wire.decode_lb_update(wire.encode_lb_update(LbUpdate(()))) == LbUpdate(())
    with pytest.raises(ValueError):
        wire.encode_lb_update(LbUpdate(entries=((1 << 24, 0),)))


def test_membership_update_round_trip():
    update = MembershipUpdate(
        removals=(key("gone.example"), key("also.example", RecordType.AAAA)),
        additions=(
            RecordDef(key("plain.example"), RecordAnswer.a("192.0.2.1").data),
            RecordDef(
                key("pooled.example"),
                RecordAnswer.a("10.0.0.2").data,
                (RecordAnswer.a("10.0.0.1").data, RecordAnswer.a("10.0.0.2").data),
            ),
            RecordDef(
                key("alias.example", RecordType.CNAME),
                RecordAnswer.cname(DomainName.from_text("plain.example")).data,
            ),
        ),
    )
    assert wire.decode_membership_update(wire.encode_membership_update(update)) == update


def test_membership_update_rejects_garbage():
    with pytest.raises(wire.FrameError):
        wire.decode_membership_update(b"not zlib at all")
    import zlib

    with pytest.raises(wire.FrameError):
        wire.decode_membership_update(zlib.compress(b"\x00\x01"))


def test_round_start_round_trip():
    ctx = RoundContext.for_online(2**40, [0, 5, 12], 16, n_shuffle=7)
    restored = wire.decode_round_start(wire.encode_round_start(ctx))
    assert restored == ctx
    assert restored.online_indexes == (0, 5, 12)


def test_packet_batch_round_trip():
    rng = random.Random(9)
    packets = [
        MixPacket(rng.randbytes(32), rng.randbytes(16), rng.randbytes(32))
        for _ in range(7)
    ]
    body = wire.encode_packet_batch(packets)
    assert len(body) == 2 + 7 * 80
    assert wire.decode_packet_batch(body) == packets
    with pytest.raises(wire.FrameError):
        wire.decode_packet_batch(body[:-1])


def test_misbehavior_report_round_trip():
    report = MisbehaviorReport(123456, (0, 17, 300, 2**20))
    assert wire.decode_misbehavior_report(wire.encode_misbehavior_report(report)) == report


def test_hash_request_round_trip():
    rng = random.Random(11)
    digests = tuple(rng.randbytes(29) for _ in range(3))
    assert wire.decode_hash_request(wire.encode_hash_request(digests)) == digests
    with pytest.raises(ValueError):
        wire.encode_hash_request([b"short"])


def test_error_round_trip():
    code, message = wire.decode_error(wire.encode_error(3, "bad auth"))
    assert (code, message) == (3, "bad auth")
