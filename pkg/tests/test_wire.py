import io
import struct

import numpy as np
import pytest

from frag.errors import ErrorCode, FragError
from frag.federation import wire
from frag.federation.wire import AggregateMsg, Mode, MsgType, PartialMsg, QueryEnvelope
from frag.he import encrypt


def code_of(fn, *args):
    with pytest.raises(FragError) as e:
        fn(*args)
    return e.value.code


def test_frame_header_is_big_endian_length_then_type():
    f = wire.frame(MsgType.ERROR, b"abc")
    assert f[:5] == struct.pack(">IB", 3, 5)
    assert wire.parse_frame(f) == (MsgType.ERROR, b"abc")


def test_parse_frame_errors():
    assert code_of(wire.parse_frame, b"\0\0") == ErrorCode.MALFORMED_FRAME
    assert code_of(wire.parse_frame, struct.pack(">IB", 4, 1) + b"abc") == ErrorCode.MALFORMED_FRAME
    assert code_of(wire.parse_frame, struct.pack(">IB", 0, 9)) == ErrorCode.MALFORMED_FRAME


def test_read_frame_stream():
    s = io.BytesIO(wire.frame(MsgType.HELLO, b"x" * 32) + wire.frame(MsgType.ERROR, b"\1\0"))
    assert wire.read_frame(s) == (MsgType.HELLO, b"x" * 32)
    assert wire.read_frame(s)[0] == MsgType.ERROR
    assert wire.read_frame(s) is None
    assert code_of(wire.read_frame, io.BytesIO(struct.pack(">IB", 10, 2) + b"abc")) == ErrorCode.MALFORMED_FRAME


def test_query_round_trip_and_errors(pk):
    env = QueryEnvelope(b"k" * 16, [encrypt(0.1, pk), encrypt(0.2, pk)], 7, Mode.LOCAL_SCORE)
    payload = wire.encode_query(env)
    back = wire.decode_query(payload)
    assert (back.qid, back.k, back.mode) == (env.qid, 7, Mode.LOCAL_SCORE)
    assert all(a == b for a, b in zip(back.enc_query, env.enc_query))
    assert wire.query_frame_size(env) == len(payload) + 5
    assert code_of(wire.decode_query, payload[:-1]) == ErrorCode.MALFORMED_FRAME
    assert code_of(wire.decode_query, payload + b"\0") == ErrorCode.MALFORMED_FRAME
    bad_mode = bytearray(payload)
    bad_mode[16] = 9
    assert code_of(wire.decode_query, bytes(bad_mode)) == ErrorCode.UNKNOWN_MODE
    assert code_of(wire.decode_query, payload[:wire.query_header_size() - 5]) == ErrorCode.MALFORMED_FRAME


def test_partial_and_aggregate_sizes(pk):
    from frag.vecdb import EncryptedScore
    from frag.he import eval_mul_cipher
    s = EncryptedScore(3, eval_mul_cipher(encrypt(0.1, pk), encrypt(0.2, pk)))
    msg = PartialMsg(b"q" * 16, 2, Mode.LOCAL_SCORE, scores=[s])
    payload = wire.encode_partial(msg)
    assert wire.partial_frame_size(msg) == len(payload) + 5
    assert wire.decode_partial(payload).scores[0].score_ct == s.score_ct
    agg = AggregateMsg(b"q" * 16, [s])
    assert wire.aggregate_frame_size(agg) == len(wire.encode_aggregate(agg)) + 5
    empty = wire.decode_partial(wire.encode_partial(PartialMsg(b"q" * 16, 1, Mode.SHARE_SPLIT)))
    assert empty.entry_count == 0
    junk = payload[:struct.calcsize("<16sHI") + 8] + b"NOTMAGIC" + payload[struct.calcsize("<16sHI") + 16:]
    assert code_of(wire.decode_partial, junk) == ErrorCode.MALFORMED_FRAME


def test_error_payload():
    err = wire.decode_error(wire.encode_error(ErrorCode.NODE_UNREACHABLE, "gone ü"))
    assert err.code == ErrorCode.NODE_UNREACHABLE and err.message == "gone ü"
    assert wire.decode_error(b"\xff\xff").code == ErrorCode.MALFORMED_FRAME
    assert code_of(wire.decode_hello, b"short") == ErrorCode.MALFORMED_FRAME
