"""Length-prefixed message frames exchanged between client, nodes and aggregator.

Frame: u32 BE payload length | u8 type | payload.  Integers inside payloads
are little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import BinaryIO

from frag.errors import ErrorCode, FragError
from frag.he.cipher import Ciphertext
from frag.he.codec import CT_MAGIC, ct_frame_size, read_ct_frame, serialize_ct
from frag.he.params import context_for
from frag.sharing import SH_MAGIC, PartialResult, deserialize_partial, serialize_partial
from frag.vecdb import EncryptedScore

_FRAME = struct.Struct(">IB")
_QUERY = struct.Struct("<16sBII")
_PARTIAL = struct.Struct("<16sHI")
_AGG = struct.Struct("<16sI")
_RID = struct.Struct("<Q")
_ERR = struct.Struct("<H")
# a share frame replaces the ciphertext magic with its own and adds commitment, n, j
_SHARE_EXTRA = 32 + 2 + 2
MAX_PAYLOAD = 1 << 31


class MsgType(IntEnum):
    HELLO = 1
    QUERY = 2
    PARTIAL = 3
    AGGREGATE = 4
    ERROR = 5


class Mode(IntEnum):
    LOCAL_SCORE = 1
    SHARE_SPLIT = 2


def parse_mode(value) -> Mode:
    try:
        return Mode[value.upper()] if isinstance(value, str) else Mode(value)
    except (KeyError, ValueError):
        raise FragError(ErrorCode.UNKNOWN_MODE, f"unknown mode {value!r}") from None


@dataclass(frozen=True, eq=False)
class QueryEnvelope:
    qid: bytes
    enc_query: list[Ciphertext]
    k: int
    mode: Mode

    @property
    def params_id(self) -> bytes:
        return self.enc_query[0].params_id


@dataclass(frozen=True, eq=False)
class PartialMsg:
    qid: bytes
    node_id: int
    mode: Mode
    scores: list[EncryptedScore] = field(default_factory=list)  # LOCAL_SCORE
    partials: list[PartialResult] = field(default_factory=list)  # SHARE_SPLIT

    @property
    def entry_count(self) -> int:
        return len(self.scores) if self.mode == Mode.LOCAL_SCORE else len(self.partials)


@dataclass(frozen=True, eq=False)
class AggregateMsg:
    qid: bytes
    combined: list[EncryptedScore]


# ---------------------------------------------------------------------------
# framing


def frame(mtype: MsgType, payload: bytes) -> bytes:
    return _FRAME.pack(len(payload), int(mtype)) + payload


def parse_frame(buf: bytes) -> tuple[MsgType, bytes]:
    if len(buf) < _FRAME.size:
        raise FragError(ErrorCode.MALFORMED_FRAME, "truncated frame header")
    length, mtype = _FRAME.unpack_from(buf)
    if len(buf) != _FRAME.size + length:
        raise FragError(ErrorCode.MALFORMED_FRAME, f"frame declares {length} payload bytes, has {len(buf) - 5}")
    try:
        return MsgType(mtype), buf[_FRAME.size:]
    except ValueError:
        raise FragError(ErrorCode.MALFORMED_FRAME, f"unknown message type {mtype}") from None


def _read_exact(f: BinaryIO, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        b = f.read(n - got)
        if not b:
            raise FragError(ErrorCode.MALFORMED_FRAME, f"connection closed after {got} of {n} bytes")
        chunks.append(b)
        got += len(b)
    return b"".join(chunks)


def read_frame(f: BinaryIO) -> tuple[MsgType, bytes] | None:
    """Read one frame from a stream; None on clean end of stream."""
    head = f.read(_FRAME.size)
    if not head:
        return None
    if len(head) < _FRAME.size:
        head += _read_exact(f, _FRAME.size - len(head))
    length, mtype = _FRAME.unpack(head)
    if length > MAX_PAYLOAD:
        raise FragError(ErrorCode.MALFORMED_FRAME, f"payload of {length} bytes refused")
    payload = _read_exact(f, length)
    try:
        return MsgType(mtype), payload
    except ValueError:
        raise FragError(ErrorCode.MALFORMED_FRAME, f"unknown message type {mtype}") from None


# ---------------------------------------------------------------------------
# payloads


def encode_hello(params_id: bytes) -> bytes:
    return bytes(params_id)


def decode_hello(payload: bytes) -> bytes:
    if len(payload) != 32:
        raise FragError(ErrorCode.MALFORMED_FRAME, "HELLO carries a 32-byte params_id")
    return bytes(payload)


def encode_error(code: ErrorCode, message: str) -> bytes:
    return _ERR.pack(int(code)) + message.encode("utf-8")


def decode_error(payload: bytes) -> FragError:
    if len(payload) < _ERR.size:
        raise FragError(ErrorCode.MALFORMED_FRAME, "truncated ERROR payload")
    (code,) = _ERR.unpack_from(payload)
    try:
        code = ErrorCode(code)
    except ValueError:
        code = ErrorCode.MALFORMED_FRAME
    return FragError(code, payload[_ERR.size:].decode("utf-8", "replace"))


def encode_query(env: QueryEnvelope) -> bytes:
    head = _QUERY.pack(env.qid, int(env.mode), env.k, len(env.enc_query))
    return head + b"".join(serialize_ct(ct) for ct in env.enc_query)


def decode_query(payload: bytes) -> QueryEnvelope:
    if len(payload) < _QUERY.size:
        raise FragError(ErrorCode.MALFORMED_FRAME, "truncated QUERY header")
    qid, mode, k, m = _QUERY.unpack_from(payload)
    off = _QUERY.size
    cts = []
    for _ in range(m):
        ct, off = read_ct_frame(payload, off)
        cts.append(ct)
    if off != len(payload):
        raise FragError(ErrorCode.MALFORMED_FRAME, "trailing bytes in QUERY")
    if not cts:
        raise FragError(ErrorCode.MALFORMED_FRAME, "QUERY without ciphertexts")
    return QueryEnvelope(bytes(qid), cts, k, parse_mode(mode))


def encode_partial(msg: PartialMsg) -> bytes:
    parts = [_PARTIAL.pack(msg.qid, msg.node_id, msg.entry_count)]
    if msg.mode == Mode.LOCAL_SCORE:
        for s in msg.scores:
            parts.append(_RID.pack(s.record_id) + serialize_ct(s.score_ct))
    else:
        for p in msg.partials:
            parts.append(_RID.pack(p.record_id) + serialize_partial(p))
    return b"".join(parts)


def decode_partial(payload: bytes) -> PartialMsg:
    if len(payload) < _PARTIAL.size:
        raise FragError(ErrorCode.MALFORMED_FRAME, "truncated PARTIAL header")
    qid, node_id, count = _PARTIAL.unpack_from(payload)
    off = _PARTIAL.size
    scores, partials = [], []
    for _ in range(count):
        if len(payload) - off < _RID.size + 8:
            raise FragError(ErrorCode.MALFORMED_FRAME, "truncated PARTIAL entry")
        (rid,) = _RID.unpack_from(payload, off)
        off += _RID.size
        magic = bytes(payload[off:off + 8])
        if magic == CT_MAGIC:
            ct, off = read_ct_frame(payload, off)
            scores.append(EncryptedScore(rid, ct))
        elif magic == SH_MAGIC:
            p, off = deserialize_partial(payload, rid, off)
            partials.append(p)
        else:
            raise FragError(ErrorCode.MALFORMED_FRAME, "PARTIAL entry is neither a ciphertext nor a share")
    if scores and partials:
        raise FragError(ErrorCode.MALFORMED_FRAME, "PARTIAL payload mixes entry kinds")
    if off != len(payload):
        raise FragError(ErrorCode.MALFORMED_FRAME, "trailing bytes in PARTIAL")
    mode = Mode.SHARE_SPLIT if partials else Mode.LOCAL_SCORE
    return PartialMsg(bytes(qid), node_id, mode, scores, partials)


def encode_aggregate(msg: AggregateMsg) -> bytes:
    parts = [_AGG.pack(msg.qid, len(msg.combined))]
    for s in msg.combined:
        parts.append(_RID.pack(s.record_id) + serialize_ct(s.score_ct))
    return b"".join(parts)


def decode_aggregate(payload: bytes) -> AggregateMsg:
    if len(payload) < _AGG.size:
        raise FragError(ErrorCode.MALFORMED_FRAME, "truncated AGGREGATE header")
    qid, count = _AGG.unpack_from(payload)
    off = _AGG.size
    out = []
    for _ in range(count):
        if len(payload) - off < _RID.size:
            raise FragError(ErrorCode.MALFORMED_FRAME, "truncated AGGREGATE entry")
        (rid,) = _RID.unpack_from(payload, off)
        ct, off = read_ct_frame(payload, off + _RID.size)
        out.append(EncryptedScore(rid, ct))
    if off != len(payload):
        raise FragError(ErrorCode.MALFORMED_FRAME, "trailing bytes in AGGREGATE")
    return AggregateMsg(bytes(qid), out)


# ---------------------------------------------------------------------------
# sizes without serializing (used by the in-process transport's accounting)


def _ct_size(ct: Ciphertext) -> int:
    ctx = context_for(ct.params_id)
    return ct_frame_size(ct.degree, ctx.n, ctx.L)


def query_frame_size(env: QueryEnvelope) -> int:
    return _FRAME.size + _QUERY.size + sum(_ct_size(ct) for ct in env.enc_query)


def partial_frame_size(msg: PartialMsg) -> int:
    size = _FRAME.size + _PARTIAL.size
    if msg.mode == Mode.LOCAL_SCORE:
        return size + sum(_RID.size + _ct_size(s.score_ct) for s in msg.scores)
    return size + sum(_RID.size + _SHARE_EXTRA + _ct_size(p.value) for p in msg.partials)


def aggregate_frame_size(msg: AggregateMsg) -> int:
    return _FRAME.size + _AGG.size + sum(_RID.size + _ct_size(s.score_ct) for s in msg.combined)


def query_header_size() -> int:
    return _FRAME.size + _QUERY.size
