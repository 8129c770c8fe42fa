"""Querier side of the workflow: distribute, collect, aggregate, decrypt, audit."""

from __future__ import annotations

import csv
import io
import os
import threading
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from frag.errors import ErrorCode, FragError
from frag.federation import wire
from frag.federation.node import Node
from frag.federation.transport import InProcessTransport, SocketTransport
from frag.federation.wire import AggregateMsg, Mode, PartialMsg, QueryEnvelope
from frag.he.cipher import PublicKey, SecretKey, decrypt_many, default_rng, encrypt_many, make_ct
from frag.he.codec import ct_frame_size
from frag.he.params import context_for
from frag.sharing import PartialResult, aggregate_partials, verify
from frag.vecdb import EncryptedScore

IN_PROCESS = "IN_PROCESS"
SOCKET = "SOCKET"
MAX_RECOMPUTES = 3


@dataclass
class FederationConfig:
    n: int
    mode: Mode = Mode.LOCAL_SCORE
    k: int = 10
    transport: str = IN_PROCESS
    addresses: Sequence[tuple[str, int]] = ()
    dim: int | None = None

    def validate(self) -> "FederationConfig":
        if self.n < 1:
            raise FragError(ErrorCode.INVALID_CONFIG, f"n={self.n}")
        if self.k < 1:
            raise FragError(ErrorCode.INVALID_CONFIG, f"k={self.k}")
        self.mode = wire.parse_mode(self.mode)
        if self.transport not in (IN_PROCESS, SOCKET):
            raise FragError(ErrorCode.INVALID_CONFIG, f"transport {self.transport!r}")
        if self.transport == SOCKET and len(self.addresses) != self.n:
            raise FragError(ErrorCode.INVALID_CONFIG, f"{len(self.addresses)} addresses for n={self.n}")
        return self

    @property
    def node_ids(self) -> list[int]:
        return list(range(1, self.n + 1))


@dataclass
class RoundLog:
    qid: bytes
    messages_sent: int = 0
    rounds: int = 0
    sizes: list[tuple[str, int, int]] = field(default_factory=list)  # (kind, node_id, bytes)
    closed: bool = False

    def record(self, kind: str, node_id: int, size: int, round_no: int) -> None:
        if self.closed:
            raise FragError(ErrorCode.CONTRACT_VIOLATION, "round log is closed")
        self.messages_sent += 1
        self.rounds = max(self.rounds, round_no)
        self.sizes.append((kind, node_id, size))

    def close(self) -> None:
        self.closed = True


class Federation:
    """Client handle on n nodes.  Node ids are 1..n; for share tables node j holds party j."""

    def __init__(self, cfg: FederationConfig, pk: PublicKey, nodes: Mapping[int, Node] | None = None,
                 rng: np.random.Generator | None = None, tap: list | None = None):
        self.cfg = cfg.validate()
        self.pk = pk
        self.rng = rng or default_rng()
        if cfg.transport == IN_PROCESS:
            self.transport = InProcessTransport(dict(nodes or {}), tap=tap)
        else:
            self.transport = SocketTransport(dict(zip(cfg.node_ids, cfg.addresses)), tap=tap)
        self.logs: dict[bytes, RoundLog] = {}
        self.partials: dict[bytes, list[PartialMsg]] = {}
        self.queries: dict[bytes, QueryEnvelope] = {}
        self.corrupt_hook = None  # test hook: callable(PartialMsg) -> PartialMsg

    def encrypt_query(self, q_plain) -> list:
        q = np.asarray(q_plain, dtype=np.float64).ravel()
        if self.cfg.dim is not None and len(q) != self.cfg.dim:
            raise FragError(ErrorCode.DIM_MISMATCH, f"query dim {len(q)} != {self.cfg.dim}")
        if len(q) == 0:
            raise FragError(ErrorCode.DIM_MISMATCH, "empty query")
        if (np.abs(q) > 1).any() or not np.isfinite(q).all():
            raise FragError(ErrorCode.PLAINTEXT_OUT_OF_RANGE, "query values must lie in [-1, 1]")
        data = encrypt_many(q, self.pk, self.rng)
        return [make_ct(d, 1, self.pk.params_id) for d in data]

    def submit(self, q_plain, qid: bytes | None = None) -> bytes:
        enc = self.encrypt_query(q_plain)
        qid = qid or os.urandom(16)
        env = QueryEnvelope(qid, enc, self.cfg.k, self.cfg.mode)
        log = RoundLog(qid)
        self.logs[qid] = log
        self.queries[qid] = env
        ids = self.cfg.node_ids
        self.transport.connect(ids, self.pk.params_id)
        try:
            replies = {}
            for nid in ids:
                ex = self.transport.query(nid, env)
                log.record("QUERY", nid, ex.query_bytes, 1)
                log.record("PARTIAL", nid, ex.partial_bytes, 2)
                replies[nid] = ex.partial
            for nid in ids:
                replies[nid] = self._checked(env, nid, replies[nid], log)
        finally:
            self.transport.close()
        self.partials[qid] = [replies[nid] for nid in ids]
        return qid

    def _checked(self, env: QueryEnvelope, nid: int, msg: PartialMsg, log: RoundLog) -> PartialMsg:
        """Verify a node's reply; recompute up to MAX_RECOMPUTES times (each is another round)."""
        round_no = 2
        for attempt in range(MAX_RECOMPUTES + 1):
            if self.corrupt_hook is not None:
                msg = self.corrupt_hook(msg)
            if _msg_ok(msg, env, self.cfg.n):
                return msg
            if attempt == MAX_RECOMPUTES:
                break
            round_no += 2
            self.transport.connect([nid], self.pk.params_id)
            ex = self.transport.query(nid, env)
            log.record("QUERY", nid, ex.query_bytes, round_no - 1)
            log.record("PARTIAL", nid, ex.partial_bytes, round_no)
            msg = ex.partial
        raise FragError(ErrorCode.COMMITMENT_MISMATCH,
                        f"node {nid}: reply failed verification after {MAX_RECOMPUTES} recomputations", node_id=nid)

    def query(self, q_plain, sk: SecretKey, k: int | None = None) -> list[tuple[int, float]]:
        qid = self.submit(q_plain)
        agg = aggregate(self.partials[qid], self.cfg)
        return client_finalize(agg, sk, k or self.cfg.k, self.logs[qid])


def _msg_ok(msg: PartialMsg, env: QueryEnvelope, n: int) -> bool:
    if msg.qid != env.qid:
        return False
    if msg.mode != env.mode:
        # an empty PARTIAL carries no entry kind on the wire
        return msg.entry_count == 0
    if msg.mode == Mode.LOCAL_SCORE:
        return all(s.score_ct.degree == 2 for s in msg.scores)
    return all(p.share_count == n and p.party_index == msg.node_id and verify(p, p.commitment)
               for p in msg.partials)


def submit_query(q_plain, fed: Federation, pk: PublicKey | None = None) -> bytes:
    if pk is not None and pk.params_id != fed.pk.params_id:
        raise FragError(ErrorCode.PARAMS_MISMATCH, "key differs from the federation's key")
    return fed.submit(q_plain)


def aggregate(partials: Sequence[PartialMsg], cfg: FederationConfig) -> AggregateMsg:
    if not partials:
        raise FragError(ErrorCode.SHARE_SET_INCOMPLETE, "no partial messages")
    qid = partials[0].qid
    seen_nodes = set()
    for p in partials:
        if p.qid != qid:
            raise FragError(ErrorCode.CONTRACT_VIOLATION, "partials belong to different queries")
        if p.node_id in seen_nodes:
            raise FragError(ErrorCode.DUPLICATE_PARTIAL, f"node {p.node_id} answered twice", node_id=p.node_id)
        seen_nodes.add(p.node_id)
    mode = wire.parse_mode(cfg.mode)
    if mode == Mode.LOCAL_SCORE:
        if len(partials) != cfg.n:
            raise FragError(ErrorCode.SHARE_SET_INCOMPLETE, f"{len(partials)} of {cfg.n} nodes answered")
        combined: dict[int, EncryptedScore] = {}
        for p in partials:
            for s in p.scores:
                if s.record_id in combined:
                    raise FragError(ErrorCode.DUPLICATE_PARTIAL, f"record {s.record_id} reported twice")
                combined[s.record_id] = s
        return AggregateMsg(qid, [combined[r] for r in sorted(combined)])

    groups: dict[int, list[PartialResult]] = {}
    for p in partials:
        for r in p.partials:
            group = groups.setdefault(r.record_id, [])
            if any(g.party_index == r.party_index for g in group):
                raise FragError(ErrorCode.DUPLICATE_PARTIAL,
                                f"record {r.record_id}: party {r.party_index} reported twice")
            group.append(r)
    out = []
    for rid in sorted(groups):
        group = groups[rid]
        ref = group[0].commitment
        if any(not verify(g, ref) for g in group):
            raise FragError(ErrorCode.COMMITMENT_MISMATCH, f"record {rid}: partials disagree on commitment")
        if len(group) != cfg.n:
            have = sorted(g.party_index for g in group)
            raise FragError(ErrorCode.SHARE_SET_INCOMPLETE, f"record {rid}: parties {have} of {cfg.n}")
        out.append(EncryptedScore(rid, aggregate_partials(group)))
    return AggregateMsg(qid, out)


class Aggregator:
    """Collects PARTIAL messages from concurrent senders and commits each qid once.

    The querying client plays this role by default; a separate instance can be
    handed to several collector threads.
    """

    def __init__(self, cfg: FederationConfig):
        self.cfg = cfg.validate()
        self._lock = threading.Lock()
        self._pending: dict[bytes, list[PartialMsg]] = {}
        self._done: set[bytes] = set()

    def add(self, msg: PartialMsg) -> None:
        with self._lock:
            if msg.qid in self._done:
                raise FragError(ErrorCode.CONTRACT_VIOLATION, f"qid {msg.qid.hex()} already aggregated")
            self._pending.setdefault(msg.qid, []).append(msg)

    def ready(self, qid: bytes) -> bool:
        with self._lock:
            return len({p.node_id for p in self._pending.get(qid, ())}) >= self.cfg.n

    def commit(self, qid: bytes) -> AggregateMsg:
        with self._lock:
            if qid in self._done:
                raise FragError(ErrorCode.CONTRACT_VIOLATION, f"qid {qid.hex()} already aggregated")
            msgs = sorted(self._pending.get(qid, ()), key=lambda p: p.node_id)
            out = aggregate(msgs, self.cfg)
            self._done.add(qid)
            self._pending.pop(qid, None)
            return out


def client_finalize(agg: AggregateMsg, sk: SecretKey, k: int, log: RoundLog | None = None
                    ) -> list[tuple[int, float]]:
    if k < 1:
        raise FragError(ErrorCode.INVALID_CONFIG, f"k={k}")
    for s in agg.combined:
        if s.score_ct.params_id != sk.params_id:
            raise FragError(ErrorCode.PARAMS_MISMATCH, f"record {s.record_id}: foreign parameters")
    values = decrypt_many([s.score_ct for s in agg.combined], sk)
    ranked = sorted(zip((s.record_id for s in agg.combined), values), key=lambda t: (-t[1], t[0]))
    if log is not None:
        log.close()
    return ranked[:k]


@dataclass
class AuditReport:
    qid: bytes
    mode: Mode
    n: int
    m: int
    rounds: int
    messages: int
    query_bytes: list[int]
    partial_bytes: list[int]

    HEADER = ("qid", "mode", "n", "m", "rounds", "messages", "expected_messages",
              "query_bytes_each", "partial_bytes_total", "status")

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        w.writerow([self.qid.hex(), self.mode.name, self.n, self.m, self.rounds, self.messages, 2 * self.n,
                    self.query_bytes[0] if self.query_bytes else 0, sum(self.partial_bytes), "ok"])
        return buf.getvalue()


def audit_complexity(log: RoundLog, m: int, n: int, mode, params_id: bytes | None = None) -> AuditReport:
    """Check the two-round, 2n-message contract; CONTRACT_VIOLATION names the broken bound."""
    mode = wire.parse_mode(mode)

    def violated(what: str) -> FragError:
        return FragError(ErrorCode.CONTRACT_VIOLATION, f"qid {log.qid.hex()}: {what}", bound=what)

    if not log.closed:
        raise violated("query not completed")
    if log.rounds != 2:
        raise violated(f"rounds={log.rounds}, expected 2")
    if log.messages_sent != 2 * n:
        raise violated(f"messages={log.messages_sent}, expected 2n={2 * n}")
    qs = [s for kind, _, s in log.sizes if kind == "QUERY"]
    ps = [s for kind, _, s in log.sizes if kind == "PARTIAL"]
    if len(qs) != n or len(ps) != n:
        raise violated(f"{len(qs)} QUERY and {len(ps)} PARTIAL messages, expected {n} each")
    if params_id is not None:
        ctx = context_for(params_id)
        expected = wire.query_header_size() + m * ct_frame_size(1, ctx.n, ctx.L)
        if any(s != expected for s in qs):
            raise violated(f"QUERY size {qs[0]} != header + m * frame = {expected}")
    return AuditReport(log.qid, mode, n, m, log.rounds, log.messages_sent, qs, ps)
