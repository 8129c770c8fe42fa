"""A federation node: answers encrypted queries over its local store or share table."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from dataclasses import dataclass

from frag.errors import ErrorCode, FragError
from frag.federation import wire
from frag.federation.wire import Mode, MsgType, PartialMsg, QueryEnvelope
from frag.vecdb import ShareTable, VectorStore, prepare_query, scan

log = logging.getLogger("frag.node")


@dataclass
class Node:
    node_id: int
    params_id: bytes
    store: VectorStore | None = None
    shares: ShareTable | None = None

    def handle_query(self, env: QueryEnvelope) -> PartialMsg:
        if any(ct.params_id != self.params_id for ct in env.enc_query):
            raise FragError(ErrorCode.PARAMS_MISMATCH, f"node {self.node_id}: query uses foreign parameters")
        mode = wire.parse_mode(env.mode)
        q = prepare_query(env.enc_query)
        if mode == Mode.LOCAL_SCORE:
            if self.store is None:
                raise FragError(ErrorCode.UNKNOWN_MODE, f"node {self.node_id} holds no vector store")
            return PartialMsg(env.qid, self.node_id, mode, scores=scan(self.store, q))
        if self.shares is None:
            raise FragError(ErrorCode.UNKNOWN_MODE, f"node {self.node_id} holds no share table")
        return PartialMsg(env.qid, self.node_id, mode, partials=self.shares.partials(q))


def node_handle_query(env: QueryEnvelope, node: Node) -> PartialMsg:
    return node.handle_query(env)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        node: Node = self.server.node
        while True:
            try:
                got = wire.read_frame(self.rfile)
            except FragError as e:
                self._send(MsgType.ERROR, wire.encode_error(e.code, e.message))
                return
            if got is None:
                return
            mtype, payload = got
            try:
                if mtype == MsgType.HELLO:
                    if wire.decode_hello(payload) != node.params_id:
                        raise FragError(ErrorCode.PARAMS_MISMATCH, f"node {node.node_id}: params_id differs")
                    self._send(MsgType.HELLO, wire.encode_hello(node.params_id))
                elif mtype == MsgType.QUERY:
                    env = wire.decode_query(payload)
                    reply = wire.encode_partial(node.handle_query(env))
                    log.info("node=%d qid=%s mode=%s m=%d query_bytes=%d partial_bytes=%d", node.node_id,
                             env.qid.hex(), env.mode.name, len(env.enc_query), len(payload) + 5, len(reply) + 5)
                    self._send(MsgType.PARTIAL, reply)
                else:
                    raise FragError(ErrorCode.MALFORMED_FRAME, f"node does not accept {mtype.name}")
            except FragError as e:
                self._send(MsgType.ERROR, wire.encode_error(e.code, e.message))

    def _send(self, mtype: MsgType, payload: bytes) -> None:
        self.wfile.write(wire.frame(mtype, payload))
        self.wfile.flush()


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = False


class NodeServer:
    """Serves one node over TCP; each connection is handled sequentially."""

    def __init__(self, node: Node, host: str = "127.0.0.1", port: int = 0):
        try:
            self._server = _Server((host, port), _Handler)
        except OSError as e:
            raise FragError(ErrorCode.BIND_FAILURE, f"{host}:{port}: {e.strerror or e}") from e
        self._server.node = node
        self.node = node
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "NodeServer":
        self._thread = threading.Thread(target=self._server.serve_forever, name=f"frag-node-{self.node.node_id}",
                                        daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def exchange(sock: socket.socket, mtype: MsgType, payload: bytes, expect: MsgType) -> bytes:
    """Send one frame and read the reply, surfacing ERROR frames as FragError."""
    sock.sendall(wire.frame(mtype, payload))
    f = sock.makefile("rb")
    try:
        got = wire.read_frame(f)
    finally:
        f.close()
    if got is None:
        raise FragError(ErrorCode.MALFORMED_FRAME, "peer closed the connection")
    rtype, reply = got
    if rtype == MsgType.ERROR:
        raise wire.decode_error(reply)
    if rtype != expect:
        raise FragError(ErrorCode.MALFORMED_FRAME, f"expected {expect.name}, got {rtype.name}")
    return reply
