"""How QUERY/PARTIAL exchanges reach nodes: direct calls or TCP frames."""

from __future__ import annotations

import socket
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from frag.errors import ErrorCode, FragError
from frag.federation import wire
from frag.federation.node import Node, exchange
from frag.federation.wire import MsgType, PartialMsg, QueryEnvelope


@dataclass
class Exchange:
    partial: PartialMsg
    query_bytes: int
    partial_bytes: int


def _unreachable(node_id: int, why: str) -> FragError:
    return FragError(ErrorCode.NODE_UNREACHABLE, f"node {node_id}: {why}", node_id=node_id)


@dataclass
class InProcessTransport:
    """Calls nodes directly; frame sizes are computed, not serialized.

    When ``tap`` is a list, every frame is also encoded and appended to it,
    which is what the transparency and wire-tap tests inspect.
    """
    nodes: Mapping[int, Node]
    tap: list[tuple[int, bytes]] | None = None
    down: set[int] = field(default_factory=set)

    def connect(self, node_ids: Iterable[int], params_id: bytes) -> None:
        for nid in node_ids:
            if nid in self.down or nid not in self.nodes:
                raise _unreachable(nid, "not registered or down")
            if self.nodes[nid].params_id != params_id:
                raise FragError(ErrorCode.PARAMS_MISMATCH, f"node {nid}: params_id differs")

    def query(self, node_id: int, env: QueryEnvelope) -> Exchange:
        if node_id in self.down:
            raise _unreachable(node_id, "went down")
        msg = self.nodes[node_id].handle_query(env)
        if self.tap is not None:
            self.tap.append((node_id, wire.frame(MsgType.QUERY, wire.encode_query(env))))
            self.tap.append((node_id, wire.frame(MsgType.PARTIAL, wire.encode_partial(msg))))
        return Exchange(msg, wire.query_frame_size(env), wire.partial_frame_size(msg))

    def close(self) -> None:
        pass


@dataclass
class SocketTransport:
    addresses: Mapping[int, tuple[str, int]]
    timeout: float = 600.0
    tap: list[tuple[int, bytes]] | None = None
    _socks: dict[int, socket.socket] = field(default_factory=dict)

    def connect(self, node_ids: Iterable[int], params_id: bytes) -> None:
        """Open and HELLO every node before any query leaves (fail-fast)."""
        try:
            for nid in node_ids:
                if nid in self._socks:
                    continue
                if nid not in self.addresses:
                    raise _unreachable(nid, "no address configured")
                host, port = self.addresses[nid]
                try:
                    sock = socket.create_connection((host, port), timeout=self.timeout)
                except OSError as e:
                    raise _unreachable(nid, f"{host}:{port} {e.strerror or e}") from e
                self._socks[nid] = sock
                try:
                    theirs = wire.decode_hello(exchange(sock, MsgType.HELLO, wire.encode_hello(params_id),
                                                        MsgType.HELLO))
                except OSError as e:
                    raise _unreachable(nid, str(e)) from e
                if theirs != params_id:
                    raise FragError(ErrorCode.PARAMS_MISMATCH, f"node {nid}: params_id differs")
        except BaseException:
            self.close()
            raise

    def query(self, node_id: int, env: QueryEnvelope) -> Exchange:
        sock = self._socks.get(node_id)
        if sock is None:
            raise _unreachable(node_id, "not connected")
        payload = wire.encode_query(env)
        try:
            reply = exchange(sock, MsgType.QUERY, payload, MsgType.PARTIAL)
        except OSError as e:
            raise _unreachable(node_id, str(e)) from e
        if self.tap is not None:
            self.tap.append((node_id, wire.frame(MsgType.QUERY, payload)))
            self.tap.append((node_id, wire.frame(MsgType.PARTIAL, reply)))
        return Exchange(wire.decode_partial(reply), len(payload) + 5, len(reply) + 5)

    def close(self) -> None:
        for sock in self._socks.values():
            try:
                sock.close()
            except OSError:
                pass
        self._socks.clear()
