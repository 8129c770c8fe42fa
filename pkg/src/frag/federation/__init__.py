"""Multi-node query workflow: wire frames, nodes, transports, client."""

from frag.federation.client import (
    IN_PROCESS,
    SOCKET,
    Aggregator,
    AuditReport,
    Federation,
    FederationConfig,
    RoundLog,
    aggregate,
    audit_complexity,
    client_finalize,
    submit_query,
)
from frag.federation.node import Node, NodeServer, node_handle_query
from frag.federation.wire import AggregateMsg, Mode, MsgType, PartialMsg, QueryEnvelope

__all__ = [
    "IN_PROCESS", "SOCKET", "Aggregator", "AuditReport", "Federation", "FederationConfig", "RoundLog",
    "aggregate", "audit_complexity", "client_finalize", "submit_query",
    "Node", "NodeServer", "node_handle_query",
    "AggregateMsg", "Mode", "MsgType", "PartialMsg", "QueryEnvelope",
]
