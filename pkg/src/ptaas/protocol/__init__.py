"""Service layer: the device and cloud procedures over a framed stream."""

from .client import (
    ClientSession,
    LoopbackTransport,
    QueryConfig,
    RoundOutcome,
    SocketTransport,
    UpdatePolicy,
    device_execute,
    run_updates,
)
from .server import ServerState, ThreadedServer, cloud_execute, verify_query
from .trace import CLOUD_EVENTS, DEVICE_EVENTS, EventTrace

__all__ = [
    "CLOUD_EVENTS", "DEVICE_EVENTS", "ClientSession", "EventTrace", "LoopbackTransport",
    "QueryConfig", "RoundOutcome", "ServerState", "SocketTransport", "ThreadedServer",
    "UpdatePolicy", "cloud_execute", "device_execute", "run_updates", "verify_query",
]
