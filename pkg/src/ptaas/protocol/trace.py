"""Pipeline event log used to check that a round follows the procedure order."""

from __future__ import annotations

import threading

DEVICE_PRE = (
    "collect_data",
    "create_model",
    "hash_function",
    "add_differential_privacy_noise",
    "encrypt",
    "transmit_query",
)
DEVICE_POST = (
    "receive_model",
    "check_integrity",
    "decrypt",
    "deploy_to_inference_engine",
)
CLOUD_EVENTS = (
    "receive_query",
    "verify_query",
    "decrypt",
    "similarity_search",
    "transfer_learning",
    "encrypt",
    "transmit_model",
)
DEVICE_EVENTS = DEVICE_PRE + DEVICE_POST


class EventTrace:
    def __init__(self):
        self._events: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def emit(self, actor: str, event: str) -> None:
        with self._lock:
            self._events.append((actor, event))

    @property
    def events(self) -> list[tuple[str, str]]:
        with self._lock:
            return list(self._events)

    def clear(self) -> None:
        with self._lock:
            self._events.clear()


class _NullTrace:
    def emit(self, actor: str, event: str) -> None:
        pass


NULL_TRACE = _NullTrace()
