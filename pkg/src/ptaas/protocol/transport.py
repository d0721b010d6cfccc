"""Length-framed stream transport for sealed envelopes."""

from __future__ import annotations

import socket
import struct

from ..envelope import HEADER_LEN, MAGIC
from ..errors import MalformedFrame

DEFAULT_MAX_FRAME = 8 * 1024 * 1024


class ConnectionClosed(Exception):
    """Peer closed the stream cleanly between frames."""


class FrameTooLarge(MalformedFrame):
    pass


def _recv_exact(sock: socket.socket, n: int, allow_eof: bool = False) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if allow_eof and not buf:
                raise ConnectionClosed()
            raise MalformedFrame(f"stream ended after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    """Read one complete frame; partial reads are reassembled.

    Raises ConnectionClosed on clean EOF before a frame starts, MalformedFrame
    if the stream does not begin with the frame magic, FrameTooLarge if the
    declared length exceeds ``max_frame``.
    """
    header = _recv_exact(sock, HEADER_LEN, allow_eof=True)
    if header[:4] != MAGIC:
        raise MalformedFrame("stream does not start with frame magic")
    (n,) = struct.unpack_from(">I", header, HEADER_LEN - 4)
    if HEADER_LEN + n > max_frame:
        raise FrameTooLarge(f"frame of {HEADER_LEN + n} bytes exceeds limit {max_frame}")
    return header + _recv_exact(sock, n)


def send_frame(sock: socket.socket, frame: bytes) -> None:
    sock.sendall(frame)
