"""Blocking socket helpers for the length-prefixed frame stream.

Both ends of a broker connection exchange frame bodies prefixed with a
4-byte big-endian length. A `None` return anywhere means the peer is gone
(EOF, reset, or a length that cannot be honest); callers treat all of those
as a dead connection rather than trying to resynchronize the stream.
"""
from __future__ import annotations

import socket
import struct
import threading
from typing import Optional


def parse_hostport(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


def read_exact(sock: socket.socket, count: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < count:
        try:
            chunk = sock.recv(count - len(buf))
        except OSError:
            return None
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def read_frame_body(sock: socket.socket, max_body: int) -> Optional[bytes]:
    header = read_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > max_body:
        return None
    return read_exact(sock, length)


def write_frame(sock: socket.socket, body: bytes, lock: threading.Lock) -> None:
    """Send one length-prefixed frame; raises OSError on a dead socket."""
    data = struct.pack(">I", len(body)) + body
    with lock:
        sock.sendall(data)
