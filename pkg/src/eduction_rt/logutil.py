"""Shared logging helper.

Log lines have the fixed shape ``[<ISO-8601 timestamp>]: <message>``. A log
can mirror into a file on top of a stream, which is how the broker process
keeps its stdout and its on-disk log identical.
"""
from __future__ import annotations

import sys
import threading
import time
from datetime import datetime, timezone


def now_ms() -> int:
    return int(time.time() * 1000)


def format_log_line(message: str, ts: datetime | None = None) -> str:
    stamp = (ts or datetime.now(timezone.utc)).isoformat()
    return f"[{stamp}]: {message}"


class TimestampedLog:
    """Writes `[timestamp]: message` lines to a stream and optionally a file."""

    def __init__(self, stream=None, path=None):
        self._stream = stream if stream is not None else sys.stdout
        self._lock = threading.Lock()
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def write(self, message: str) -> str:
        line = format_log_line(message)
        with self._lock:
            if self._stream is not None:
                print(line, file=self._stream, flush=True)
            if self._fh is not None:
                self._fh.write(line + "\n")
                self._fh.flush()
        return line

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None
