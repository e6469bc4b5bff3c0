"""Vector fields served by an external process over newline-delimited JSON.

One request per state row::

    {"t": 0.25, "state": [1.0, 2.0], "prompt": null}

and one reply per request, in order::

    {"field": [0.5, -1.0]}

The transport is either a child process (its stdin/stdout) or a TCP socket.
"""

from __future__ import annotations

import json
import os
import selectors
import shlex
import socket
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .fields import VectorField

TRANSPORTS = ("stdio", "tcp")


class RemoteFieldError(RuntimeError):
    """Base class; ``payload`` holds the raw bytes received (if any)."""

    def __init__(self, message: str, payload: Union[bytes, str, None] = None):
        super().__init__(message)
        self.payload = payload


class RemoteTimeoutError(RemoteFieldError):
    pass


class MalformedResponseError(RemoteFieldError):
    pass


class DimensionMismatchError(RemoteFieldError):
    pass


@dataclass(frozen=True)
class RemoteFieldEndpoint:
    """Where and how to reach a field server.

    ``command`` (argv list or shell-style string) is used for ``stdio``,
    ``address`` (``host:port``) for ``tcp``. ``reentrant`` endpoints may be
    shared by concurrent workers; otherwise each worker thread opens its own
    connection.
    """

    transport: str = "stdio"
    command: Union[Sequence[str], str, None] = None
    address: Optional[str] = None
    prompt: Optional[str] = None
    timeout: float = 10.0
    reentrant: bool = False

    def __post_init__(self):
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}, got {self.transport!r}")
        if self.transport == "stdio" and not self.command:
            raise ValueError("stdio transport needs a command")
        if self.transport == "tcp":
            if not self.address or ":" not in self.address:
                raise ValueError("tcp transport needs an address of the form host:port")
        if not self.timeout > 0:
            raise ValueError(f"timeout must be positive, got {self.timeout}")

    @property
    def argv(self) -> list[str]:
        return shlex.split(self.command) if isinstance(self.command, str) else list(self.command)

    @classmethod
    def from_uri(cls, uri: str, **kw) -> "RemoteFieldEndpoint":
        """``tcp://host:port`` or a command line for a stdio server."""
        if uri.startswith("tcp://"):
            return cls(transport="tcp", address=uri[len("tcp://"):], **kw)
        return cls(transport="stdio", command=uri, **kw)

    def to_dict(self) -> dict:
        return {
            "transport": self.transport,
            "command": self.command if isinstance(self.command, (str, type(None))) else list(self.command),
            "address": self.address,
            "prompt": self.prompt,
            "timeout": self.timeout,
            "reentrant": self.reentrant,
        }


class _Connection:
    """A line-oriented duplex channel with deadlines."""

    def __init__(self, ep: RemoteFieldEndpoint):
        self.ep = ep
        self._buf = b""
        self._proc = None
        self._sock = None
        if ep.transport == "stdio":
            try:
                self._proc = subprocess.Popen(ep.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0)
            except OSError as exc:
                raise RemoteFieldError(f"cannot start field server {ep.argv[:1]}: {exc}") from exc
            self._rfd = self._proc.stdout.fileno()
        else:
            host, port = ep.address.rsplit(":", 1)
            try:
                self._sock = socket.create_connection((host, int(port)), timeout=ep.timeout)
            except socket.timeout as exc:
                raise RemoteTimeoutError(f"connecting to {ep.address} timed out") from exc
            except OSError as exc:
                raise RemoteFieldError(f"cannot connect to {ep.address}: {exc}") from exc
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock.setblocking(False)
            self._rfd = self._sock.fileno()
        self._sel = selectors.DefaultSelector()
        self._sel.register(self._rfd, selectors.EVENT_READ)

    def send(self, data: bytes):
        try:
            if self._proc is not None:
                self._proc.stdin.write(data)
                self._proc.stdin.flush()
            else:
                self._sock.setblocking(True)
                self._sock.settimeout(self.ep.timeout)
                try:
                    self._sock.sendall(data)
                finally:
                    self._sock.setblocking(False)
        except (BrokenPipeError, ConnectionError) as exc:
            raise RemoteFieldError(f"connection lost while sending: {exc}") from exc
        except socket.timeout as exc:
            raise RemoteTimeoutError("send timed out") from exc

    def _read_some(self) -> bytes:
        if self._proc is not None:
            return os.read(self._rfd, 65536)
        try:
            return self._sock.recv(65536)
        except BlockingIOError:
            return None

    def recv_line(self, deadline: float) -> bytes:
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0 or not self._sel.select(remaining):
                raise RemoteTimeoutError(f"no reply within {self.ep.timeout}s", self._buf)
            chunk = self._read_some()
            if chunk is None:
                continue
            if not chunk:
                raise MalformedResponseError("connection closed before a full reply line", self._buf)
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def close(self):
        self._sel.close()
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
            self._proc.stdout.close()
        if self._sock is not None:
            self._sock.close()


def _parse_reply(line: bytes, d: int) -> np.ndarray:
    try:
        msg = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedResponseError(f"reply is not JSON: {exc}", line) from exc
    if not isinstance(msg, dict) or "field" not in msg:
        raise MalformedResponseError('reply lacks a "field" key', line)
    vec = msg["field"]
    if not isinstance(vec, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec):
        raise MalformedResponseError('"field" must be a flat list of numbers', line)
    if len(vec) != d:
        raise DimensionMismatchError(f"field has dimension {len(vec)}, state has {d}", line)
    return np.asarray(vec, dtype=float)


def _request(x_row: np.ndarray, t: float, prompt: Optional[str]) -> bytes:
    return (json.dumps({"t": float(t), "state": [float(v) for v in x_row], "prompt": prompt}) + "\n").encode()


def remote_field_eval(ep: RemoteFieldEndpoint, x, t: float, conn: Optional[_Connection] = None) -> np.ndarray:
    """Evaluate the remote field at ``x`` (one state or a batch of rows).

    Requests for all rows are written before replies are read. A private
    connection is opened and closed when ``conn`` is not given.
    """
    arr = np.asarray(x, dtype=float)
    rows = np.atleast_2d(arr)
    own = conn is None
    conn = conn or _Connection(ep)
    try:
        conn.send(b"".join(_request(r, t, ep.prompt) for r in rows))
        deadline = time.monotonic() + ep.timeout
        out = np.stack([_parse_reply(conn.recv_line(deadline), rows.shape[1]) for _ in rows])
    finally:
        if own:
            conn.close()
    return out.reshape(arr.shape)


@dataclass
class RemoteField:
    """Adapter exposing a remote endpoint as a :class:`VectorField`.

    Connections are opened lazily and reused; use as a context manager (or
    call :meth:`close`) to shut them down.
    """

    endpoint: RemoteFieldEndpoint
    _local: threading.local = field(default_factory=threading.local, repr=False)
    _shared: Optional[_Connection] = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _all: list = field(default_factory=list, repr=False)

    def _conn(self) -> _Connection:
        if self.endpoint.reentrant:
            if self._shared is None:
                self._shared = _Connection(self.endpoint)
                self._all.append(self._shared)
            return self._shared
        c = getattr(self._local, "conn", None)
        if c is None:
            c = self._local.conn = _Connection(self.endpoint)
            with self._lock:
                self._all.append(c)
        return c

    def __call__(self, x, t) -> np.ndarray:
        if self.endpoint.reentrant:
            # one shared stream: requests and replies must not interleave
            with self._lock:
                return remote_field_eval(self.endpoint, x, t, self._conn())
        return remote_field_eval(self.endpoint, x, t, self._conn())

    def as_field(self) -> VectorField:
        return VectorField(self, f"remote({self.endpoint.transport})")

    def close(self):
        with self._lock:
            for c in self._all:
                c.close()
            self._all.clear()
            self._shared = None
            self._local = threading.local()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
