"""Reference field server for the remote protocol (also the test double).

    python -m rectiflow.fieldserver --mode analytic --mu 10 --dim 1
    python -m rectiflow.fieldserver --mode echo --tcp 0

With ``--tcp`` the bound port is printed on the first stdout line. Modes:

* ``echo``: returns the state as the field
* ``analytic``: the closed-form Gaussian rectified-flow field
* ``wrong_dim``: appends one coordinate
* ``garbage``: replies with a non-JSON line
* ``silent``: never replies
"""

from __future__ import annotations

import argparse
import json
import socket
import sys
import threading
import time

import numpy as np

from .core import DEFAULT_DELTA, GaussianDist
from .fields import InterpolationMarginal, analytic_marginal_field

MODES = ("echo", "analytic", "wrong_dim", "garbage", "silent")


def make_handler(mode: str, mu: float = 10.0, dim: int = 1, delta: float = DEFAULT_DELTA):
    u = analytic_marginal_field(InterpolationMarginal(GaussianDist.isotropic(mu, 1.0, dim)), delta)

    def handle(line: bytes):
        msg = json.loads(line)
        state = msg["state"]
        if mode == "echo":
            return {"field": state}
        if mode == "analytic":
            return {"field": u(np.asarray(state, dtype=float), msg["t"]).tolist()}
        if mode == "wrong_dim":
            return {"field": list(state) + [0.0]}
        if mode == "garbage":
            return "not json"
        return None

    return handle


def _reply(handle, line: bytes) -> bytes | None:
    out = handle(line)
    if out is None:
        return None
    if isinstance(out, str):
        return (out + "\n").encode()
    return (json.dumps(out) + "\n").encode()


def serve_stream(handle, rfile, wfile):
    for line in rfile:
        if not line.strip():
            continue
        data = _reply(handle, line)
        if data is None:
            time.sleep(3600)
            continue
        wfile.write(data)
        wfile.flush()


def _serve_conn(handle, conn):
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    with conn, conn.makefile("rb") as r, conn.makefile("wb") as w:
        try:
            serve_stream(handle, r, w)
        except (BrokenPipeError, ConnectionError):
            pass


def serve_tcp(handle, port: int = 0, host: str = "127.0.0.1", announce=sys.stdout):
    """Serve until killed; every client connection gets its own thread."""
    srv = socket.create_server((host, port))
    print(srv.getsockname()[1], file=announce, flush=True)
    while True:
        conn, _ = srv.accept()
        threading.Thread(target=_serve_conn, args=(handle, conn), daemon=True).start()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mode", choices=MODES, default="analytic")
    ap.add_argument("--mu", type=float, default=10.0)
    ap.add_argument("--dim", type=int, default=1)
    ap.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    ap.add_argument("--tcp", type=int, default=None, metavar="PORT", help="listen on TCP (0 = any free port)")
    args = ap.parse_args(argv)
    handle = make_handler(args.mode, args.mu, args.dim, args.delta)
    if args.tcp is not None:
        serve_tcp(handle, args.tcp)
    else:
        serve_stream(handle, sys.stdin.buffer, sys.stdout.buffer)


if __name__ == "__main__":
    main()
