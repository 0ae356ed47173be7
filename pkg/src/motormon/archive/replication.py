"""Remote replication of archive batches.

:class:`RemoteServer` is the receiving end (the ``serve-remote`` command).
:class:`Replicator` runs beside the local archive, reads the persistent
outbox and pushes batches over TCP, reconnecting with exponential backoff.
Delivery is at-least-once; the remote applies batches idempotently.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
import time
from typing import Optional

from ..errors import ProtocolError
from . import wire
from .store import Store

logger = logging.getLogger(__name__)

BACKOFF_BASE = 0.1
BACKOFF_FACTOR = 2.0
BACKOFF_CAP = 10.0


def parse_endpoint(endpoint) -> tuple[str, int]:
    if isinstance(endpoint, tuple):
        return endpoint[0], int(endpoint[1])
    host, _, port = str(endpoint).rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must look like HOST:PORT, got {endpoint!r}")
    return host, int(port)


class _Handler(socketserver.StreamRequestHandler):
    def setup(self):
        super().setup()
        self.server.track(self.request, add=True)

    def finish(self):
        self.server.track(self.request, add=False)
        try:
            super().finish()
        except OSError:
            pass

    def handle(self):
        store: Store = self.server.store
        while True:
            try:
                msg_type, payload = wire.read_message(self.rfile)
            except EOFError:
                return
            except wire.CrcMismatch:
                self.server.naks += 1
                self._send(wire.encode_nak())
                continue
            except (ProtocolError, OSError) as exc:
                logger.info("closing replication connection: %s", exc)
                return
            try:
                if msg_type == wire.HELLO:
                    run_id, cfg = wire.decode_hello(payload)
                    store.register_run(run_id, json.loads(cfg) if cfg else {})
                    self._send(wire.encode_ack(store.highest_contiguous(run_id)))
                elif msg_type == wire.BATCH:
                    batch = wire.decode_batch_payload(payload)
                    store.write_batch(batch)
                    self.server.batches_applied += 1
                    self._send(wire.encode_ack(store.highest_contiguous(batch.run_id)))
                else:
                    self._send(wire.encode_nak())
            except Exception as exc:  # noqa: BLE001 - a bad message must not kill the server
                logger.warning("rejecting message type %d: %s", msg_type, exc)
                self._send(wire.encode_nak())

    def _send(self, data: bytes):
        try:
            self.wfile.write(data)
            self.wfile.flush()
        except OSError:
            pass


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, store: Store):
        self.store = store
        self.batches_applied = 0
        self.naks = 0
        self._conns = set()
        self._conns_lock = threading.Lock()
        super().__init__(address, _Handler)

    def track(self, sock, add: bool):
        with self._conns_lock:
            (self._conns.add if add else self._conns.discard)(sock)

    def drop_connections(self):
        with self._conns_lock:
            conns = list(self._conns)
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class RemoteServer:
    """Replication target; ``start`` serves in a background thread."""

    def __init__(self, store_path, host: str = "127.0.0.1", port: int = 0):
        self.store_path = store_path
        self.host = host
        self.port = port
        self.store: Optional[Store] = None
        self._server: Optional[_Server] = None
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self.host, self.port

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "RemoteServer":
        if self.store is None:
            self.store = Store(self.store_path)
        self._server = _Server((self.host, self.port), self.store)
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
                                        name="remote-server", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        if self.store is None:
            self.store = Store(self.store_path)
        self._server = _Server((self.host, self.port), self.store)
        self.port = self._server.server_address[1]
        try:
            self._server.serve_forever(poll_interval=0.1)
        finally:
            self._server.server_close()

    def stop(self):
        """Stop listening and cut every open connection (the store stays open for restart)."""
        if self._server is None:
            return
        self._server.shutdown()
        self._server.drop_connections()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._server = None

    def close(self):
        self.stop()
        if self.store is not None:
            self.store.close()
            self.store = None

    @property
    def batches_applied(self) -> int:
        return self._server.batches_applied if self._server else 0


class Replicator:
    """Pushes outbox batches of one run to a remote store."""

    def __init__(self, store_path, run_id: str, endpoint, run_config: Optional[dict] = None,
                 window: int = 64, timeout: float = 2.0, duplicate_every: int = 0):
        self.store = Store(store_path, outbox=True)
        self.run_id = run_id
        self.host, self.port = parse_endpoint(endpoint)
        self.run_config = run_config or {}
        self.window = window
        self.timeout = timeout
        # fault injection: resend every n-th batch immediately
        self.duplicate_every = duplicate_every
        self.acked: Optional[int] = None
        self.sent = 0
        self.resent = 0
        self.reconnects = 0
        self.last_error: Optional[str] = None
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> "Replicator":
        self._thread = threading.Thread(target=self._run, name="replicator", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10)
        self.store.close()

    def caught_up(self) -> bool:
        last = self.store.last_batch_id(self.run_id)
        return last is None or (self.acked is not None and self.acked >= last)

    def drain(self, timeout: float = 30.0) -> bool:
        """Wait until the remote has acknowledged every locally committed batch."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.caught_up():
                return True
            time.sleep(0.02)
        return self.caught_up()

    def _run(self):
        delay = BACKOFF_BASE
        while not self._stop.is_set():
            try:
                with socket.create_connection((self.host, self.port), timeout=self.timeout) as sock:
                    sock.settimeout(self.timeout)
                    delay = BACKOFF_BASE
                    self._session(sock)
            except (OSError, EOFError, ProtocolError) as exc:
                self.last_error = str(exc)
                self.reconnects += 1
                logger.info("replication link down (%s); retrying in %.1fs", exc, delay)
                if self._stop.wait(delay):
                    return
                delay = min(delay * BACKOFF_FACTOR, BACKOFF_CAP)

    def _session(self, sock: socket.socket):
        rfile = sock.makefile("rb")
        sock.sendall(wire.encode_hello(self.run_id, json.dumps(self.run_config)))
        self._handle_ack(self._expect_ack(rfile))
        while not self._stop.is_set():
            pending = self.store.outbox_after(self.run_id, self.acked, self.window)
            if not pending:
                time.sleep(0.01)
                continue
            out = []
            for batch_id, payload in pending:
                msg = wire.encode_message(wire.BATCH, payload)
                out.append(msg)
                self.sent += 1
                if self.duplicate_every and self.sent % self.duplicate_every == 0:
                    out.append(msg)
                    self.resent += 1
            sock.sendall(b"".join(out))
            for _ in out:
                msg_type, payload = wire.read_message(rfile)
                if msg_type == wire.ACK:
                    self._handle_ack(wire.decode_ack(payload))
                elif msg_type == wire.NAK:
                    # resend from the last acknowledged batch on the next round
                    self.resent += 1
                else:
                    raise ProtocolError(f"unexpected message type {msg_type}")

    def _expect_ack(self, rfile) -> Optional[int]:
        msg_type, payload = wire.read_message(rfile)
        if msg_type != wire.ACK:
            raise ProtocolError(f"expected ACK, got message type {msg_type}")
        return wire.decode_ack(payload)

    def _handle_ack(self, acked: Optional[int]):
        if acked is None:
            return
        if self.acked is None or acked > self.acked:
            self.acked = acked
            self.store.outbox_ack(self.run_id, acked)
