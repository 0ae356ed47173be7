"""Relational archive on SQLite.

Four data tables (run_config, samples, analysis_results, alarms) hold the
archived content.  Two bookkeeping tables sit beside them: ``batch_log``
records every committed batch so re-writes are no-ops, and ``outbox`` keeps
encoded batches until the remote store acknowledges them.
"""

from __future__ import annotations

import collections
import io
import json
import logging
import sqlite3
import threading
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import SchemaMismatchError, StoreError, ValidationError
from ..order import OrderSpectrum, average_spectra
from . import wire
from .batch import ArchiveBatch

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

SCHEMA = """
CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS run_config (
    run_id TEXT PRIMARY KEY,
    motor_id TEXT,
    start_time REAL,
    channels TEXT NOT NULL,
    thresholds TEXT NOT NULL,
    analysis TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS samples (
    run_id TEXT NOT NULL REFERENCES run_config(run_id),
    batch_id INTEGER NOT NULL,
    channel_id INTEGER NOT NULL,
    t REAL NOT NULL,
    value REAL NOT NULL,
    n_samples INTEGER NOT NULL,
    PRIMARY KEY (run_id, batch_id, channel_id, t)
);
CREATE INDEX IF NOT EXISTS samples_time ON samples (run_id, t, channel_id);
CREATE TABLE IF NOT EXISTS analysis_results (
    run_id TEXT NOT NULL REFERENCES run_config(run_id),
    channel_id INTEGER NOT NULL,
    t REAL NOT NULL,
    order_num REAL NOT NULL,
    amplitude REAL NOT NULL,
    baseline INTEGER NOT NULL,
    PRIMARY KEY (run_id, channel_id, t, order_num)
);
CREATE TABLE IF NOT EXISTS alarms (
    run_id TEXT NOT NULL REFERENCES run_config(run_id),
    channel_id INTEGER NOT NULL,
    kind INTEGER NOT NULL,
    value REAL NOT NULL,
    limit_value REAL NOT NULL,
    t_raise REAL NOT NULL,
    t_clear REAL,
    PRIMARY KEY (run_id, channel_id, kind, t_raise)
);
CREATE TABLE IF NOT EXISTS batch_log (
    run_id TEXT NOT NULL,
    batch_id INTEGER NOT NULL,
    t_start REAL NOT NULL,
    t_end REAL NOT NULL,
    PRIMARY KEY (run_id, batch_id)
);
CREATE TABLE IF NOT EXISTS outbox (
    run_id TEXT NOT NULL,
    batch_id INTEGER NOT NULL,
    payload BLOB NOT NULL,
    PRIMARY KEY (run_id, batch_id)
);
"""

DATA_TABLES = ("run_config", "samples", "analysis_results", "alarms")


class Store:
    """One SQLite connection, guarded by a lock so several threads may share it."""

    def __init__(self, path, outbox: bool = False):
        self.path = str(path)
        self.outbox = outbox
        self._lock = threading.RLock()
        self._contiguous: dict[str, Optional[int]] = {}
        try:
            if self.path != ":memory:":
                parent = Path(self.path).parent
                if not parent.is_dir():
                    raise StoreError(f"store directory {parent} does not exist")
            self.conn = sqlite3.connect(self.path, check_same_thread=False, timeout=30.0,
                                        isolation_level=None)
            self.conn.execute("PRAGMA journal_mode = WAL")
            self.conn.execute("PRAGMA synchronous = NORMAL")
            self.conn.execute("PRAGMA foreign_keys = ON")
            self._init_schema()
        except sqlite3.Error as exc:
            raise StoreError(f"cannot open store {self.path}: {exc}") from exc

    def _init_schema(self):
        with self._lock:
            self.conn.executescript(SCHEMA)
            row = self.conn.execute("SELECT value FROM meta WHERE key = 'schema_version'").fetchone()
            if row is None:
                self.conn.execute("INSERT INTO meta VALUES ('schema_version', ?)", (str(SCHEMA_VERSION),))
            elif int(row[0]) != SCHEMA_VERSION:
                raise SchemaMismatchError(
                    f"store {self.path} has schema version {row[0]}, expected {SCHEMA_VERSION}")

    def close(self):
        with self._lock:
            self.conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- runs ---------------------------------------------------------------

    def register_run(self, run_id: str, config: dict):
        """Insert the run_config row; idempotent."""
        with self._lock:
            self.conn.execute(
                "INSERT OR IGNORE INTO run_config VALUES (?, ?, ?, ?, ?, ?)",
                (run_id, config.get("motor_id"), config.get("start_time"),
                 json.dumps(config.get("channels", [])), json.dumps(config.get("thresholds", [])),
                 json.dumps(config.get("analysis", {}))),
            )

    def run_config(self, run_id: str) -> Optional[dict]:
        with self._lock:
            row = self.conn.execute("SELECT * FROM run_config WHERE run_id = ?", (run_id,)).fetchone()
        if row is None:
            return None
        return {"run_id": row[0], "motor_id": row[1], "start_time": row[2],
                "channels": json.loads(row[3]), "thresholds": json.loads(row[4]),
                "analysis": json.loads(row[5])}

    def runs(self) -> list[str]:
        with self._lock:
            return [r[0] for r in self.conn.execute("SELECT run_id FROM run_config ORDER BY start_time, rowid")]

    # -- batches ------------------------------------------------------------

    def has_batch(self, run_id: str, batch_id: int) -> bool:
        with self._lock:
            return self.conn.execute("SELECT 1 FROM batch_log WHERE run_id = ? AND batch_id = ?",
                                     (run_id, batch_id)).fetchone() is not None

    def write_batch(self, batch: ArchiveBatch) -> int:
        """Commit a batch atomically; a batch id already logged for the run is a no-op."""
        with self._lock:
            c = self.conn
            try:
                c.execute("BEGIN IMMEDIATE")
                if c.execute("SELECT 1 FROM batch_log WHERE run_id = ? AND batch_id = ?",
                             (batch.run_id, batch.batch_id)).fetchone():
                    c.execute("ROLLBACK")
                    return batch.batch_id
                rid = batch.run_id
                c.executemany(
                    "INSERT INTO samples VALUES (?, ?, ?, ?, ?, ?)",
                    [(rid, batch.batch_id, cid, t, v, n) for cid, t, v, n in batch.rows],
                )
                for ev in batch.events:
                    c.execute(
                        "INSERT INTO alarms VALUES (?, ?, ?, ?, ?, ?, ?) "
                        "ON CONFLICT (run_id, channel_id, kind, t_raise) DO UPDATE SET "
                        "t_clear = COALESCE(excluded.t_clear, alarms.t_clear)",
                        (rid, ev.channel_id, int(ev.kind), ev.value, ev.limit, ev.t, ev.cleared_t),
                    )
                for sp in batch.spectra:
                    orders = sp.spectrum.orders
                    c.executemany(
                        "INSERT OR REPLACE INTO analysis_results VALUES (?, ?, ?, ?, ?, ?)",
                        [(rid, sp.channel_id, sp.t, float(o), float(a), int(sp.baseline))
                         for o, a in zip(orders, sp.spectrum.amplitudes)],
                    )
                c.execute("INSERT INTO batch_log VALUES (?, ?, ?, ?)",
                          (rid, batch.batch_id, batch.t_start, batch.t_end))
                if self.outbox:
                    c.execute("INSERT INTO outbox VALUES (?, ?, ?)",
                              (rid, batch.batch_id, wire.encode_batch_payload(batch)))
                c.execute("COMMIT")
            except sqlite3.IntegrityError as exc:
                c.execute("ROLLBACK")
                raise StoreError(f"batch {batch.batch_id} violates store constraints: {exc}") from exc
            except sqlite3.Error:
                if c.in_transaction:
                    c.execute("ROLLBACK")
                raise
            self._advance_contiguous(batch.run_id)
            return batch.batch_id

    def _advance_contiguous(self, run_id: str):
        cur = self._contiguous.get(run_id, None)
        nxt = 0 if cur is None else cur + 1
        while self.conn.execute("SELECT 1 FROM batch_log WHERE run_id = ? AND batch_id = ?",
                                (run_id, nxt)).fetchone():
            cur = nxt
            nxt += 1
        self._contiguous[run_id] = cur

    def highest_contiguous(self, run_id: str) -> Optional[int]:
        with self._lock:
            if run_id not in self._contiguous:
                self._advance_contiguous(run_id)
            return self._contiguous[run_id]

    def batch_count(self, run_id: str) -> int:
        with self._lock:
            return self.conn.execute("SELECT COUNT(*) FROM batch_log WHERE run_id = ?", (run_id,)).fetchone()[0]

    # -- outbox -------------------------------------------------------------

    def outbox_after(self, run_id: str, after: Optional[int], limit: int = 256) -> list[tuple[int, bytes]]:
        lo = -1 if after is None else after
        with self._lock:
            return self.conn.execute(
                "SELECT batch_id, payload FROM outbox WHERE run_id = ? AND batch_id > ? "
                "ORDER BY batch_id LIMIT ?", (run_id, lo, limit)).fetchall()

    def outbox_ack(self, run_id: str, upto: int):
        with self._lock:
            self.conn.execute("DELETE FROM outbox WHERE run_id = ? AND batch_id <= ?", (run_id, upto))

    def outbox_size(self, run_id: Optional[str] = None) -> int:
        with self._lock:
            if run_id is None:
                return self.conn.execute("SELECT COUNT(*) FROM outbox").fetchone()[0]
            return self.conn.execute("SELECT COUNT(*) FROM outbox WHERE run_id = ?", (run_id,)).fetchone()[0]

    def last_batch_id(self, run_id: str) -> Optional[int]:
        with self._lock:
            return self.conn.execute("SELECT MAX(batch_id) FROM batch_log WHERE run_id = ?",
                                     (run_id,)).fetchone()[0]

    # -- queries ------------------------------------------------------------

    def _channel_ids_of_kind(self, kind: str) -> dict[str, list[int]]:
        out = {}
        for run_id in self.runs():
            cfg = self.run_config(run_id)
            out[run_id] = [c["id"] for c in cfg["channels"] if str(c.get("kind", "")).lower() == kind.lower()]
        return out

    def query(self, run_id: Optional[str] = None, t_from: Optional[float] = None,
              t_to: Optional[float] = None, channel_id: Optional[int] = None,
              kind: Optional[str] = None, table: str = "samples") -> list[tuple]:
        """Rows with ``t_from <= t < t_to`` matching every given filter, ordered by time.

        ``samples`` rows are ``(run_id, t, channel_id, value)``; ``spectra`` rows
        are ``(run_id, t, channel_id, order, amplitude)``; ``alarms`` rows are
        ``(run_id, t_raise, channel_id, kind, value, limit, t_clear)``.
        """
        if t_from is not None and t_to is not None and t_from > t_to:
            raise ValidationError(f"query range start {t_from:g} is after end {t_to:g}")
        if table == "samples":
            sql = "SELECT run_id, t, channel_id, value FROM samples"
            tcol = "t"
            order = "run_id, t, channel_id"
        elif table == "spectra":
            sql = "SELECT run_id, t, channel_id, order_num, amplitude FROM analysis_results"
            tcol = "t"
            order = "run_id, t, channel_id, order_num"
        elif table == "alarms":
            sql = "SELECT run_id, t_raise, channel_id, kind, value, limit_value, t_clear FROM alarms"
            tcol = "t_raise"
            order = "run_id, t_raise, channel_id, kind"
        else:
            raise ValidationError(f"unknown table {table!r}")
        where, args = [], []
        if run_id is not None:
            where.append("run_id = ?")
            args.append(run_id)
        if t_from is not None:
            where.append(f"{tcol} >= ?")
            args.append(t_from)
        if t_to is not None:
            where.append(f"{tcol} < ?")
            args.append(t_to)
        if channel_id is not None:
            where.append("channel_id = ?")
            args.append(channel_id)
        if kind is not None:
            by_run = self._channel_ids_of_kind(kind)
            clauses = []
            for rid, ids in by_run.items():
                if ids:
                    clauses.append(f"(run_id = ? AND channel_id IN ({','.join('?' * len(ids))}))")
                    args.extend([rid, *ids])
            where.append("(" + " OR ".join(clauses) + ")" if clauses else "0")
        if where:
            sql += " WHERE " + " AND ".join(where)
        sql += f" ORDER BY {order}"
        with self._lock:
            return self.conn.execute(sql, args).fetchall()

    def table_rows(self, table: str) -> list[tuple]:
        """Every row of a data table in a canonical order, for store comparison."""
        if table not in DATA_TABLES:
            raise ValidationError(f"unknown table {table!r}")
        with self._lock:
            cols = [r[1] for r in self.conn.execute(f"PRAGMA table_info({table})")]
            return self.conn.execute(f"SELECT * FROM {table} ORDER BY {', '.join(cols)}").fetchall()

    def row_counts(self) -> dict[str, int]:
        with self._lock:
            return {t: self.conn.execute(f"SELECT COUNT(*) FROM {t}").fetchone()[0] for t in DATA_TABLES}

    def spectra(self, run_id: str, baseline: Optional[bool] = None) -> dict[int, list[OrderSpectrum]]:
        """Archived spectra of a run grouped by channel, in time order."""
        sql = "SELECT channel_id, t, order_num, amplitude, baseline FROM analysis_results WHERE run_id = ?"
        args = [run_id]
        if baseline is not None:
            sql += " AND baseline = ?"
            args.append(int(baseline))
        sql += " ORDER BY channel_id, t, order_num"
        with self._lock:
            rows = self.conn.execute(sql, args).fetchall()
        grouped: dict = collections.defaultdict(lambda: collections.defaultdict(list))
        for cid, t, order, amp, _ in rows:
            grouped[cid][t].append((order, amp))
        out = {}
        for cid, by_t in grouped.items():
            specs = []
            for t in sorted(by_t):
                pts = by_t[t]
                res = pts[1][0] - pts[0][0] if len(pts) > 1 else 1.0
                specs.append(OrderSpectrum(res, np.array([a for _, a in pts]), 1.0 / res))
            out[cid] = specs
        return out

    def load_baseline(self, motor_or_run: str) -> dict[int, OrderSpectrum]:
        """Averaged baseline spectrum per channel.

        ``motor_or_run`` is a run id, or a motor id whose most recent run with
        baseline spectra is used.
        """
        with self._lock:
            candidates = [r[0] for r in self.conn.execute(
                "SELECT r.run_id FROM run_config r WHERE (r.run_id = ? OR r.motor_id = ?) AND EXISTS "
                "(SELECT 1 FROM analysis_results a WHERE a.run_id = r.run_id AND a.baseline = 1) "
                "ORDER BY r.start_time DESC, r.rowid DESC", (motor_or_run, motor_or_run))]
        if not candidates:
            raise StoreError(f"no baseline spectra stored for {motor_or_run!r}")
        per_channel = self.spectra(candidates[0], baseline=True)
        return {cid: average_spectra(specs) for cid, specs in per_channel.items()}


class Archiver:
    """Local archiving leg with retry.

    A batch that fails with an I/O error is kept in a bounded in-memory retry
    queue; once that is full further batches are appended to a journal file.
    Every successful write first drains the retry queue and then the journal.
    """

    def __init__(self, store: Store, journal_path=None, retry_capacity: int = 64):
        self.store = store
        self.journal_path = Path(journal_path) if journal_path else None
        self.retry = collections.deque()
        self.retry_capacity = retry_capacity
        self.failures = 0
        self.fail_hook = None  # test hook: callable(batch) that may raise sqlite3.OperationalError

    def _commit(self, batch: ArchiveBatch):
        if self.fail_hook is not None:
            self.fail_hook(batch)
        self.store.write_batch(batch)

    def write(self, batch: ArchiveBatch) -> bool:
        """Archive ``batch``; returns False when it had to be deferred."""
        try:
            self._drain_pending()
            self._commit(batch)
            return True
        except sqlite3.OperationalError as exc:
            self.failures += 1
            logger.warning("store write failed for batch %d: %s", batch.batch_id, exc)
            self._defer(batch)
            return False

    def _defer(self, batch):
        if len(self.retry) < self.retry_capacity and not self._journal_pending():
            self.retry.append(batch)
            return
        if self.journal_path is None:
            raise StoreError("retry queue full and no journal configured")
        with open(self.journal_path, "ab") as fh:
            fh.write(wire.encode_batch(batch))
            fh.flush()

    def _journal_pending(self) -> bool:
        return self.journal_path is not None and self.journal_path.exists() and self.journal_path.stat().st_size > 0

    def _drain_pending(self):
        while self.retry:
            self._commit(self.retry[0])
            self.retry.popleft()
        if self._journal_pending():
            self.replay_journal()

    @property
    def pending(self) -> int:
        return len(self.retry) + (len(read_journal(self.journal_path)) if self._journal_pending() else 0)

    def flush(self):
        self._drain_pending()

    def replay_journal(self) -> int:
        """Apply every journaled batch (idempotently) and truncate the journal."""
        if not self._journal_pending():
            return 0
        batches = read_journal(self.journal_path)
        for b in batches:
            self._commit(b)
        self.journal_path.write_bytes(b"")
        return len(batches)


def read_journal(path) -> list[ArchiveBatch]:
    data = Path(path).read_bytes()
    fh = io.BytesIO(data)
    out = []
    while fh.tell() < len(data):
        try:
            msg_type, payload = wire.read_message(fh)
        except (EOFError, wire.CrcMismatch):
            # torn tail from a crash mid-append
            break
        if msg_type == wire.BATCH:
            out.append(wire.decode_batch_payload(payload))
    return out


def stores_identical(a: Store, b: Store) -> bool:
    return all(a.table_rows(t) == b.table_rows(t) for t in DATA_TABLES)
