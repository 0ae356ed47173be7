import io
import socket
import sqlite3
import time

import numpy as np
import pytest

from motormon.archive import (ArchiveBatch, Archiver, Batcher, RemoteServer, Replicator, SpectrumRecord, Store,
                              export_csv, read_csv, read_journal, stores_identical)
from motormon.archive import wire
from motormon.errors import ProtocolError, SchemaMismatchError, StoreError, ValidationError
from motormon.order import OrderSpectrum
from motormon.source import SampleFrame
from motormon.threshold import AlarmEvent, AlarmKind

RUN = "0123456789abcdef0123456789abcdef"


def frames_for(t0, seconds, rates, seqs=None):
    out = []
    for cid, rate in rates.items():
        g0 = int(round(t0 * rate))
        n = int(round(seconds * rate))
        out.append(SampleFrame(cid, t0, rate, np.arange(g0, g0 + n, dtype=float), 0))
    return out


def make_batches(n_windows=50, rates=None):
    rates = rates or {0: 25000.0, 4: 10000.0}
    b = Batcher(RUN, 0.01)
    out = []
    for k in range(n_windows // 10):
        out += b.add(frames_for(k * 0.1, 0.1, rates), (k + 1) * 0.1)
    return out + b.flush()


def sample_batch(batch_id=0, events=(), spectra=()):
    return ArchiveBatch(RUN, batch_id, batch_id * 0.01, (batch_id + 1) * 0.01,
                        [(cid, batch_id * 0.01, float(cid) + batch_id, 100) for cid in range(7)],
                        list(events), list(spectra))


# -- batching ----------------------------------------------------------------


def test_batcher_windows_and_means():
    batches = make_batches(20)
    assert [b.batch_id for b in batches] == list(range(20))
    b3 = batches[3]
    rows = {cid: (t, v, n) for cid, t, v, n in b3.rows}
    # channel 0 at 25 kSPS: samples 750..999 in window 3
    assert rows[0] == (pytest.approx(0.03), pytest.approx(np.mean(np.arange(750, 1000))), 250)
    assert rows[4][2] == 100
    total = {cid: sum(n for b in batches for c, _, _, n in b.rows if c == cid) for cid in (0, 4)}
    assert total == {0: 5000, 4: 2000}


def test_batcher_slow_channel_leaves_windows_without_rows():
    b = Batcher(RUN, 0.01)
    out = b.add([SampleFrame(4, 0.0, 50.0, np.ones(5), 0)], 0.1) + b.flush()
    with_rows = [x.batch_id for x in out if x.rows]
    assert with_rows == [0, 2, 4, 6, 8]
    assert len(out) == 10


def test_batcher_routes_events_and_spectra():
    ev = AlarmEvent(4, AlarmKind.HighLimit, 90.0, 80.0, 0.034)
    sp = SpectrumRecord(0, 0.056, OrderSpectrum(0.125, np.ones(4), 8.0))
    out = Batcher(RUN, 0.01).add([], 0.1, [ev], [sp])
    assert out[3].events == [ev]
    assert out[5].spectra == [sp]


# -- store -------------------------------------------------------------------


def test_empty_batch_commits(tmp_path):
    with Store(tmp_path / "s.db") as s:
        s.register_run(RUN, {"motor_id": "m"})
        s.write_batch(ArchiveBatch(RUN, 0, 0.0, 0.01))
        assert s.has_batch(RUN, 0)
        assert s.row_counts()["samples"] == 0


def test_write_and_query(tmp_path):
    with Store(tmp_path / "s.db") as s:
        s.register_run(RUN, {"motor_id": "m", "channels": [{"id": 4, "kind": "Temperature"}]})
        for k in range(5):
            s.write_batch(sample_batch(k))
        assert len(s.query(RUN, 0.0, 0.01)) == 7
        rows = s.query(RUN, 0.0, 1.0, channel_id=3)
        assert [r[3] for r in rows] == [3.0, 4.0, 5.0, 6.0, 7.0]
        assert len(s.query(RUN, 0.0, 1.0, kind="Temperature")) == 5
        assert s.query(RUN, 0.5, 0.5) == []
        with pytest.raises(ValidationError):
            s.query(RUN, 1.0, 0.0)


def test_duplicate_write_is_noop(tmp_path):
    with Store(tmp_path / "s.db") as s:
        s.register_run(RUN, {})
        s.write_batch(sample_batch(42))
        before = s.row_counts()
        s.write_batch(sample_batch(42))
        assert s.row_counts() == before


def test_alarm_upsert_fills_clear_time(tmp_path):
    raise_ev = AlarmEvent(4, AlarmKind.HighLimit, 90.0, 80.0, 0.005)
    clear_ev = AlarmEvent(4, AlarmKind.HighLimit, 90.0, 80.0, 0.005, cleared_t=0.025)
    with Store(tmp_path / "s.db") as s:
        s.register_run(RUN, {})
        s.write_batch(sample_batch(0, events=[raise_ev]))
        s.write_batch(sample_batch(2, events=[clear_ev]))
        rows = s.query(RUN, table="alarms")
        assert len(rows) == 1 and rows[0][-1] == 0.025


def test_spectra_round_trip_and_baseline(tmp_path):
    amps = np.linspace(0, 1, 9)
    rec = SpectrumRecord(0, 0.005, OrderSpectrum(0.125, amps, 8.0), baseline=True)
    with Store(tmp_path / "s.db") as s:
        s.register_run(RUN, {"motor_id": "motor-x"})
        s.write_batch(sample_batch(0, spectra=[rec]))
        got = s.load_baseline("motor-x")[0]
        assert got.order_resolution == pytest.approx(0.125)
        assert np.array_equal(got.amplitudes, amps)
        assert s.load_baseline(RUN)[0].amplitudes.size == 9
        with pytest.raises(StoreError):
            s.load_baseline("unknown-motor")


def test_missing_directory(tmp_path):
    with pytest.raises(StoreError):
        Store(tmp_path / "nope" / "s.db")


def test_schema_mismatch(tmp_path):
    path = tmp_path / "s.db"
    Store(path).close()
    con = sqlite3.connect(path)
    con.execute("UPDATE meta SET value = '99' WHERE key = 'schema_version'")
    con.commit()
    con.close()
    with pytest.raises(SchemaMismatchError):
        Store(path)


def test_highest_contiguous(tmp_path):
    with Store(tmp_path / "s.db") as s:
        s.register_run(RUN, {})
        assert s.highest_contiguous(RUN) is None
        for k in (0, 1, 3):
            s.write_batch(sample_batch(k))
        assert s.highest_contiguous(RUN) == 1
        s.write_batch(sample_batch(2))
        assert s.highest_contiguous(RUN) == 3


# -- archiver retry / journal --------------------------------------------------


def test_archiver_retry_then_journal(tmp_path):
    store = Store(tmp_path / "s.db")
    store.register_run(RUN, {})
    arch = Archiver(store, tmp_path / "journal.bin", retry_capacity=3)
    failing = {"on": True}

    def hook(batch):
        if failing["on"]:
            raise sqlite3.OperationalError("disk I/O error")

    arch.fail_hook = hook
    results = [arch.write(sample_batch(k)) for k in range(10)]
    assert not any(results)
    assert len(arch.retry) == 3
    assert len(read_journal(tmp_path / "journal.bin")) == 7
    assert arch.pending == 10
    failing["on"] = False
    assert arch.write(sample_batch(10))
    assert arch.pending == 0
    assert store.batch_count(RUN) == 11
    store.close()


def test_journal_replay_after_crash(tmp_path):
    journal = tmp_path / "journal.bin"
    batches = [sample_batch(k) for k in range(5)]
    # a crash mid-append leaves a torn final record
    data = b"".join(wire.encode_batch(b) for b in batches)
    journal.write_bytes(data + wire.encode_batch(sample_batch(5))[:20])
    assert len(read_journal(journal)) == 5
    store = Store(tmp_path / "s.db")
    store.register_run(RUN, {})
    store.write_batch(batches[0])  # already committed before the crash
    arch = Archiver(store, journal)
    assert arch.replay_journal() == 5
    assert store.batch_count(RUN) == 5
    assert journal.read_bytes() == b""
    store.close()


# -- CSV ---------------------------------------------------------------------


def test_csv_round_trip_bit_exact(tmp_path, rng):
    with Store(tmp_path / "s.db") as s:
        s.register_run(RUN, {})
        for k in range(100 // 7 + 1):
            b = sample_batch(k)
            b.rows = [(cid, t, float(rng.normal() * 10.0 ** rng.integers(-8, 8)), n) for cid, t, _, n in b.rows]
            s.write_batch(b)
        n = export_csv(s, tmp_path / "out.csv", run_id=RUN, channel_id=2)
        header, rows = read_csv(tmp_path / "out.csv")
        queried = s.query(RUN, channel_id=2)
    assert header == ["t", "channel", "value"]
    assert n == len(rows) == len(queried)
    assert all(r[2] == q[3] and r[0] == q[1] for r, q in zip(rows, queried))


def test_csv_line_counts(tmp_path):
    with Store(tmp_path / "s.db") as s:
        s.register_run(RUN, {})
        assert export_csv(s, tmp_path / "empty.csv") == 0
        assert (tmp_path / "empty.csv").read_bytes() == b"t,channel,value\r\n"
        for k in range(100):
            s.write_batch(ArchiveBatch(RUN, k, k * 0.01, (k + 1) * 0.01, [(0, k * 0.01, 1.0, 1)]))
        assert export_csv(s, tmp_path / "full.csv") == 100
    assert len((tmp_path / "full.csv").read_bytes().splitlines()) == 101


# -- wire protocol -----------------------------------------------------------


def test_wire_batch_round_trip():
    ev = AlarmEvent(-1, AlarmKind.OrderFault, 12.5, 5.0, 0.003, cleared_t=0.2)
    sp = SpectrumRecord(1, 0.004, OrderSpectrum(0.125, np.arange(5.0), 8.0), True)
    b = sample_batch(7, [ev], [sp])
    msg = wire.encode_batch(b)
    assert msg[:4] == b"MOTR" and msg[4] == 1 and msg[5] == wire.BATCH
    mtype, payload = wire.read_message(io.BytesIO(msg))
    out = wire.decode_batch_payload(payload)
    assert (out.run_id, out.batch_id, out.rows) == (b.run_id, b.batch_id, b.rows)
    assert out.events == [ev]
    assert out.spectra[0].baseline and np.array_equal(out.spectra[0].spectrum.amplitudes, np.arange(5.0))


def test_wire_crc_mismatch():
    msg = bytearray(wire.encode_ack(5))
    msg[-5] ^= 1
    with pytest.raises(wire.CrcMismatch):
        wire.read_message(io.BytesIO(bytes(msg)))


def test_wire_bad_magic_and_eof():
    with pytest.raises(ProtocolError):
        wire.read_message(io.BytesIO(b"XXXX" + bytes(20)))
    with pytest.raises(EOFError):
        wire.read_message(io.BytesIO(b""))


def test_wire_ack_sentinel():
    assert wire.decode_ack(wire.read_message(io.BytesIO(wire.encode_ack(None)))[1]) is None
    assert wire.decode_ack(wire.read_message(io.BytesIO(wire.encode_ack(0)))[1]) == 0


# -- replication -------------------------------------------------------------


def _fill(path, n):
    s = Store(path, outbox=True)
    s.register_run(RUN, {"motor_id": "m"})
    for k in range(n):
        s.write_batch(sample_batch(k))
    return s


def test_replication_converges(tmp_path):
    local = _fill(tmp_path / "local.db", 200)
    server = RemoteServer(tmp_path / "remote.db").start()
    rep = Replicator(tmp_path / "local.db", RUN, server.endpoint, {"motor_id": "m"}).start()
    try:
        assert rep.drain(20)
        assert stores_identical(local, server.store)
        assert local.outbox_size(RUN) == 0
    finally:
        rep.stop()
        server.close()
        local.close()


def test_replication_duplicates_change_nothing(tmp_path):
    local = _fill(tmp_path / "local.db", 150)
    server = RemoteServer(tmp_path / "remote.db").start()
    rep = Replicator(tmp_path / "local.db", RUN, server.endpoint, {"motor_id": "m"}, duplicate_every=3).start()
    try:
        assert rep.drain(20)
        assert rep.resent > 0
        assert server.batches_applied > 150
        assert server.store.row_counts() == local.row_counts()
        assert stores_identical(local, server.store)
    finally:
        rep.stop()
        server.close()
        local.close()


def test_replication_survives_restart(tmp_path):
    local = _fill(tmp_path / "local.db", 50)
    server = RemoteServer(tmp_path / "remote.db").start()
    port = server.port
    rep = Replicator(tmp_path / "local.db", RUN, server.endpoint, {"motor_id": "m"}).start()
    try:
        assert rep.drain(10)
        server.stop()
        for k in range(50, 120):
            local.write_batch(sample_batch(k))
        time.sleep(0.5)
        assert not rep.caught_up()
        server.port = port
        server.start()
        assert rep.drain(20)
        assert rep.reconnects >= 1
        assert stores_identical(local, server.store)
    finally:
        rep.stop()
        server.close()
        local.close()


def test_server_survives_garbage(tmp_path):
    server = RemoteServer(tmp_path / "remote.db").start()
    try:
        with socket.create_connection(("127.0.0.1", server.port), timeout=2) as s:
            s.sendall(b"\x00garbage that is not a frame" * 4)
            assert s.recv(100) == b""  # bad magic closes the connection
        # a well-framed message with a bad CRC is answered with NAK
        with socket.create_connection(("127.0.0.1", server.port), timeout=2) as s:
            msg = bytearray(wire.encode_batch(sample_batch(0)))
            msg[-1] ^= 0xFF
            s.sendall(bytes(msg))
            mtype, _ = wire.read_message(s.makefile("rb"))
            assert mtype == wire.NAK
        # the server still serves a proper client
        with socket.create_connection(("127.0.0.1", server.port), timeout=2) as s:
            s.sendall(wire.encode_hello(RUN, "{}"))
            mtype, payload = wire.read_message(s.makefile("rb"))
            assert mtype == wire.ACK and wire.decode_ack(payload) is None
    finally:
        server.close()
