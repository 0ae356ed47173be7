"""Replication wire protocol (big-endian).

Message: ``b"MOTR" | version u8 | type u8 | length u32 | payload | crc32 u32``
where the CRC covers type, length and payload.

BATCH payload::

    run id (16 bytes) | batch id u64 | t_start f64 | t_end f64
    row count u32 | rows: channel u16, t f64, value f64
    event count u32 | events: channel u16, kind u8, value f64, limit f64, t_raise f64, t_clear f64 (NaN = open)
    spectrum count u32 | spectra: channel u16, t f64, baseline u8, resolution f64, revolutions f64, n u32, n*f64
    samples-per-row count u32 | counts: u32 per row
"""

from __future__ import annotations

import math
import struct
import uuid
import zlib
from typing import BinaryIO, Optional

import numpy as np

from ..errors import ProtocolError
from ..order import OrderSpectrum
from ..threshold import AlarmEvent, AlarmKind
from .batch import ArchiveBatch, SpectrumRecord

MAGIC = b"MOTR"
VERSION = 1
BATCH, ACK, NAK, HELLO = 1, 2, 3, 4
NONE_ACKED = 0xFFFFFFFFFFFFFFFF
MAX_PAYLOAD = 64 * 1024 * 1024

_HEAD = struct.Struct(">4sBBI")
_CRC = struct.Struct(">I")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_BATCH_HEAD = struct.Struct(">16sQddI")
_ROW = struct.Struct(">Hdd")
_EVENT = struct.Struct(">HBdddd")
_SPEC_HEAD = struct.Struct(">HdBddI")


class CrcMismatch(ProtocolError):
    """Frame was read completely but its checksum is wrong; the stream is still in sync."""


def run_id_bytes(run_id: str) -> bytes:
    return uuid.UUID(hex=run_id).bytes


def encode_message(msg_type: int, payload: bytes = b"") -> bytes:
    head = _HEAD.pack(MAGIC, VERSION, msg_type, len(payload))
    crc = zlib.crc32(head[5:] + payload)
    return head + payload + _CRC.pack(crc)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if data is None or len(data) < n:
        raise EOFError("connection closed")
    return data


def read_message(fh: BinaryIO) -> tuple[int, bytes]:
    """Read one message; raises EOFError on a clean close at a message boundary."""
    first = fh.read(_HEAD.size)
    if not first:
        raise EOFError("connection closed")
    if len(first) < _HEAD.size:
        first += _read_exact(fh, _HEAD.size - len(first))
    magic, version, msg_type, length = _HEAD.unpack(first)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} too large")
    payload = _read_exact(fh, length)
    (crc,) = _CRC.unpack(_read_exact(fh, _CRC.size))
    if zlib.crc32(first[5:] + payload) != crc:
        raise CrcMismatch(f"CRC mismatch on message type {msg_type}")
    return msg_type, payload


def encode_ack(batch_id: Optional[int]) -> bytes:
    return encode_message(ACK, _U64.pack(NONE_ACKED if batch_id is None else batch_id))


def decode_ack(payload: bytes) -> Optional[int]:
    (value,) = _U64.unpack(payload)
    return None if value == NONE_ACKED else value


def encode_nak(batch_id: Optional[int] = None) -> bytes:
    return encode_message(NAK, _U64.pack(NONE_ACKED if batch_id is None else batch_id))


def encode_hello(run_id: str, config_json: str) -> bytes:
    return encode_message(HELLO, run_id_bytes(run_id) + config_json.encode("utf-8"))


def decode_hello(payload: bytes) -> tuple[str, str]:
    if len(payload) < 16:
        raise ProtocolError("HELLO payload too short")
    return uuid.UUID(bytes=payload[:16]).hex, payload[16:].decode("utf-8")


def encode_batch_payload(batch: ArchiveBatch) -> bytes:
    parts = [_BATCH_HEAD.pack(run_id_bytes(batch.run_id), batch.batch_id,
                              batch.t_start, batch.t_end, len(batch.rows))]
    parts.extend(_ROW.pack(cid, t, v) for cid, t, v, _ in batch.rows)
    parts.append(_U32.pack(len(batch.events)))
    for ev in batch.events:
        t_clear = math.nan if ev.cleared_t is None else ev.cleared_t
        parts.append(_EVENT.pack(ev.channel_id & 0xFFFF, int(ev.kind), ev.value, ev.limit, ev.t, t_clear))
    parts.append(_U32.pack(len(batch.spectra)))
    for sp in batch.spectra:
        amp = np.ascontiguousarray(sp.spectrum.amplitudes, dtype=">f8")
        parts.append(_SPEC_HEAD.pack(sp.channel_id, sp.t, int(sp.baseline),
                                     sp.spectrum.order_resolution, sp.spectrum.revolutions, amp.size))
        parts.append(amp.tobytes())
    parts.append(_U32.pack(len(batch.rows)))
    parts.extend(_U32.pack(n) for *_, n in batch.rows)
    return b"".join(parts)


def encode_batch(batch: ArchiveBatch) -> bytes:
    return encode_message(BATCH, encode_batch_payload(batch))


def decode_batch_payload(payload: bytes) -> ArchiveBatch:
    try:
        off = 0
        rid, batch_id, t_start, t_end, n_rows = _BATCH_HEAD.unpack_from(payload, off)
        off += _BATCH_HEAD.size
        raw_rows = []
        for _ in range(n_rows):
            raw_rows.append(_ROW.unpack_from(payload, off))
            off += _ROW.size
        (n_events,) = _U32.unpack_from(payload, off)
        off += 4
        events = []
        for _ in range(n_events):
            cid, kind, value, limit, t_raise, t_clear = _EVENT.unpack_from(payload, off)
            off += _EVENT.size
            if cid == 0xFFFF:
                cid = -1
            events.append(AlarmEvent(cid, AlarmKind(kind), value, limit, t_raise,
                                     None if math.isnan(t_clear) else t_clear))
        (n_spec,) = _U32.unpack_from(payload, off)
        off += 4
        spectra = []
        for _ in range(n_spec):
            cid, t, base, res, revs, n = _SPEC_HEAD.unpack_from(payload, off)
            off += _SPEC_HEAD.size
            amp = np.frombuffer(payload, dtype=">f8", count=n, offset=off).astype(np.float64)
            off += 8 * n
            spectra.append(SpectrumRecord(cid, t, OrderSpectrum(res, amp, revs), bool(base)))
        (n_counts,) = _U32.unpack_from(payload, off)
        off += 4
        if n_counts != n_rows:
            raise ProtocolError("sample-count section does not match row count")
        counts = struct.unpack_from(f">{n_counts}I", payload, off)
        off += 4 * n_counts
    except (struct.error, ValueError) as exc:
        raise ProtocolError(f"malformed BATCH payload: {exc}") from exc
    if off != len(payload):
        raise ProtocolError("trailing bytes in BATCH payload")
    rows = [(cid, t, v, n) for (cid, t, v), n in zip(raw_rows, counts)]
    return ArchiveBatch(uuid.UUID(bytes=rid).hex, batch_id, t_start, t_end, rows, events, spectra)
