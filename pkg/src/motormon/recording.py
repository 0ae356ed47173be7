"""Binary recording files (little-endian).

Layout::

    b"MOTR" | version u16 | channel count u16
    per channel: id u16 | kind u8 | rate f64 | gain f64 | offset f64
    per frame:   channel u16 | sequence u64 | t0 f64 | count u32 | count*f64 | crc32 u32

The CRC covers the frame body (channel through values).  Tachometer channels
store pulse instants as their values; the channel gain is the angle per pulse.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Union

import numpy as np

from .errors import FormatError, PartialReadError
from .order import TachPulseTrain
from .source import ChannelKind, ChannelSpec, SampleFrame

MAGIC = b"MOTR"
VERSION = 1
_HEADER = struct.Struct("<4sHH")
_CHANNEL = struct.Struct("<HBddd")
_FRAME_HEAD = struct.Struct("<HQdI")
_CRC = struct.Struct("<I")

Item = Union[SampleFrame, TachPulseTrain]


def _frame_body(channel_id, sequence, t0, values) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f8")
    return _FRAME_HEAD.pack(channel_id, sequence, t0, values.size) + values.tobytes()


class RecordingWriter:
    def __init__(self, path, channels: Iterable[ChannelSpec]):
        self.channels = {c.id: c for c in channels}
        self._fh: BinaryIO = open(path, "wb")
        self._fh.write(_HEADER.pack(MAGIC, VERSION, len(self.channels)))
        for c in self.channels.values():
            self._fh.write(_CHANNEL.pack(c.id, int(c.kind), c.sample_rate, c.gain, c.offset))

    def write(self, item: Item):
        if isinstance(item, TachPulseTrain):
            if item.channel_id is None:
                raise ValueError("pulse train needs a channel_id to be recorded")
            t0 = item.t0 if item.t0 is not None else (float(item.times[0]) if len(item) else 0.0)
            body = _frame_body(item.channel_id, item.sequence, t0, item.times)
        else:
            body = _frame_body(item.channel_id, item.sequence, item.t0, item.values)
        self._fh.write(body)
        self._fh.write(_CRC.pack(zlib.crc32(body)))

    def write_block(self, block):
        for frame in block.frames.values():
            self.write(frame)
        if block.pulses is not None:
            self.write(block.pulses)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_recording(path, channels, items: Iterable[Item]):
    with RecordingWriter(path, channels) as w:
        for item in items:
            w.write(item)


class Replay:
    """Iterable over the frames of a recording file."""

    def __init__(self, path):
        self.path = Path(path)
        self._data = self.path.read_bytes()
        self.channels: dict[int, ChannelSpec] = {}
        self._body_offset = self._parse_header()

    def _parse_header(self) -> int:
        data = self._data
        if len(data) < _HEADER.size:
            raise FormatError("file too short for header", 0)
        magic, version, count = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}", 0)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        off = _HEADER.size
        for _ in range(count):
            if off + _CHANNEL.size > len(data):
                raise FormatError("truncated channel table", off)
            cid, kind, rate, gain, offset = _CHANNEL.unpack_from(data, off)
            try:
                kind = ChannelKind(kind)
                self.channels[cid] = ChannelSpec(cid, kind, rate, gain, offset)
            except Exception as exc:
                raise FormatError(f"invalid channel entry: {exc}", off) from exc
            off += _CHANNEL.size
        return off

    def __iter__(self) -> Iterator[Item]:
        data = self._data
        off = self._body_offset
        end = len(data)
        while off < end:
            if off + _FRAME_HEAD.size > end:
                raise PartialReadError("truncated frame header", off)
            cid, seq, t0, count = _FRAME_HEAD.unpack_from(data, off)
            body_end = off + _FRAME_HEAD.size + 8 * count
            if body_end + _CRC.size > end:
                raise PartialReadError("truncated frame", off)
            body = data[off:body_end]
            (crc,) = _CRC.unpack_from(data, body_end)
            if zlib.crc32(body) != crc:
                raise FormatError(f"frame CRC mismatch on channel {cid}", off)
            spec = self.channels.get(cid)
            if spec is None:
                raise FormatError(f"frame for undeclared channel {cid}", off)
            values = np.frombuffer(data, dtype="<f8", count=count, offset=off + _FRAME_HEAD.size).copy()
            if spec.is_tach:
                yield TachPulseTrain(values, spec.gain, channel_id=cid, sequence=seq, t0=t0)
            else:
                yield SampleFrame(cid, t0, spec.sample_rate, values, seq)
            off = body_end + _CRC.size


def replay_open(path) -> Replay:
    return Replay(path)


def load_recording(path):
    """Read a whole recording: channel table, concatenated signals and pulses.

    Returns ``(channels, signals, pulses)`` where ``signals`` maps channel id to
    ``(values, rate, t0)`` and ``pulses`` is a :class:`TachPulseTrain` or None.
    """
    rep = replay_open(path)
    chunks: dict[int, list] = {}
    trains = []
    for item in rep:
        if isinstance(item, TachPulseTrain):
            trains.append(item)
        else:
            chunks.setdefault(item.channel_id, []).append(item)
    signals = {}
    for cid, frames in chunks.items():
        frames.sort(key=lambda f: f.sequence)
        signals[cid] = (np.concatenate([f.values for f in frames]), frames[0].sample_rate, frames[0].t0)
    pulses = None
    if trains:
        trains.sort(key=lambda tr: tr.sequence)
        pulses = TachPulseTrain.concatenate(trains)
    return rep.channels, signals, pulses
