"""Archive batches and the windowing that produces them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ..order import OrderSpectrum

DEFAULT_PERIOD = 0.01


@dataclass(frozen=True)
class SpectrumRecord:
    channel_id: int
    t: float
    spectrum: OrderSpectrum
    baseline: bool = False


@dataclass
class ArchiveBatch:
    """One archive window.

    ``rows`` holds ``(channel_id, t, value, n_samples)`` where ``value`` is the
    mean of the ``n_samples`` physical samples of that channel in the window
    and ``t`` the window start.
    """

    run_id: str
    batch_id: int
    t_start: float
    t_end: float
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)
    spectra: list = field(default_factory=list)


def window_index(sample_index, rate: float, period: float):
    """Archive window containing global sample ``sample_index`` of a channel sampled at ``rate``."""
    per_window = rate * period
    return np.floor(np.asarray(sample_index, dtype=np.float64) / per_window + 1e-9).astype(np.int64)


class Batcher:
    """Slices processed frames into fixed archive windows.

    Frames must arrive in time order per channel.  :meth:`add` returns the
    batches that became complete once everything up to ``t_complete`` is known.
    """

    def __init__(self, run_id: str, period: float = DEFAULT_PERIOD):
        if not period > 0:
            raise ValueError("archive period must be positive")
        self.run_id = run_id
        self.period = period
        self.next_id = 0
        self._rows: dict[int, list] = {}
        self._events: list = []
        self._spectra: list = []

    def _window_of_time(self, t: float) -> int:
        return max(self.next_id, int(math.floor(t / self.period + 1e-9)))

    def add(self, frames: Iterable, t_complete: float, events=(), spectra=()) -> list[ArchiveBatch]:
        for frame in frames:
            rate = frame.sample_rate
            g0 = int(round(frame.t0 * rate))
            k = window_index(g0 + np.arange(len(frame)), rate, self.period)
            starts = np.flatnonzero(np.r_[True, k[1:] != k[:-1]])
            sums = np.add.reduceat(frame.values, starts)
            counts = np.diff(np.r_[starts, len(frame)])
            for kk, s, n in zip(k[starts].tolist(), sums.tolist(), counts.tolist()):
                acc = self._rows.setdefault(kk, {})
                prev = acc.get(frame.channel_id)
                acc[frame.channel_id] = (s, n) if prev is None else (prev[0] + s, prev[1] + n)
        for ev in events:
            t = ev.cleared_t if ev.cleared_t is not None else ev.t
            self._events.append((self._window_of_time(t), ev))
        for sp in spectra:
            self._spectra.append((self._window_of_time(sp.t), sp))
        last = int(math.floor(t_complete / self.period + 1e-9))
        return self._emit(last)

    def flush(self) -> list[ArchiveBatch]:
        """Emit every window that holds data, including a trailing partial one."""
        pending = [k for k in self._rows] + [k for k, _ in self._events] + [k for k, _ in self._spectra]
        if not pending:
            return []
        return self._emit(max(pending) + 1)

    def _emit(self, upto: int) -> list[ArchiveBatch]:
        out = []
        while self.next_id < upto:
            k = self.next_id
            acc = self._rows.pop(k, {})
            rows = [(cid, k * self.period, s / n, n) for cid, (s, n) in sorted(acc.items())]
            events = [ev for kk, ev in self._events if kk <= k]
            self._events = [(kk, ev) for kk, ev in self._events if kk > k]
            spectra = [sp for kk, sp in self._spectra if kk <= k]
            self._spectra = [(kk, sp) for kk, sp in self._spectra if kk > k]
            out.append(ArchiveBatch(self.run_id, k, k * self.period, (k + 1) * self.period,
                                    rows, events, spectra))
            self.next_id += 1
        return out
