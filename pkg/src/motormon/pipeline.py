"""Two-tier producer/consumer pipeline.

Tier 1 carries raw blocks from the producers (one per channel group) to the
single processing activity through lossless bounded queues.  Tier 2 fans each
processed block out to the storage activity (lossless) and to the live
monitor (latest value only, never blocks).
"""

from __future__ import annotations

import collections
import enum
import logging
import math
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional

from .archive import Archiver, Batcher, Replicator, SpectrumRecord, Store
from .errors import ConfigError, PipelineError, StoreError
from .order import StreamingOrderAnalyzer, TachPulseTrain, diagnose
from .preprocess import Preprocessor
from .recording import RecordingWriter, replay_open
from .source import Block, MotorSimulator
from .threshold import AlarmBook, MotorState

logger = logging.getLogger(__name__)

TIER1_CAPACITY = 256
TIER2_CAPACITY = 1024
DEFAULT_DRAIN_TIMEOUT = 5.0


class Policy(enum.Enum):
    LOSSLESS = "lossless"
    LATEST_VALUE = "latest-value"


class Closed(Exception):
    pass


class Empty(Exception):
    pass


class BoundedQueue:
    """Single-consumer queue with a capacity and an overflow policy.

    Lossless: ``put`` waits while the queue is full.  Latest value: capacity is
    one and a new item replaces an unconsumed one, counting a drop.
    """

    def __init__(self, capacity: int, policy: Policy = Policy.LOSSLESS, name: str = ""):
        if policy is Policy.LATEST_VALUE:
            capacity = 1
        assert capacity >= 1
        self.capacity = capacity
        self.policy = policy
        self.name = name
        self._items = collections.deque()
        self._lock = threading.Lock()
        self._not_empty = threading.Condition(self._lock)
        self._not_full = threading.Condition(self._lock)
        self._closed = False
        self.max_depth = 0
        self.dropped = 0
        self.put_count = 0

    def put(self, item, stop: Optional[threading.Event] = None) -> bool:
        """Enqueue ``item``; returns False if ``stop`` was set while waiting for room."""
        with self._not_full:
            if self._closed:
                raise Closed(self.name)
            if self.policy is Policy.LATEST_VALUE:
                if self._items:
                    self._items.clear()
                    self.dropped += 1
            else:
                while len(self._items) >= self.capacity:
                    if stop is not None and stop.is_set():
                        return False
                    self._not_full.wait(0.05)
            self._items.append(item)
            self.put_count += 1
            self.max_depth = max(self.max_depth, len(self._items))
            self._not_empty.notify()
            return True

    def get(self, timeout: Optional[float] = None):
        """Next item; raises :class:`Closed` once closed and empty, :class:`Empty` on timeout."""
        with self._not_empty:
            deadline = None if timeout is None else time.monotonic() + timeout
            while not self._items:
                if self._closed:
                    raise Closed(self.name)
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise Empty(self.name)
                self._not_empty.wait(remaining if remaining is not None else 0.1)
            item = self._items.popleft()
            self._not_full.notify()
            return item

    def close(self):
        with self._lock:
            self._closed = True
            self._not_empty.notify_all()
            self._not_full.notify_all()

    def __len__(self):
        return len(self._items)


@dataclass
class PipelineStats:
    frames_produced: int = 0
    frames_processed: int = 0
    frames_stored: int = 0
    max_queue_depth: dict = field(default_factory=dict)
    dropped_latest_value: int = 0
    latency_max: float = 0.0
    latency_sum: float = 0.0
    latency_count: int = 0
    samples_produced: dict = field(default_factory=dict)
    samples_stored: dict = field(default_factory=dict)
    blocks: int = 0
    batches_committed: int = 0
    batches_deferred: int = 0
    simulated_time: float = 0.0
    wall_time: float = 0.0
    drained: Optional[bool] = None
    stranded: dict = field(default_factory=dict)
    replication_acked: Optional[int] = None
    replication_drained: Optional[bool] = None
    error: Optional[str] = None

    @property
    def latency_mean(self) -> float:
        return self.latency_sum / self.latency_count if self.latency_count else 0.0

    @property
    def realtime_factor(self) -> float:
        return self.simulated_time / self.wall_time if self.wall_time > 0 else math.inf

    def summary(self) -> str:
        depth = ", ".join(f"{k}={v}" for k, v in sorted(self.max_queue_depth.items()))
        return (f"frames produced={self.frames_produced} processed={self.frames_processed} "
                f"stored={self.frames_stored} batches={self.batches_committed} "
                f"dropped_latest={self.dropped_latest_value} max_depth[{depth}] "
                f"latency max={self.latency_max * 1e3:.1f}ms mean={self.latency_mean * 1e3:.1f}ms "
                f"rtf={self.realtime_factor:.2f}")


@dataclass
class ProcessedBlock:
    index: int
    t0: float
    t1: float
    frames: dict
    raw: dict
    pulses: Optional[TachPulseTrain]
    events: list
    spectra: list
    diagnoses: list
    state: MotorState
    produced_at: float

    @property
    def n_frames(self) -> int:
        return len(self.frames) + (1 if self.pulses is not None else 0)


def _block_frames(block: Block) -> int:
    return len(block.frames) + (1 if block.pulses is not None else 0)


class Processor:
    """The processing activity's state: filters, alarm book, order tracker, baseline."""

    def __init__(self, config, baseline: Optional[dict] = None):
        self.config = config
        self.pre = Preprocessor(config.channels)
        self.alarms = AlarmBook(config.thresholds)
        self.baseline = baseline or {}
        an = config.analysis
        self.analyzer = None
        tach = config.tach_channel
        vib = {c.id: c.sample_rate for c in config.channels if c.kind.is_vibration}
        if an.enabled and tach is not None and vib:
            self.analyzer = StreamingOrderAnalyzer(vib, tach.gain, an.theta_step, an.block_revolutions)

    def process(self, block: Block) -> ProcessedBlock:
        frames = {}
        events = []
        for cid in sorted(block.frames):
            phys = self.pre(block.frames[cid])
            frames[cid] = phys
            events.extend(self.alarms.check(phys))
        spectra, diagnoses = [], []
        if self.analyzer is not None:
            if block.pulses is not None:
                self.analyzer.add_pulses(block.pulses.times)
            for cid in self.analyzer.rates:
                if cid in frames:
                    self.analyzer.add_frame(cid, frames[cid].t0, frames[cid].values)
            an = self.config.analysis
            for cid, t, sp in self.analyzer.poll():
                spectra.append(SpectrumRecord(cid, t, sp, an.record_baseline))
                base = self.baseline.get(cid)
                if base is not None:
                    rep = diagnose(sp, base, an.watch_orders, an.ratio_threshold, an.floor)
                    rep.channel_id, rep.t = cid, t
                    diagnoses.append(rep)
                    events.extend(self.alarms.diagnosis(rep))
        return ProcessedBlock(block.index, block.t0, block.t1, frames, block.frames, block.pulses,
                              events, spectra, diagnoses, self.alarms.state(), block.produced_at)


class ReplaySource:
    """Regroups a recording's frames into frame-period blocks."""

    def __init__(self, path, frame_period: float):
        self.replay = replay_open(path)
        self.frame_period = frame_period

    def blocks(self, duration: float):
        n_max = int(math.floor(duration / self.frame_period + 1e-9))
        current = None
        for item in self.replay:
            t0 = item.t0 if item.t0 is not None else float(item.times[0])
            b = int(math.floor(t0 / self.frame_period + 1e-9))
            if b >= n_max:
                break
            while current is None or b > current.index:
                if current is not None:
                    yield current
                nxt = 0 if current is None else current.index + 1
                current = Block(nxt, nxt * self.frame_period, (nxt + 1) * self.frame_period, {})
            if isinstance(item, TachPulseTrain):
                current.pulses = item
            else:
                current.frames[item.channel_id] = item
        if current is not None:
            yield current


def _status_line(pb: ProcessedBlock, channels) -> str:
    vals = []
    for cid in sorted(pb.frames):
        v = pb.frames[cid].values
        vals.append(f"ch{cid}={v[-1]:.4g}")
    alarms = "; ".join(
        f"{a.kind.name} ch{a.channel_id} {a.value:.4g}/{a.limit:.4g}" for a in pb.state.active_alarms
    ) or "none"
    return f"t={pb.t1:7.2f}s state={pb.state.overall.name} | {' '.join(vals)} | alarms: {alarms}"


class Pipeline:
    """Owns the activities of one run.

    ``hooks`` are for tests: ``storage_delay`` (seconds slept per stored block),
    ``storage_gate`` (an Event the storage activity waits on before each
    block), ``process_error`` (block index at which processing raises).
    """

    def __init__(self, config, *, status: Optional[Callable[[str], None]] = None,
                 hooks: Optional[dict] = None, run_id: Optional[str] = None,
                 replication_timeout: float = 60.0, duplicate_every: int = 0):
        self.config = config
        self.status = status
        self.hooks = hooks or {}
        self.run_id = run_id or uuid.uuid4().hex
        self.replication_timeout = replication_timeout
        self.duplicate_every = duplicate_every
        self.stats = PipelineStats()
        self.events: list = []
        self.diagnoses: list = []
        self.final_state: Optional[MotorState] = None
        self.error: Optional[BaseException] = None
        self._stats_lock = threading.Lock()
        self._stop_producers = threading.Event()
        self._stop_monitor = threading.Event()
        self._done = threading.Event()
        self._shutdown_lock = threading.Lock()
        self._shutdown_result: Optional[bool] = None
        self._threads: list[threading.Thread] = []
        self.replicator: Optional[Replicator] = None
        self._open_store()

    # -- setup ----------------------------------------------------------------

    def _open_store(self):
        ar = self.config.archive
        path = ar.store if ar.store is not None else ":memory:"
        if ar.remote is not None and ar.store is None:
            raise ConfigError("replication needs a file-backed store", "archive.store")
        try:
            self.store = Store(path, outbox=ar.remote is not None)
        except StoreError as exc:
            raise ConfigError(f"store unavailable: {exc}", "archive.store") from exc
        record = self.config.to_record()
        record["start_time"] = time.time()
        self.run_record = record
        self.store.register_run(self.run_id, record)
        self.baseline = None
        an = self.config.analysis
        if an.enabled and an.baseline:
            try:
                self.baseline = self.store.load_baseline(an.baseline)
            except StoreError as exc:
                raise ConfigError(str(exc), "analysis.baseline") from exc
        self.archiver = Archiver(self.store, ar.journal)

    def _groups(self):
        cfg = self.config
        if cfg.replay is not None:
            return [("replay", ReplaySource(cfg.replay, cfg.frame_period))]
        fast = [c for c in cfg.channels if c.kind.is_vibration or c.is_tach]
        slow = [c for c in cfg.channels if not (c.kind.is_vibration or c.is_tach)]
        groups = []
        for name, chans in (("vibration", fast), ("aux", slow)):
            if chans:
                groups.append((name, MotorSimulator(cfg.profile, chans, cfg.seed, cfg.frame_period)))
        return groups

    # -- lifecycle --------------------------------------------------------------

    def start(self) -> "Pipeline":
        groups = self._groups()
        self.tier1 = [BoundedQueue(TIER1_CAPACITY, name=f"tier1-{name}") for name, _ in groups]
        self.storage_q = BoundedQueue(TIER2_CAPACITY, name="tier2-storage")
        self.monitor_slot = BoundedQueue(1, Policy.LATEST_VALUE, name="tier2-monitor")
        self._t_start = time.monotonic()
        for (name, src), q in zip(groups, self.tier1):
            self._spawn(f"producer-{name}", self._produce, src, q)
        self._spawn("processing", self._process_loop)
        self._spawn("storage", self._storage_loop)
        self._monitor_thread = self._spawn("monitor", self._monitor_loop, essential=False)
        if self.config.archive.remote is not None:
            self.replicator = Replicator(self.config.archive.store, self.run_id, self.config.archive.remote,
                                         self.run_record, duplicate_every=self.duplicate_every).start()
        return self

    def _spawn(self, name, target, *args, essential=True):
        t = threading.Thread(target=self._guard, args=(target, *args), name=name, daemon=True)
        if essential:
            self._threads.append(t)
        t.start()
        return t

    def _guard(self, target, *args):
        try:
            target(*args)
        except BaseException as exc:  # noqa: BLE001 - reported through the pipeline
            logger.exception("pipeline activity %s failed", threading.current_thread().name)
            if self.error is None:
                self.error = exc
            self._stop_producers.set()
            for q in getattr(self, "tier1", []):
                q.close()
            self.storage_q.close()

    def _produce(self, src, q: BoundedQueue):
        try:
            pace = self.config.realtime
            for block in src.blocks(self.config.duration):
                if self._stop_producers.is_set():
                    break
                if pace:
                    delay = self._t_start + block.t1 - time.monotonic()
                    if delay > 0 and self._stop_producers.wait(delay):
                        break
                block.produced_at = time.monotonic()
                if not q.put(block, self._stop_producers):
                    break
                with self._stats_lock:
                    self.stats.frames_produced += _block_frames(block)
                    for cid, f in block.frames.items():
                        self.stats.samples_produced[cid] = self.stats.samples_produced.get(cid, 0) + len(f)
        finally:
            q.close()

    def _next_merged(self) -> Optional[Block]:
        parts = []
        for q in self.tier1:
            try:
                parts.append(q.get())
            except Closed:
                parts.append(None)
        live = [p for p in parts if p is not None]
        if not live:
            return None
        if len(live) != len(parts):
            # a producer stopped early; later blocks would be missing channels
            self._stop_producers.set()
        merged = live[0]
        for p in live[1:]:
            if p.index != merged.index:
                raise PipelineError(f"producer blocks out of step: {p.index} vs {merged.index}")
            merged.frames.update(p.frames)
            merged.pulses = merged.pulses or p.pulses
            merged.produced_at = max(merged.produced_at, p.produced_at)
        return merged

    def _process_loop(self):
        proc = Processor(self.config, self.baseline)
        fail_at = self.hooks.get("process_error")
        try:
            while True:
                block = self._next_merged()
                if block is None:
                    break
                if fail_at is not None and block.index >= fail_at:
                    raise PipelineError(f"injected processing failure at block {block.index}")
                pb = proc.process(block)
                with self._stats_lock:
                    self.stats.frames_processed += pb.n_frames
                    self.stats.blocks += 1
                    self.stats.simulated_time = pb.t1
                self.events.extend(pb.events)
                self.diagnoses.extend(pb.diagnoses)
                self.final_state = pb.state
                if not self.storage_q.put(pb):
                    break
                self.monitor_slot.put(pb)
        finally:
            self.storage_q.close()

    def _storage_loop(self):
        batcher = Batcher(self.run_id, self.config.archive.period)
        recorder = None
        if self.config.archive.record is not None:
            recorder = RecordingWriter(self.config.archive.record, self.config.channels)
        delay = self.hooks.get("storage_delay", 0.0)
        gate = self.hooks.get("storage_gate")
        try:
            while True:
                try:
                    pb = self.storage_q.get()
                except Closed:
                    break
                if gate is not None:
                    gate.wait()
                if delay:
                    time.sleep(delay)
                if recorder is not None:
                    for cid in sorted(pb.raw):
                        recorder.write(pb.raw[cid])
                    if pb.pulses is not None:
                        recorder.write(pb.pulses)
                batches = batcher.add(pb.frames.values(), pb.t1, pb.events, pb.spectra)
                self._commit(batches)
                latency = time.monotonic() - pb.produced_at
                with self._stats_lock:
                    s = self.stats
                    s.frames_stored += pb.n_frames
                    for cid, f in pb.frames.items():
                        s.samples_stored[cid] = s.samples_stored.get(cid, 0) + len(f)
                    s.latency_max = max(s.latency_max, latency)
                    s.latency_sum += latency
                    s.latency_count += 1
            self._commit(batcher.flush())
            self.archiver.flush()
        finally:
            if recorder is not None:
                recorder.close()
            self._done.set()

    def _commit(self, batches):
        for b in batches:
            ok = self.archiver.write(b)
            with self._stats_lock:
                if ok:
                    self.stats.batches_committed += 1
                else:
                    self.stats.batches_deferred += 1

    def _monitor_loop(self):
        while not self._stop_monitor.is_set():
            try:
                pb = self.monitor_slot.get(timeout=self.config.status_interval)
            except (Empty, Closed):
                continue
            if self.status is not None:
                self.status(_status_line(pb, self.config.channels))
            if self._stop_monitor.wait(self.config.status_interval):
                break

    def wait(self, timeout: Optional[float] = None) -> bool:
        """Block until storage has consumed everything the producers made."""
        return self._done.wait(timeout)

    def shutdown(self, timeout: float = DEFAULT_DRAIN_TIMEOUT) -> bool:
        """Stop producers, drain the lossless paths and stop the monitor.

        Idempotent: later calls return the first call's result.
        """
        with self._shutdown_lock:
            if self._shutdown_result is not None:
                return self._shutdown_result
            self._stop_producers.set()
            deadline = time.monotonic() + timeout
            for t in self._threads:
                t.join(max(0.0, deadline - time.monotonic()))
            drained = not any(t.is_alive() for t in self._threads)
            self._stop_monitor.set()
            self.monitor_slot.close()
            self._monitor_thread.join(1.0)
            s = self.stats
            with self._stats_lock:
                s.wall_time = time.monotonic() - self._t_start
                s.max_queue_depth = {q.name: q.max_depth for q in [*self.tier1, self.storage_q]}
                s.dropped_latest_value = self.monitor_slot.dropped
                s.stranded = {q.name: len(q) for q in [*self.tier1, self.storage_q] if len(q)}
                s.drained = drained
            if self.replicator is not None:
                if drained:
                    s.replication_drained = self.replicator.drain(self.replication_timeout)
                s.replication_acked = self.replicator.acked
                self.replicator.stop()
            if self.error is not None:
                s.error = f"{type(self.error).__name__}: {self.error}"
            self._shutdown_result = drained
            return drained

    def run(self, stop: Optional[threading.Event] = None,
            drain_timeout: float = DEFAULT_DRAIN_TIMEOUT) -> PipelineStats:
        """Start, wait for the end of the run (or ``stop``), drain and close.

        Raises :class:`PipelineError` carrying the stats when an activity failed.
        """
        self.start()
        try:
            while not self.wait(0.05):
                if (stop is not None and stop.is_set()) or self.error is not None:
                    break
            self.shutdown(drain_timeout)
        finally:
            self.close()
        if self.error is not None:
            raise PipelineError(str(self.error), self.stats) from self.error
        return self.stats

    def close(self):
        if self._shutdown_result is None:
            self.shutdown()
        if not any(t.is_alive() for t in self._threads):
            self.store.close()


def run_pipeline(config, *, status=None, hooks=None, run_id=None, stop: Optional[threading.Event] = None,
                 drain_timeout: float = DEFAULT_DRAIN_TIMEOUT, **kwargs) -> PipelineStats:
    """Run to completion (or until ``stop`` is set) and return the stats."""
    return Pipeline(config, status=status, hooks=hooks, run_id=run_id, **kwargs).run(stop, drain_timeout)
