"""Limit checks on physical values and the combined motor state."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError
from .order import DiagnosisReport, Verdict
from .source import SampleFrame


class AlarmKind(enum.IntEnum):
    HighLimit = 1
    LowLimit = 2
    OrderFault = 3


class OverallState(enum.IntEnum):
    Healthy = 0
    Warning = 1
    Faulty = 2


@dataclass(frozen=True)
class ThresholdSpec:
    channel_id: int
    lower: float
    upper: float
    hysteresis: float = 0.0
    min_violations: int = 1
    # "sample" checks every value, "rms" checks one RMS value per frame
    mode: str = "sample"

    def __post_init__(self):
        where = f"thresholds[channel={self.channel_id}]"
        if not self.lower < self.upper:
            raise ConfigError(f"lower ({self.lower:g}) must be < upper ({self.upper:g})", where)
        if self.hysteresis < 0:
            raise ConfigError("hysteresis must be >= 0", where)
        if int(self.min_violations) != self.min_violations or self.min_violations < 1:
            raise ConfigError("min_violations must be an integer >= 1", where)
        if self.mode not in ("sample", "rms"):
            raise ConfigError(f"mode must be 'sample' or 'rms', not {self.mode!r}", where)


@dataclass(frozen=True)
class AlarmEvent:
    """A raised alarm; the matching clear event is the same alarm with ``cleared_t`` set."""

    channel_id: int
    kind: AlarmKind
    value: float
    limit: float
    t: float
    cleared_t: Optional[float] = None

    @property
    def is_clear(self) -> bool:
        return self.cleared_t is not None

    @property
    def key(self):
        return (self.channel_id, int(self.kind), self.t)


@dataclass
class CheckState:
    high_run: int = 0
    low_run: int = 0
    high_first: Optional[tuple] = None
    low_first: Optional[tuple] = None
    active: dict = field(default_factory=dict)


def check_values(times, values, spec: ThresholdSpec, state: CheckState) -> list[AlarmEvent]:
    """Apply the raise/clear rule to a sequence of samples, mutating ``state``."""
    lower, upper = spec.lower, spec.upper
    values = np.asarray(values, dtype=np.float64)
    if (not state.active and state.high_run == 0 and state.low_run == 0
            and values.size and values.min() >= lower and values.max() <= upper):
        return []
    events = []
    clear_lo = lower + spec.hysteresis
    clear_hi = upper - spec.hysteresis
    need = spec.min_violations
    for t, v in zip(np.asarray(times).tolist(), values.tolist()):
        inside_band = clear_lo <= v <= clear_hi
        for kind, violated, limit in (
            (AlarmKind.HighLimit, v > upper, upper),
            (AlarmKind.LowLimit, v < lower, lower),
        ):
            high = kind == AlarmKind.HighLimit
            active = state.active.get(kind)
            if active is not None:
                if inside_band:
                    events.append(replace(active, cleared_t=t))
                    del state.active[kind]
                continue
            if violated:
                if high:
                    state.high_run += 1
                    if state.high_run == 1:
                        state.high_first = (t, v)
                    run, first = state.high_run, state.high_first
                else:
                    state.low_run += 1
                    if state.low_run == 1:
                        state.low_first = (t, v)
                    run, first = state.low_run, state.low_first
                if run >= need:
                    alarm = AlarmEvent(spec.channel_id, kind, first[1], limit, first[0])
                    state.active[kind] = alarm
                    events.append(alarm)
                    if high:
                        state.high_run = 0
                    else:
                        state.low_run = 0
            elif high:
                state.high_run = 0
            else:
                state.low_run = 0
    return events


def check_frame(frame: SampleFrame, spec: ThresholdSpec,
                state: Optional[CheckState] = None) -> tuple[list[AlarmEvent], CheckState]:
    if state is None:
        state = CheckState()
    if spec.mode == "rms":
        rms = float(np.sqrt(np.mean(frame.values ** 2)))
        events = check_values([frame.t0], [rms], spec, state)
    else:
        events = check_values(frame.times, frame.values, spec, state)
    return events, state


@dataclass
class MotorState:
    overall: OverallState
    active_alarms: list
    last_diagnosis: Optional[object] = None


def order_fault_alarm(report: DiagnosisReport, t: Optional[float] = None) -> AlarmEvent:
    return AlarmEvent(
        channel_id=report.channel_id if report.channel_id is not None else -1,
        kind=AlarmKind.OrderFault,
        value=report.max_ratio,
        limit=report.ratio_threshold,
        t=report.t if t is None else t,
    )


def active_from_events(events: Iterable[AlarmEvent]) -> list[AlarmEvent]:
    active = {}
    for ev in events:
        if ev.is_clear:
            active.pop(ev.key, None)
        else:
            active[ev.key] = ev
    return list(active.values())


def combine(limit_events: Sequence[AlarmEvent],
            diagnosis: Union[DiagnosisReport, Sequence[DiagnosisReport], None]) -> MotorState:
    if diagnosis is None:
        reports = []
    elif isinstance(diagnosis, DiagnosisReport):
        reports = [diagnosis]
    else:
        reports = list(diagnosis)
    active = active_from_events(limit_events)
    for rep in reports:
        if rep.verdict == Verdict.FAULTY:
            active.append(order_fault_alarm(rep, rep.t if rep.t is not None else math.nan))
    return MotorState(_overall(active), active, reports[-1] if len(reports) == 1 else (reports or None))


def _overall(active) -> OverallState:
    if any(a.kind == AlarmKind.OrderFault for a in active):
        return OverallState.Faulty
    if active:
        return OverallState.Warning
    return OverallState.Healthy


class AlarmBook:
    """Live alarm bookkeeping for a run: limit checks plus order-fault raise/clear."""

    def __init__(self, thresholds: Iterable[ThresholdSpec]):
        self.specs = {}
        for spec in thresholds:
            self.specs.setdefault(spec.channel_id, []).append(spec)
        self.states = {(cid, i): CheckState() for cid, specs in self.specs.items() for i in range(len(specs))}
        self.order_active: dict = {}
        self.last_diagnosis: dict = {}

    def check(self, frame: SampleFrame) -> list[AlarmEvent]:
        events = []
        for i, spec in enumerate(self.specs.get(frame.channel_id, ())):
            ev, _ = check_frame(frame, spec, self.states[(frame.channel_id, i)])
            events.extend(ev)
        return events

    def diagnosis(self, report: DiagnosisReport) -> list[AlarmEvent]:
        cid = report.channel_id
        self.last_diagnosis[cid] = report
        active = self.order_active.get(cid)
        if report.verdict == Verdict.FAULTY and active is None:
            alarm = order_fault_alarm(report)
            self.order_active[cid] = alarm
            return [alarm]
        if report.verdict == Verdict.HEALTHY and active is not None:
            del self.order_active[cid]
            return [replace(active, cleared_t=report.t)]
        return []

    def active(self) -> list[AlarmEvent]:
        out = [a for (cid, i), st in sorted(self.states.items()) for a in st.active.values()]
        out.extend(self.order_active.values())
        return out

    def state(self) -> MotorState:
        active = self.active()
        diag = list(self.last_diagnosis.values()) or None
        return MotorState(_overall(active), active, diag)
