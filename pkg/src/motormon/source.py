"""Synthetic motor model standing in for the acquisition hardware.

The shaft speed is piecewise linear in time, so the shaft angle is an exact
quadratic inside every segment.  Vibration axes are sums of shaft-locked order
components plus seeded Gaussian noise; the tachometer emits one pulse each
``2*pi/pulses_per_rev`` radians; slow channels (temperature, current, supply
voltage, speed sensor) are base values with optional step injections.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError
from .order import TWO_PI, TachPulseTrain

RPM_TO_RAD_S = TWO_PI / 60.0
VIBRATION_RATE_LIMITS = (1_000.0, 25_000.0)
AUX_RATE_LIMITS = (1.0, 10_000.0)
DEFAULT_FRAME_PERIOD = 0.1


class ChannelKind(enum.IntEnum):
    VibrationX = 0
    VibrationY = 1
    VibrationZ = 2
    Tachometer = 3
    Temperature = 4
    Current = 5
    Voltage = 6

    @property
    def is_vibration(self) -> bool:
        return self <= ChannelKind.VibrationZ

    @classmethod
    def parse(cls, name) -> "ChannelKind":
        if isinstance(name, ChannelKind):
            return name
        for kind in cls:
            if kind.name.lower() == str(name).lower():
                return kind
        raise ConfigError(f"unknown channel kind {name!r}", "kind")


#: simulated quantity behind each kind when a channel does not say otherwise
DEFAULT_SIGNAL = {
    ChannelKind.VibrationX: "vibration",
    ChannelKind.VibrationY: "vibration",
    ChannelKind.VibrationZ: "vibration",
    ChannelKind.Tachometer: "pulses",
    ChannelKind.Temperature: "temperature",
    ChannelKind.Current: "current",
    ChannelKind.Voltage: "voltage",
}
SIGNALS = {"vibration", "pulses", "temperature", "current", "voltage", "speed"}


@dataclass(frozen=True)
class ChannelSpec:
    """One acquisition channel.

    ``gain`` and ``offset`` map raw readings to physical units.  A tachometer
    channel records pulse instants; its gain is the shaft angle per pulse in
    radians.  ``signal`` picks the simulated quantity; a speed sensor read
    through a voltage input is ``kind=Voltage, signal="speed"``.
    """

    id: int
    kind: ChannelKind
    sample_rate: float
    gain: float = 1.0
    offset: float = 0.0
    signal: Optional[str] = None
    filter_enabled: Optional[bool] = None
    q: Optional[float] = None
    r: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ChannelKind.parse(self.kind))
        where = f"channels[{self.id}]"
        if not 0 <= self.id <= 0xFFFF:
            raise ConfigError("id must fit in 16 bits", f"{where}.id")
        lo, hi = VIBRATION_RATE_LIMITS if self.kind.is_vibration else AUX_RATE_LIMITS
        if not lo <= self.sample_rate <= hi:
            raise ConfigError(
                f"sample_rate {self.sample_rate:g} outside [{lo:g}, {hi:g}] for {self.kind.name}",
                f"{where}.sample_rate",
            )
        if not math.isfinite(self.gain) or self.gain == 0:
            raise ConfigError("gain must be finite and nonzero", f"{where}.gain")
        if not math.isfinite(self.offset):
            raise ConfigError("offset must be finite", f"{where}.offset")
        if self.signal is None:
            object.__setattr__(self, "signal", DEFAULT_SIGNAL[self.kind])
        elif self.signal not in SIGNALS:
            raise ConfigError(f"unknown signal {self.signal!r}", f"{where}.signal")
        if not self.r > 0:
            raise ConfigError("r must be positive", f"{where}.r")
        if self.q is not None and self.q < 0:
            raise ConfigError("q must be non-negative", f"{where}.q")

    @property
    def is_tach(self) -> bool:
        return self.kind == ChannelKind.Tachometer

    @property
    def kalman_enabled(self) -> bool:
        if self.filter_enabled is not None:
            return self.filter_enabled
        return not (self.kind.is_vibration or self.is_tach)

    @property
    def kalman_q(self) -> float:
        return self.q if self.q is not None else 1e-4 * self.r

    def to_raw(self, physical):
        return (np.asarray(physical, dtype=np.float64) - self.offset) / self.gain


@dataclass(frozen=True)
class StepInjection:
    """Adds ``delta`` physical units to every channel carrying ``signal`` during [t_start, t_end)."""

    signal: str
    t_start: float
    t_end: float
    delta: float


@dataclass
class MotorProfile:
    speed_segments: list
    order_components: dict = field(default_factory=dict)
    noise_sigma: float = 0.0
    temperature_base: float = 40.0
    current_base: float = 5.0
    voltage_base: float = 380.0
    pulses_per_rev: int = 1
    aux_noise: float = 0.0
    steps: list = field(default_factory=list)

    def __post_init__(self):
        segs = [tuple(float(v) for v in s) for s in self.speed_segments]
        if not segs:
            raise ConfigError("at least one speed segment is required", "profile.segments")
        for i, (dur, r0, r1) in enumerate(segs):
            if not dur > 0:
                raise ConfigError("segment duration must be > 0", f"profile.segments[{i}]")
            if not (r0 > 0 and r1 > 0):
                raise ConfigError("segment rpm values must be > 0", f"profile.segments[{i}]")
        self.speed_segments = segs
        comps = {}
        for axis, table in self.order_components.items():
            axis = ChannelKind.parse(axis)
            if not axis.is_vibration:
                raise ConfigError(f"order components only apply to vibration axes, not {axis.name}",
                                  "profile.orders")
            entries = {}
            for order, value in table.items():
                amp, phase = (value, 0.0) if np.isscalar(value) else tuple(value)
                order = float(order)
                if not order > 0:
                    raise ConfigError(f"order {order:g} must be > 0", "profile.orders")
                if not amp >= 0:
                    raise ConfigError(f"amplitude for order {order:g} must be >= 0", "profile.orders")
                entries[order] = (float(amp), float(phase))
            comps[axis] = entries
        self.order_components = comps
        if int(self.pulses_per_rev) != self.pulses_per_rev or self.pulses_per_rev < 1:
            raise ConfigError("pulses_per_rev must be a positive integer", "profile.pulses_per_rev")
        self.pulses_per_rev = int(self.pulses_per_rev)
        if self.noise_sigma < 0 or self.aux_noise < 0:
            raise ConfigError("noise levels must be >= 0", "profile.noise_sigma")
        self.steps = [s if isinstance(s, StepInjection) else StepInjection(**s) for s in self.steps]

        durs = np.array([s[0] for s in segs])
        self._seg_t = np.concatenate([[0.0], np.cumsum(durs)])
        self._w0 = np.array([s[1] for s in segs]) * RPM_TO_RAD_S
        w1 = np.array([s[2] for s in segs]) * RPM_TO_RAD_S
        self._alpha = (w1 - self._w0) / durs
        th = [0.0]
        for d, w0, a in zip(durs, self._w0, self._alpha):
            th.append(th[-1] + w0 * d + 0.5 * a * d * d)
        self._seg_theta = np.array(th)
        self._w_end = w1[-1]

    @property
    def delta_theta(self) -> float:
        return TWO_PI / self.pulses_per_rev

    @property
    def duration(self) -> float:
        return float(self._seg_t[-1])

    def _segment_of(self, t):
        idx = np.searchsorted(self._seg_t, t, side="right") - 1
        return np.clip(idx, 0, len(self.speed_segments))

    def shaft_angle(self, t):
        """Cumulative shaft angle in radians; speed holds constant after the last segment."""
        t = np.asarray(t, dtype=np.float64)
        idx = self._segment_of(t)
        n = len(self.speed_segments)
        last = idx >= n
        i = np.minimum(idx, n - 1)
        tau = t - self._seg_t[i]
        theta = self._seg_theta[i] + self._w0[i] * tau + 0.5 * self._alpha[i] * tau * tau
        if np.any(last):
            tail = self._seg_theta[n] + self._w_end * (t - self._seg_t[n])
            theta = np.where(last, tail, theta)
        return theta

    def angular_speed(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = self._segment_of(t)
        n = len(self.speed_segments)
        i = np.minimum(idx, n - 1)
        w = self._w0[i] + self._alpha[i] * (t - self._seg_t[i])
        return np.where(idx >= n, self._w_end, w)

    def speed_rpm(self, t):
        return self.angular_speed(t) / RPM_TO_RAD_S

    def time_at_angle(self, theta):
        """Closed-form inverse of :meth:`shaft_angle`."""
        theta = np.asarray(theta, dtype=np.float64)
        n = len(self.speed_segments)
        idx = np.clip(np.searchsorted(self._seg_theta, theta, side="right") - 1, 0, n)
        last = idx >= n
        i = np.minimum(idx, n - 1)
        rel = theta - self._seg_theta[i]
        w0 = self._w0[i]
        a = self._alpha[i]
        # 0.5*a*tau^2 + w0*tau - rel = 0, stable positive root
        tau = 2.0 * rel / (w0 + np.sqrt(np.maximum(w0 * w0 + 2.0 * a * rel, 0.0)))
        t = self._seg_t[i] + tau
        if np.any(last):
            t = np.where(last, self._seg_t[n] + (theta - self._seg_theta[n]) / self._w_end, t)
        return t

    def step_offset(self, signal: str, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        out = np.zeros_like(t)
        for s in self.steps:
            if s.signal == signal:
                out += np.where((t >= s.t_start) & (t < s.t_end), s.delta, 0.0)
        return out


@dataclass
class SampleFrame:
    channel_id: int
    t0: float
    sample_rate: float
    values: np.ndarray
    sequence: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def __len__(self):
        return self.values.size

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.values.size) / self.sample_rate

    @property
    def t_end(self) -> float:
        return self.t0 + self.values.size / self.sample_rate


def _noise(seed: int, stream: int, start_index: int, n: int, sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.zeros(n)
    rng = np.random.default_rng([seed, stream, start_index])
    return rng.normal(0.0, sigma, n)


def _check_vibration_rate(rate):
    lo, hi = VIBRATION_RATE_LIMITS
    if not lo <= rate <= hi:
        raise ConfigError(f"vibration sample rate {rate:g} outside [{lo:g}, {hi:g}]", "sample_rate")


def synth_vibration(
    profile: MotorProfile,
    axis: ChannelKind,
    t0: float,
    n: int,
    rate: float,
    *,
    seed: int = 0,
    channel_id: Optional[int] = None,
    sequence: int = 0,
) -> SampleFrame:
    """Acceleration samples (m/s^2) of one axis starting at ``t0``.

    Noise for a frame is drawn from a generator keyed on (seed, axis, first
    sample index), so a frame is reproducible on its own.
    """
    axis = ChannelKind.parse(axis)
    if n <= 0:
        raise ValueError("n must be positive")
    _check_vibration_rate(rate)
    start = int(round(t0 * rate))
    t = (start + np.arange(n)) / rate if abs(start / rate - t0) < 1e-12 else t0 + np.arange(n) / rate
    theta = profile.shaft_angle(t)
    values = np.zeros(n)
    for order, (amp, phase) in profile.order_components.get(axis, {}).items():
        if amp:
            values += amp * np.sin(order * theta + phase)
    values += _noise(seed, int(axis), start, n, profile.noise_sigma)
    return SampleFrame(int(axis) if channel_id is None else channel_id, float(t[0]), rate, values, sequence)


def synth_tach(profile: MotorProfile, t_end: float, t_start: float = 0.0) -> TachPulseTrain:
    """Pulse instants in [t_start, t_end) where the shaft angle crosses a multiple of delta_theta."""
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    dth = profile.delta_theta
    th0 = float(profile.shaft_angle(t_start))
    th1 = float(profile.shaft_angle(t_end))
    m = np.arange(max(0, math.floor(th0 / dth) - 1), math.ceil(th1 / dth) + 2)
    times = profile.time_at_angle(m * dth)
    times = times[(times >= t_start) & (times < t_end)]
    return TachPulseTrain(times, dth)


def synth_aux(
    profile: MotorProfile,
    signal: str,
    t0: float,
    n: int,
    rate: float,
    *,
    seed: int = 0,
    stream: int = 100,
) -> np.ndarray:
    """Physical values of a slowly varying channel (temperature, current, voltage or speed)."""
    start = int(round(t0 * rate))
    t = (start + np.arange(n)) / rate
    if signal == "speed":
        base = profile.speed_rpm(t)
    else:
        base = np.full(n, {
            "temperature": profile.temperature_base,
            "current": profile.current_base,
            "voltage": profile.voltage_base,
        }[signal])
    scale = np.abs(base).mean() if n else 0.0
    values = base + profile.step_offset(signal, t)
    values = values + _noise(seed, stream, start, n, profile.aux_noise * scale)
    return values


@dataclass
class Block:
    """All frames produced for one frame period, the unit moved through tier 1."""

    index: int
    t0: float
    t1: float
    frames: dict
    pulses: Optional[TachPulseTrain] = None
    produced_at: float = 0.0

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def _first_index(b: int, period: float, rate: float) -> int:
    return math.ceil(b * period * rate - 1e-6)


class MotorSimulator:
    """Frame producer for a channel group.

    Every call to :meth:`block` returns the frames whose samples fall in
    [b*period, (b+1)*period).  A channel sampled slower than once per period
    only emits a frame in the periods that contain one of its samples.
    """

    def __init__(self, profile: MotorProfile, channels, seed: int = 0,
                 frame_period: float = DEFAULT_FRAME_PERIOD):
        self.profile = profile
        self.channels = list(channels)
        self.seed = seed
        self.frame_period = frame_period
        self._sequence = {c.id: 0 for c in self.channels}

    def block(self, b: int) -> Block:
        t0 = b * self.frame_period
        t1 = (b + 1) * self.frame_period
        frames = {}
        pulses = None
        for spec in self.channels:
            if spec.is_tach:
                train = synth_tach(self.profile, t1, t_start=t0)
                if len(train):
                    pulses = TachPulseTrain(train.times, self.profile.delta_theta,
                                            channel_id=spec.id, sequence=self._sequence[spec.id], t0=t0)
                    self._sequence[spec.id] += 1
                continue
            rate = spec.sample_rate
            g0 = _first_index(b, self.frame_period, rate)
            g1 = _first_index(b + 1, self.frame_period, rate)
            n = g1 - g0
            if n <= 0:
                continue
            f_t0 = g0 / rate
            if spec.signal == "vibration":
                phys = synth_vibration(self.profile, spec.kind, f_t0, n, rate, seed=self.seed).values
            else:
                phys = synth_aux(self.profile, spec.signal, f_t0, n, rate, seed=self.seed,
                                 stream=100 + spec.id)
            frames[spec.id] = SampleFrame(spec.id, f_t0, rate, spec.to_raw(phys), self._sequence[spec.id])
            self._sequence[spec.id] += 1
        return Block(b, t0, t1, frames, pulses)

    def blocks(self, duration: float) -> Iterator[Block]:
        n_blocks = int(math.floor(duration / self.frame_period + 1e-9))
        for b in range(n_blocks):
            yield self.block(b)
