"""Computed order tracking.

Tachometer pulses are fitted with a quadratic shaft-angle model over sliding
three-pulse windows, the model is inverted to find the instants at which the
shaft passes equal angle increments, the vibration signal is linearly
interpolated at those instants and the angle-domain signal is transformed to
an order spectrum.  Fault diagnosis compares watched order amplitudes with a
healthy baseline spectrum.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ComparabilityError,
    CoverageError,
    InsufficientDataError,
    InsufficientPulsesError,
    InvalidWindowError,
    OutOfRangeAngleError,
    SingularWindowError,
    StalledShaftError,
)

TWO_PI = 2.0 * math.pi

#: below this |b2| (rad/s^2) the phase model is inverted as a straight line
B2_EPSILON = 1e-9
#: minimum pulse spacing accepted by :func:`fit_phase`, seconds
MIN_PULSE_SPACING = 1e-9
DEFAULT_THETA_STEP = TWO_PI / 64


@dataclass
class TachPulseTrain:
    """Tachometer pulse instants, one pulse per ``delta_theta`` radians of shaft rotation."""

    times: np.ndarray
    delta_theta: float
    # recording metadata, not used by the analysis
    channel_id: Optional[int] = None
    sequence: int = 0
    t0: Optional[float] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if not self.delta_theta > 0:
            raise ValueError("delta_theta must be positive")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("pulse times must be strictly increasing")

    def __len__(self):
        return self.times.size

    @classmethod
    def concatenate(cls, trains: Sequence["TachPulseTrain"]) -> "TachPulseTrain":
        if not trains:
            raise InsufficientPulsesError("no pulse trains to concatenate")
        return cls(np.concatenate([tr.times for tr in trains]), trains[0].delta_theta)


@dataclass(frozen=True)
class PhaseFitCoeffs:
    """theta(t) = b0 + b1*t + b2*t**2 on ``window``; angles are relative to the window start."""

    b0: float
    b1: float
    b2: float
    window: tuple[float, float]

    def angle(self, t):
        return self.b0 + self.b1 * t + self.b2 * t * t

    def speed(self, t):
        return self.b1 + 2.0 * self.b2 * t


@dataclass
class ResampleGrid:
    theta_step: float
    times: np.ndarray
    theta0: float = 0.0

    def __len__(self):
        return self.times.size

    @property
    def angles(self) -> np.ndarray:
        return self.theta0 + self.theta_step * np.arange(self.times.size)


@dataclass
class OrderSpectrum:
    order_resolution: float
    amplitudes: np.ndarray
    revolutions: float

    @property
    def orders(self) -> np.ndarray:
        return np.arange(self.amplitudes.size) * self.order_resolution

    def band_max(self, order: float, half_width: float = 0.5) -> float:
        orders = self.orders
        tol = 1e-9 * max(1.0, order)
        mask = np.abs(orders - order) <= half_width + tol
        if not mask.any():
            return 0.0
        return float(self.amplitudes[mask].max())


class Verdict(enum.Enum):
    HEALTHY = "Healthy"
    FAULTY = "Faulty"


@dataclass(frozen=True)
class OrderFinding:
    order: float
    healthy_amplitude: float
    measured_amplitude: float
    ratio: float
    flagged: bool


@dataclass
class DiagnosisReport:
    findings: list[OrderFinding]
    verdict: Verdict
    flagged_orders: list[float] = field(default_factory=list)
    channel_id: Optional[int] = None
    t: Optional[float] = None
    ratio_threshold: float = math.nan

    @property
    def max_ratio(self) -> float:
        ratios = [f.ratio for f in self.findings if f.flagged] or [f.ratio for f in self.findings]
        return max(ratios, default=0.0)


# ---------------------------------------------------------------------------
# phase model


def fit_phase(pulses: Sequence[float], delta_theta: float) -> PhaseFitCoeffs:
    """Solve the 3x3 system putting angles 0, dtheta, 2*dtheta at the three pulse times.

    The system is solved in time relative to the first pulse and the result is
    shifted back to absolute time, which keeps the Vandermonde matrix well
    conditioned for late windows.
    """
    t1, t2, t3 = (float(p) for p in pulses)
    if not delta_theta > 0:
        raise InvalidWindowError("delta_theta must be positive")
    h1 = t2 - t1
    h2 = t3 - t2
    if h1 < MIN_PULSE_SPACING or h2 < MIN_PULSE_SPACING:
        raise SingularWindowError(f"degenerate pulse window ({t1!r}, {t2!r}, {t3!r})")
    # Newton divided differences in local time u = t - t1
    d1 = delta_theta / h1
    d2 = delta_theta / h2
    a2 = (d2 - d1) / (h1 + h2)
    a1 = d1 - a2 * h1
    # theta = a1*u + a2*u^2, u = t - t1
    b2 = a2
    b1 = a1 - 2.0 * a2 * t1
    b0 = (a2 * t1 - a1) * t1
    # monotone on the window: speed positive at both ends (linear in t)
    if a1 <= 0 or a1 + 2.0 * a2 * (h1 + h2) <= 0:
        raise InvalidWindowError("fit implies shaft reversal inside the window")
    return PhaseFitCoeffs(b0, b1, b2, (t1, t3))


def invert_phase(coeffs: PhaseFitCoeffs, theta):
    """Time at which the fitted shaft angle equals ``theta``.

    Uses the increasing-branch root of b2*t^2 + b1*t + (b0 - theta) = 0, written
    as 2(theta - b0) / (b1 + sqrt(b1^2 + 4 b2 (theta - b0))) so that no
    cancellation occurs as b2 -> 0.  Accepts a scalar or an array of angles.
    """
    b0, b1, b2 = coeffs.b0, coeffs.b1, coeffs.b2
    theta_arr = np.asarray(theta, dtype=np.float64)
    rel = theta_arr - b0
    if abs(b2) < B2_EPSILON and b1 < B2_EPSILON:
        raise StalledShaftError(f"phase model has no increasing branch (b1={b1!r}, b2={b2!r})")
    disc = b1 * b1 + 4.0 * b2 * rel
    if np.any(disc < 0):
        raise OutOfRangeAngleError("angle lies beyond the vertex of the phase model")
    root = np.sqrt(disc)
    if b1 > 0:
        # reduces exactly to (theta - b0) / b1 when b2 == 0; the plain linear
        # formula would drop the b2*t^2 term, which matters at large t
        t = 2.0 * rel / (b1 + root)
    else:
        # b1 <= 0 only for windows far from t=0 with b2 > 0
        t = (root - b1) / (2.0 * b2)
    if np.ndim(theta) == 0:
        return float(t)
    return t


def _window_coeffs_local(t1, t2, t3, delta_theta):
    """Vectorised local-time fits: theta = a1*u + a2*u^2 with u = t - t1."""
    h1 = t2 - t1
    h2 = t3 - t2
    d1 = delta_theta / h1
    d2 = delta_theta / h2
    a2 = (d2 - d1) / (h1 + h2)
    a1 = d1 - a2 * h1
    return a1, a2


def resample_grid(pulses: TachPulseTrain, theta_step: float = DEFAULT_THETA_STEP) -> ResampleGrid:
    """Equal-angle sample instants from sliding three-pulse phase fits.

    Window i spans pulses i, i+1, i+2 and supplies the grid angles in
    [i*dtheta, (i+1)*dtheta); the last window also covers up to and including
    its third pulse.
    """
    times = pulses.times
    dth = pulses.delta_theta
    if times.size < 3:
        raise InsufficientPulsesError(f"need at least 3 tachometer pulses, got {times.size}")
    if not 0 < theta_step <= dth * (1 + 1e-12):
        raise ValueError("theta_step must lie in (0, delta_theta]")
    h = np.diff(times)
    if np.any(h < MIN_PULSE_SPACING):
        i = int(np.argmax(h < MIN_PULSE_SPACING))
        raise SingularWindowError(f"degenerate pulse spacing at pulse {i}")

    n_windows = times.size - 2
    total_angle = (times.size - 1) * dth
    n_points = int(math.floor(total_angle / theta_step * (1 + 1e-12))) + 1
    angles = theta_step * np.arange(n_points)
    win = np.minimum((angles / dth * (1 + 1e-12)).astype(np.int64), n_windows - 1)
    win = np.maximum(win, 0)

    t1 = times[:-2]
    a1, a2 = _window_coeffs_local(t1, times[1:-1], times[2:], dth)
    if np.any(a1 <= 0) or np.any(a1 + 2.0 * a2 * (times[2:] - t1) <= 0):
        bad = int(np.argmax((a1 <= 0) | (a1 + 2.0 * a2 * (times[2:] - t1) <= 0)))
        raise InvalidWindowError(f"window {bad} implies shaft reversal")

    rel = angles - win * dth
    ca1 = a1[win]
    ca2 = a2[win]
    disc = ca1 * ca1 + 4.0 * ca2 * rel
    if np.any(disc < 0):
        raise OutOfRangeAngleError("grid angle beyond the vertex of a window fit")
    u = 2.0 * rel / (ca1 + np.sqrt(disc))
    grid_times = t1[win] + u
    if np.any(np.diff(grid_times) <= 0):
        raise InvalidWindowError("resample grid is not strictly increasing")
    return ResampleGrid(theta_step=theta_step, times=grid_times, theta0=0.0)


def resample_signal(values, rate: float, t0: float, grid: ResampleGrid) -> np.ndarray:
    """Linearly interpolate uniformly sampled ``values`` at the grid instants."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise CoverageError("empty signal", 0)
    t_last = t0 + (values.size - 1) / rate
    gt = grid.times
    # sample-period relative slack for instants computed from the same clock
    slack = 1e-9 / rate
    outside = (gt < t0 - slack) | (gt > t_last + slack)
    if np.any(outside):
        idx = int(np.argmax(outside))
        raise CoverageError(
            f"grid time {gt[idx]!r} (index {idx}) outside signal span [{t0!r}, {t_last!r}]", idx
        )
    pos = np.clip((gt - t0) * rate, 0.0, values.size - 1)
    return np.interp(pos, np.arange(values.size, dtype=np.float64), values)


# ---------------------------------------------------------------------------
# spectrum


def hann(n: int) -> np.ndarray:
    # periodic Hann: whole-revolution blocks then carry no leakage for integer orders
    return 0.5 - 0.5 * np.cos(TWO_PI * np.arange(n) / n)


def order_spectrum(angle_samples, theta_step: float = DEFAULT_THETA_STEP) -> OrderSpectrum:
    x = np.asarray(angle_samples, dtype=np.float64)
    n = x.size
    if n < 8:
        raise InsufficientDataError(f"order spectrum needs at least 8 samples, got {n}")
    if not theta_step > 0:
        raise ValueError("theta_step must be positive")
    w = hann(n)
    gain = w.mean()
    amp = np.abs(np.fft.rfft(x * w)) * (2.0 / (n * gain))
    amp[0] *= 0.5
    if n % 2 == 0:
        amp[-1] *= 0.5
    revolutions = n * theta_step / TWO_PI
    return OrderSpectrum(order_resolution=1.0 / revolutions, amplitudes=amp, revolutions=revolutions)


def block_length(n_available: int, theta_step: float = DEFAULT_THETA_STEP) -> int:
    """Largest power-of-two sample count <= n_available spanning whole revolutions.

    Falls back to the largest power of two when no such count spans whole
    revolutions (samples per revolution not a power-of-two fraction).
    """
    if n_available < 8:
        raise InsufficientDataError(f"need at least 8 angle samples, got {n_available}")
    n = 1 << (int(n_available).bit_length() - 1)
    k = n
    while k >= 8:
        revs = k * theta_step / TWO_PI
        if abs(revs - round(revs)) < 1e-9 and round(revs) >= 1:
            return k
        k >>= 1
    return n


def diagnose(
    measured: OrderSpectrum,
    baseline: OrderSpectrum,
    watch_orders: Sequence[float],
    ratio_threshold: float,
    floor: float,
) -> DiagnosisReport:
    rel = abs(measured.order_resolution - baseline.order_resolution) / baseline.order_resolution
    if rel > 0.01:
        raise ComparabilityError(
            f"order resolutions differ: {measured.order_resolution:g} vs {baseline.order_resolution:g}"
        )
    top = min(measured.orders[-1], baseline.orders[-1])
    findings = []
    for k in watch_orders:
        if k < 0 or k > top:
            raise ComparabilityError(f"watched order {k} outside spectral range [0, {top:g}]")
        healthy = baseline.band_max(k)
        meas = measured.band_max(k)
        ratio = meas / healthy if healthy > 0 else (math.inf if meas > 0 else 1.0)
        flagged = meas > max(ratio_threshold * healthy, floor)
        findings.append(OrderFinding(float(k), healthy, meas, ratio, flagged))
    flagged_orders = [f.order for f in findings if f.flagged]
    verdict = Verdict.FAULTY if flagged_orders else Verdict.HEALTHY
    return DiagnosisReport(findings, verdict, flagged_orders, ratio_threshold=float(ratio_threshold))


def analyze_block(
    pulses: TachPulseTrain,
    signals: dict,
    theta_step: float = DEFAULT_THETA_STEP,
    n_samples: Optional[int] = None,
) -> dict:
    """Run the whole resample/FFT chain on one block.

    ``signals`` maps a key (usually the channel id) to ``(values, rate, t0)``.
    Returns a mapping of the same keys to :class:`OrderSpectrum`.
    """
    grid = resample_grid(pulses, theta_step)
    n = n_samples or block_length(len(grid), theta_step)
    if n > len(grid):
        raise InsufficientDataError(f"block of {n} samples exceeds grid of {len(grid)}")
    sub = ResampleGrid(theta_step, grid.times[:n], grid.theta0)
    return {
        key: order_spectrum(resample_signal(v, rate, t0, sub), theta_step)
        for key, (v, rate, t0) in signals.items()
    }


def average_spectra(spectra: Sequence[OrderSpectrum]) -> OrderSpectrum:
    if not spectra:
        raise InsufficientDataError("no spectra to average")
    first = spectra[0]
    for s in spectra[1:]:
        if s.amplitudes.size != first.amplitudes.size:
            raise ComparabilityError("cannot average spectra of different lengths")
    amp = np.mean([s.amplitudes for s in spectra], axis=0)
    return OrderSpectrum(first.order_resolution, amp, first.revolutions)


class StreamingOrderAnalyzer:
    """Cuts a live stream of pulses and vibration frames into analysis blocks.

    Each block starts on a tachometer pulse and spans ``block_revolutions``
    whole revolutions (``block_revolutions * 2*pi / theta_step`` angle
    samples).  Consecutive blocks share their boundary pulse.
    """

    def __init__(self, rates: dict, delta_theta: float, theta_step: float = DEFAULT_THETA_STEP,
                 block_revolutions: int = 8):
        self.rates = dict(rates)
        self.delta_theta = delta_theta
        self.theta_step = theta_step
        self.n_samples = int(round(block_revolutions * TWO_PI / theta_step))
        self.pulses_per_block = int(round(block_revolutions * TWO_PI / delta_theta))
        self._pulses = np.empty(0)
        self._values = {cid: np.empty(0) for cid in self.rates}
        self._start = {cid: None for cid in self.rates}  # global index of first buffered sample

    def add_pulses(self, times):
        self._pulses = np.concatenate([self._pulses, np.asarray(times, dtype=np.float64)])

    def add_frame(self, channel_id: int, t0: float, values):
        rate = self.rates[channel_id]
        g0 = int(round(t0 * rate))
        if self._start[channel_id] is None:
            self._start[channel_id] = g0
        self._values[channel_id] = np.concatenate([self._values[channel_id], values])

    def _span(self, cid):
        rate = self.rates[cid]
        g = self._start[cid]
        if g is None or self._values[cid].size == 0:
            return None
        return g / rate, (g + self._values[cid].size - 1) / rate

    def poll(self) -> list[tuple[int, float, OrderSpectrum]]:
        out = []
        m = self.pulses_per_block
        while self._pulses.size >= m + 1:
            spans = {cid: self._span(cid) for cid in self.rates}
            if any(s is None for s in spans.values()):
                break
            first = max(s[0] for s in spans.values())
            if self._pulses[0] < first:
                # pulses that predate the vibration data cannot be analysed
                self._pulses = self._pulses[np.searchsorted(self._pulses, first):]
                continue
            block_pulses = TachPulseTrain(self._pulses[: m + 1], self.delta_theta)
            grid = resample_grid(block_pulses, self.theta_step)
            sub = ResampleGrid(self.theta_step, grid.times[: self.n_samples])
            t_need = sub.times[-1]
            if any(s[1] < t_need for s in spans.values()):
                break
            t_block = float(self._pulses[m])
            for cid, rate in self.rates.items():
                g = self._start[cid]
                x = resample_signal(self._values[cid], rate, g / rate, sub)
                out.append((cid, t_block, order_spectrum(x, self.theta_step)))
            self._pulses = self._pulses[m:]
            for cid, rate in self.rates.items():
                keep_from = max(0, int(math.floor(t_block * rate)) - self._start[cid] - 1)
                self._values[cid] = self._values[cid][keep_from:]
                self._start[cid] += keep_from
        return out
