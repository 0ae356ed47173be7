"""Raw-to-physical conversion with an optional scalar Kalman filter per channel."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import DataQualityError, RoutingError
from .source import ChannelSpec, SampleFrame


@dataclass(frozen=True)
class KalmanState:
    """Random-walk model state.  ``x_hat`` is None until the first measurement."""

    x_hat: Optional[float]
    p: float
    q: float
    r: float

    def __post_init__(self):
        if self.q < 0:
            raise ValueError("q must be >= 0")
        if not self.r > 0:
            raise ValueError("r must be > 0")

    @classmethod
    def for_channel(cls, spec: ChannelSpec) -> "KalmanState":
        return cls(None, spec.r, spec.kalman_q, spec.r)


def kalman_step(state: KalmanState, z: float) -> tuple[KalmanState, float]:
    z = float(z)
    if not math.isfinite(z):
        raise DataQualityError(f"non-finite measurement {z!r}")
    x, p = state.x_hat, state.p
    if x is None:
        x, p = z, state.r
    p_pred = p + state.q
    k = p_pred / (p_pred + state.r)
    x = x + k * (z - x)
    return replace(state, x_hat=x, p=(1.0 - k) * p_pred), x


def kalman_filter(state: KalmanState, values) -> tuple[KalmanState, np.ndarray]:
    """Run :func:`kalman_step` over a block; the whole block is rejected on a non-finite value."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        bad = int(np.argmax(~np.isfinite(values)))
        raise DataQualityError(f"non-finite measurement at sample {bad}")
    out = np.empty_like(values)
    x, p, q, r = state.x_hat, state.p, state.q, state.r
    if x is None and values.size:
        x, p = float(values[0]), r
    for i, z in enumerate(values.tolist()):
        p += q
        k = p / (p + r)
        x += k * (z - x)
        p *= 1.0 - k
        out[i] = x
    return replace(state, x_hat=x, p=p), out


def to_physical(frame: SampleFrame, spec: ChannelSpec, state: Optional[KalmanState] = None,
                enabled: Optional[bool] = None) -> tuple[SampleFrame, Optional[KalmanState]]:
    """Filter (when enabled) then scale: ``gain * filtered + offset``."""
    if frame.channel_id != spec.id:
        raise RoutingError(f"frame for channel {frame.channel_id} routed to channel {spec.id}")
    use_filter = spec.kalman_enabled if enabled is None else enabled
    values = frame.values
    if use_filter:
        if state is None:
            state = KalmanState.for_channel(spec)
        state, values = kalman_filter(state, values)
    elif not np.all(np.isfinite(values)):
        raise DataQualityError(f"non-finite measurement on channel {spec.id}")
    return replace(frame, values=spec.gain * values + spec.offset), state


class Preprocessor:
    """Holds per-channel filter state across frames."""

    def __init__(self, channels):
        self.channels = {c.id: c for c in channels}
        self.states = {c.id: KalmanState.for_channel(c) for c in self.channels.values()}

    def __call__(self, frame: SampleFrame) -> SampleFrame:
        spec = self.channels.get(frame.channel_id)
        if spec is None:
            raise RoutingError(f"no channel spec for id {frame.channel_id}")
        out, self.states[spec.id] = to_physical(frame, spec, self.states[spec.id])
        return out
