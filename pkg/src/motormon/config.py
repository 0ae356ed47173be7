"""Run configuration loaded from TOML.

Grammar (all sections optional except ``channels`` and one of ``profile`` or
``source.replay``)::

    [run]        duration, seed, motor_id, frame_period, realtime, status_interval
    [[channels]] id, kind, sample_rate, gain, offset, signal, filter, q, r
    [profile]    segments = [[duration_s, rpm_start, rpm_end], ...], noise_sigma,
                 pulses_per_rev, temperature_base, current_base, voltage_base, aux_noise
    [profile.orders.<axis>]   "<order>" = [amplitude, phase] (axis "all" = every axis)
    [[profile.steps]]         signal, t_start, t_end, delta
    [source]     replay = "recording.motr"
    [[thresholds]] channel, lower, upper, hysteresis, min_violations, mode
    [analysis]   enabled, theta_step, watch_orders, ratio_threshold, floor,
                 baseline, record_baseline, block_revolutions
    [archive]    period, store, remote, journal, record

Relative paths resolve against the directory of the config file.
"""

from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .archive.batch import DEFAULT_PERIOD
from .errors import ConfigError
from .order import DEFAULT_THETA_STEP, TWO_PI
from .source import DEFAULT_FRAME_PERIOD, ChannelKind, ChannelSpec, MotorProfile, StepInjection
from .threshold import ThresholdSpec


@dataclass
class AnalysisSettings:
    enabled: bool = True
    theta_step: float = DEFAULT_THETA_STEP
    watch_orders: list = field(default_factory=lambda: list(range(1, 21)))
    ratio_threshold: float = 5.0
    floor: float = 0.02
    baseline: Optional[str] = None
    record_baseline: bool = False
    block_revolutions: int = 8

    def __post_init__(self):
        if not self.theta_step > 0:
            raise ConfigError("theta_step must be > 0", "analysis.theta_step")
        if self.ratio_threshold <= 0:
            raise ConfigError("ratio_threshold must be > 0", "analysis.ratio_threshold")
        if self.floor < 0:
            raise ConfigError("floor must be >= 0", "analysis.floor")
        if int(self.block_revolutions) != self.block_revolutions or self.block_revolutions < 1:
            raise ConfigError("block_revolutions must be a positive integer", "analysis.block_revolutions")
        nyquist = math.pi / self.theta_step
        for k in self.watch_orders:
            if not 0 < k <= nyquist - 0.5:
                raise ConfigError(f"watched order {k} outside (0, {nyquist - 0.5:g}]", "analysis.watch_orders")
        n = self.block_revolutions * TWO_PI / self.theta_step
        if abs(n - round(n)) > 1e-6 or round(n) < 8:
            raise ConfigError("block_revolutions * 2*pi / theta_step must be an integer >= 8",
                              "analysis.block_revolutions")

    @property
    def block_samples(self) -> int:
        return int(round(self.block_revolutions * TWO_PI / self.theta_step))


@dataclass
class ArchiveSettings:
    period: float = DEFAULT_PERIOD
    store: Optional[Path] = None
    remote: Optional[str] = None
    journal: Optional[Path] = None
    record: Optional[Path] = None

    def __post_init__(self):
        if not self.period > 0:
            raise ConfigError("period must be > 0", "archive.period")


@dataclass
class RunConfig:
    channels: list
    profile: Optional[MotorProfile] = None
    replay: Optional[Path] = None
    thresholds: list = field(default_factory=list)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    archive: ArchiveSettings = field(default_factory=ArchiveSettings)
    duration: float = 10.0
    seed: int = 0
    motor_id: str = "motor"
    frame_period: float = DEFAULT_FRAME_PERIOD
    realtime: bool = False
    status_interval: float = 0.5

    def __post_init__(self):
        ids = [c.id for c in self.channels]
        if not ids:
            raise ConfigError("at least one channel is required", "channels")
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            raise ConfigError(f"duplicate channel ids {dup}", "channels")
        if sum(1 for c in self.channels if c.is_tach) > 1:
            raise ConfigError("at most one tachometer channel is supported", "channels")
        for th in self.thresholds:
            if th.channel_id not in ids:
                raise ConfigError(f"threshold references unknown channel {th.channel_id}",
                                  f"thresholds[channel={th.channel_id}]")
        if (self.profile is None) == (self.replay is None):
            raise ConfigError("exactly one of [profile] or source.replay is required", "profile")
        if self.duration < 0:
            raise ConfigError("duration must be >= 0", "run.duration")
        if not self.frame_period > 0:
            raise ConfigError("frame_period must be > 0", "run.frame_period")
        if self.status_interval < 0.5:
            raise ConfigError("status_interval must be >= 0.5 s (2 Hz)", "run.status_interval")
        tach = self.tach_channel
        if tach is not None and self.profile is not None:
            dth = TWO_PI / self.profile.pulses_per_rev
            if abs(tach.gain - dth) > 1e-12 * dth:
                # tachometer gain is the angle per pulse; keep it consistent with the profile
                object.__setattr__(tach, "gain", dth)

    @property
    def tach_channel(self) -> Optional[ChannelSpec]:
        return next((c for c in self.channels if c.is_tach), None)

    def to_record(self) -> dict:
        """JSON-friendly summary stored in the run_config table."""
        return {
            "motor_id": self.motor_id,
            "channels": [
                {"id": c.id, "kind": c.kind.name, "sample_rate": c.sample_rate, "gain": c.gain,
                 "offset": c.offset, "signal": c.signal, "filter": c.kalman_enabled,
                 "q": c.kalman_q, "r": c.r}
                for c in self.channels
            ],
            "thresholds": [asdict(t) for t in self.thresholds],
            "analysis": asdict(self.analysis),
        }


def default_channels(vibration_rate: float = 25_000.0, aux_rate: float = 10_000.0,
                     pulses_per_rev: int = 1) -> list[ChannelSpec]:
    """Three vibration axes, tachometer, temperature, current, supply voltage and speed sensor."""
    return [
        ChannelSpec(0, ChannelKind.VibrationX, vibration_rate),
        ChannelSpec(1, ChannelKind.VibrationY, vibration_rate),
        ChannelSpec(2, ChannelKind.VibrationZ, vibration_rate),
        ChannelSpec(3, ChannelKind.Tachometer, aux_rate, gain=TWO_PI / pulses_per_rev),
        ChannelSpec(4, ChannelKind.Temperature, aux_rate),
        ChannelSpec(5, ChannelKind.Current, aux_rate),
        ChannelSpec(6, ChannelKind.Voltage, aux_rate),
        ChannelSpec(7, ChannelKind.Voltage, aux_rate, signal="speed"),
    ]


def _take(table: dict, key: str, where: str, cast, default=None, required=False):
    if key not in table:
        if required:
            raise ConfigError("missing required field", f"{where}.{key}")
        return default
    try:
        return cast(table[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {table[key]!r}: {exc}", f"{where}.{key}") from exc


def _path(base: Path, value) -> Optional[Path]:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _channel(i: int, t: dict) -> ChannelSpec:
    where = f"channels[{i}]"
    filt = t.get("filter")
    return ChannelSpec(
        id=_take(t, "id", where, int, required=True),
        kind=ChannelKind.parse(_take(t, "kind", where, str, required=True)),
        sample_rate=_take(t, "sample_rate", where, float, required=True),
        gain=_take(t, "gain", where, float, 1.0),
        offset=_take(t, "offset", where, float, 0.0),
        signal=_take(t, "signal", where, str),
        filter_enabled=None if filt is None else bool(filt),
        q=_take(t, "q", where, float),
        r=_take(t, "r", where, float, 1.0),
    )


def _profile(t: dict) -> MotorProfile:
    where = "profile"
    orders = {}
    for axis, table in t.get("orders", {}).items():
        axes = ["VibrationX", "VibrationY", "VibrationZ"] if axis.lower() == "all" else [axis]
        for a in axes:
            merged = orders.setdefault(ChannelKind.parse(a), {})
            for order, value in table.items():
                merged[float(order)] = value
    segments = _take(t, "segments", where, list, required=True)
    return MotorProfile(
        speed_segments=segments,
        order_components=orders,
        noise_sigma=_take(t, "noise_sigma", where, float, 0.0),
        temperature_base=_take(t, "temperature_base", where, float, 40.0),
        current_base=_take(t, "current_base", where, float, 5.0),
        voltage_base=_take(t, "voltage_base", where, float, 380.0),
        pulses_per_rev=_take(t, "pulses_per_rev", where, int, 1),
        aux_noise=_take(t, "aux_noise", where, float, 0.0),
        steps=[StepInjection(**s) for s in t.get("steps", [])],
    )


def config_from_dict(data: dict, base: Path = Path(".")) -> RunConfig:
    try:
        run = data.get("run", {})
        channels = [_channel(i, c) for i, c in enumerate(data.get("channels", []))]
        kinds = {c.id: c.kind for c in channels}
        thresholds = []
        for i, t in enumerate(data.get("thresholds", [])):
            where = f"thresholds[{i}]"
            cid = _take(t, "channel", where, int, required=True)
            # raw vibration is a zero-mean oscillation, so limits apply to frame RMS by default
            default_mode = "rms" if cid in kinds and kinds[cid].is_vibration else "sample"
            thresholds.append(ThresholdSpec(
                channel_id=cid,
                lower=_take(t, "lower", where, float, required=True),
                upper=_take(t, "upper", where, float, required=True),
                hysteresis=_take(t, "hysteresis", where, float, 0.0),
                min_violations=_take(t, "min_violations", where, int, 1),
                mode=_take(t, "mode", where, str, default_mode),
            ))
        an = data.get("analysis", {})
        known = AnalysisSettings.__dataclass_fields__
        unknown = set(an) - set(known)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "analysis")
        analysis = AnalysisSettings(**an)
        ar = data.get("archive", {})
        archive = ArchiveSettings(
            period=_take(ar, "period", "archive", float, DEFAULT_PERIOD),
            store=_path(base, ar.get("store")),
            remote=ar.get("remote"),
            journal=_path(base, ar.get("journal")),
            record=_path(base, ar.get("record")),
        )
        replay = _path(base, data.get("source", {}).get("replay"))
        profile = _profile(data["profile"]) if "profile" in data else None
        return RunConfig(
            channels=channels,
            profile=profile,
            replay=replay,
            thresholds=thresholds,
            analysis=analysis,
            archive=archive,
            duration=_take(run, "duration", "run", float, 10.0),
            seed=_take(run, "seed", "run", int, 0),
            motor_id=_take(run, "motor_id", "run", str, "motor"),
            frame_period=_take(run, "frame_period", "run", float, DEFAULT_FRAME_PERIOD),
            realtime=_take(run, "realtime", "run", bool, False),
            status_interval=_take(run, "status_interval", "run", float, 0.5),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}", str(path)) from exc
    return config_from_dict(data, path.parent)
