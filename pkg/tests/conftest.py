import math

import numpy as np
import pytest

from motormon.config import AnalysisSettings, ArchiveSettings, RunConfig, default_channels
from motormon.source import ChannelKind, ChannelSpec, MotorProfile

HEALTHY_ORDERS = {1.0: (0.5, 0.0), 2.0: (0.2, 0.3), 3.0: (0.05, 1.1)}


def healthy_profile(rpm=1500.0, duration=60.0, noise=0.02, extra=None, floor_amp=0.0):
    orders = dict(HEALTHY_ORDERS)
    if floor_amp:
        for k in range(4, 21):
            orders.setdefault(float(k), (floor_amp, 0.1 * k))
    if extra:
        orders.update(extra)
    axes = {ax: orders for ax in (ChannelKind.VibrationX, ChannelKind.VibrationY, ChannelKind.VibrationZ)}
    return MotorProfile([(duration, rpm, rpm)], axes, noise_sigma=noise, aux_noise=0.01)


def faulty_profile(**kw):
    return healthy_profile(extra={10.0: (0.5, 0.4), 14.0: (0.4, 2.0)}, **kw)


def make_config(tmp_path=None, *, profile=None, channels=None, duration=1.0, seed=0, store=None,
                thresholds=(), analysis=None, archive=None, **kw) -> RunConfig:
    if archive is None:
        if store is None and tmp_path is not None:
            store = tmp_path / "store.db"
        archive = ArchiveSettings(store=store)
    return RunConfig(
        channels=list(channels) if channels is not None else default_channels(),
        profile=profile if profile is not None else healthy_profile(),
        thresholds=list(thresholds),
        analysis=analysis or AnalysisSettings(),
        archive=archive,
        duration=duration,
        seed=seed,
        **kw,
    )


def aux_channels():
    """A light layout for pipeline tests: tachometer plus two slow channels and one vibration axis."""
    return [
        ChannelSpec(0, ChannelKind.VibrationX, 5000.0),
        ChannelSpec(3, ChannelKind.Tachometer, 10000.0, gain=2 * math.pi),
        ChannelSpec(4, ChannelKind.Temperature, 1000.0),
        ChannelSpec(5, ChannelKind.Current, 1000.0),
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
