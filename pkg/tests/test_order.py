import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motormon.errors import (ComparabilityError, CoverageError, InsufficientPulsesError, InvalidWindowError,
                             SingularWindowError, StalledShaftError)
from motormon.order import (B2_EPSILON, TWO_PI, OrderSpectrum, PhaseFitCoeffs, ResampleGrid,
                            StreamingOrderAnalyzer, TachPulseTrain, Verdict, analyze_block, block_length,
                            diagnose, fit_phase, invert_phase, order_spectrum, resample_grid,
                            resample_signal)
from motormon.source import ChannelKind, MotorProfile, synth_tach, synth_vibration

SQ2, SQ3 = math.sqrt(2.0), math.sqrt(3.0)


def bisect_root(f, lo, hi, tol=1e-15, max_iter=200):
    """Plain bisection; f(lo) < 0 < f(hi)."""
    flo = f(lo)
    if flo == 0:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0:
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol * max(1.0, abs(lo)):
            break
    return 0.5 * (lo + hi)


def mp_fit(t1, t2, t3, dth):
    """High-precision Vandermonde solve used as the oracle for fit_phase."""
    with mpmath.workdps(50):
        ts = [mpmath.mpf(t1), mpmath.mpf(t2), mpmath.mpf(t3)]
        A = mpmath.matrix([[1, t, t * t] for t in ts])
        rhs = mpmath.matrix([0, mpmath.mpf(dth), 2 * mpmath.mpf(dth)])
        sol = mpmath.lu_solve(A, rhs)
        return [float(x) for x in sol]


# -- fit_phase ---------------------------------------------------------------


def test_fit_constant_speed():
    c = fit_phase((0.0, 1.0, 2.0), TWO_PI)
    assert c.b0 == pytest.approx(0.0, abs=1e-15)
    assert c.b1 == pytest.approx(TWO_PI, rel=1e-15)
    assert c.b2 == pytest.approx(0.0, abs=1e-15)


def test_fit_accelerating_exact():
    c = fit_phase((0.0, SQ2 - 1, SQ3 - 1), TWO_PI)
    assert c.b0 == pytest.approx(0.0, abs=1e-14)
    assert c.b1 == pytest.approx(4 * math.pi, rel=1e-12)
    assert c.b2 == pytest.approx(2 * math.pi, rel=1e-12)


def test_fit_singular_window():
    with pytest.raises(SingularWindowError):
        fit_phase((0.0, 1.0, 1.0 + 1e-12), TWO_PI)


def test_fit_rejects_reversal():
    # pulses spaced 1 s then 0.01 s: the implied deceleration reverses the shaft
    with pytest.raises(InvalidWindowError):
        fit_phase((0.0, 0.01, 1.0), TWO_PI)


def test_fit_matches_high_precision_solve(rng):
    for _ in range(200):
        t1 = rng.uniform(0, 100)
        h1 = rng.uniform(0.01, 0.2)
        # spacing ratios outside (sqrt2-1, sqrt2+1) imply a reversal
        h2 = h1 * rng.uniform(0.5, 2.0)
        dth = TWO_PI / rng.integers(1, 8)
        c = fit_phase((t1, t1 + h1, t1 + h1 + h2), dth)
        b0, b1, b2 = mp_fit(t1, t1 + h1, t1 + h1 + h2, dth)
        # compare through the model at the pulses, the conditioning-free quantity
        for t, th in zip((t1, t1 + h1, t1 + h1 + h2), (0, dth, 2 * dth)):
            assert c.angle(t) == pytest.approx(th, abs=1e-9 * max(1, abs(b1 * t)))
        assert c.b2 == pytest.approx(b2, rel=1e-7, abs=1e-9)


# -- invert_phase ------------------------------------------------------------


def test_invert_linear():
    assert invert_phase(PhaseFitCoeffs(0.0, TWO_PI, 0.0, (0, 1)), math.pi) == pytest.approx(0.5, abs=1e-15)


def test_invert_quadratic():
    t = invert_phase(PhaseFitCoeffs(0.0, 4 * math.pi, 2 * math.pi, (0, 1)), math.pi)
    assert t == pytest.approx((math.sqrt(6) - 2) / 2, abs=1e-15)
    assert 4 * math.pi * t + 2 * math.pi * t * t == pytest.approx(math.pi, rel=1e-14)


@pytest.mark.parametrize("coeffs", [(0.0, 5.0, 0.0), (1.5, 4.0, 2.0), (-3.0, 7.0, -0.5), (2.0, 3.0, 1e-10)])
def test_invert_at_b0_is_origin(coeffs):
    assert invert_phase(PhaseFitCoeffs(*coeffs, (0, 1)), coeffs[0]) == pytest.approx(0.0, abs=1e-15)


def test_invert_array_matches_scalar():
    c = PhaseFitCoeffs(0.3, 6.0, 1.5, (0, 1))
    th = np.linspace(0.3, 10, 17)
    arr = invert_phase(c, th)
    assert np.array_equal(arr, np.array([invert_phase(c, x) for x in th]))


def test_invert_negative_b1_late_window():
    # window at t ~ 100 s accelerating: b1 is strongly negative in absolute time
    t1 = 100.0
    c = fit_phase((t1, t1 + 0.1, t1 + 0.19), TWO_PI)
    assert c.b1 < 0
    for th in (0.0, 1.0, TWO_PI, 2 * TWO_PI):
        t = invert_phase(c, th)
        assert c.angle(t) == pytest.approx(th, abs=1e-6)
        assert t1 - 1e-9 <= t <= t1 + 0.19 + 1e-9


@settings(max_examples=300, deadline=None)
@given(b1=st.floats(0.5, 500), b2=st.one_of(st.just(0.0), st.floats(-50, 1e4)), frac=st.floats(0, 1))
def test_invert_matches_bisection_property(b1, b2, frac):
    t_end = 0.5
    if b1 + 2 * b2 * t_end <= 0:
        b2 = 0.0
    c = PhaseFitCoeffs(0.0, b1, b2, (0.0, t_end))
    theta = frac * c.angle(t_end)
    t = invert_phase(c, theta)
    oracle = bisect_root(lambda x: c.angle(x) - theta, 0.0, t_end)
    assert abs(t - oracle) <= 1e-9


@pytest.mark.parametrize("b2", [0.0, 0.5 * B2_EPSILON, 0.999 * B2_EPSILON, B2_EPSILON, 1.001 * B2_EPSILON,
                                -0.999 * B2_EPSILON, -1.001 * B2_EPSILON])
def test_invert_epsilon_boundary_late_window(b2):
    # absolute-time coefficients at t ~ 200 s magnify any dropped b2*t^2 term
    b1 = 50.0
    c = PhaseFitCoeffs(0.0, b1, b2, (190.0, 210.0))
    theta = c.angle(200.0)
    t = invert_phase(c, theta)
    oracle = bisect_root(lambda x: c.angle(x) - theta, 190.0, 210.0)
    assert abs(t - oracle) <= 1e-9


def test_invert_stalled_shaft():
    with pytest.raises(StalledShaftError):
        invert_phase(PhaseFitCoeffs(0.0, 0.0, 0.0, (0, 1)), 1.0)


# -- resample_grid -----------------------------------------------------------


def test_grid_uniform_rotation():
    pulses = TachPulseTrain(np.arange(10) * 0.1, TWO_PI)
    grid = resample_grid(pulses, TWO_PI / 8)
    # 9 revolutions at 8 points each plus the closing point at t=0.9
    assert len(grid) == 73
    assert np.allclose(grid.times, np.arange(73) * 0.0125, atol=1e-14)


def test_grid_accelerating_matches_bisection():
    # theta = 4*pi*t + 2*pi*t^2: 2 rev/s accelerating at 2 rev/s^2
    profile = MotorProfile([(4.0, 120.0, 600.0)])
    pulses = synth_tach(profile, 4.0)
    assert pulses.times[:3] == pytest.approx([0.0, SQ2 - 1, SQ3 - 1], abs=1e-12)
    step = TWO_PI / 16
    grid = resample_grid(pulses, step)

    def theta(t):
        return 4 * math.pi * t + 2 * math.pi * t * t

    for m in range(0, len(grid), 7):
        target = m * step
        oracle = bisect_root(lambda t: theta(t) - target, 0.0, 4.0)
        assert abs(grid.times[m] - oracle) <= 1e-9


def test_grid_needs_three_pulses():
    with pytest.raises(InsufficientPulsesError):
        resample_grid(TachPulseTrain([0.0, 0.1], TWO_PI))


def test_grid_angles_property():
    grid = resample_grid(TachPulseTrain(np.arange(5) * 0.05, TWO_PI), TWO_PI / 4)
    assert np.allclose(grid.angles, np.arange(len(grid)) * TWO_PI / 4)


# -- resample_signal ---------------------------------------------------------


def test_resample_midpoint():
    grid = ResampleGrid(1.0, np.array([0.0005]))
    assert resample_signal([0.0, 1.0], 1000.0, 0.0, grid)[0] == pytest.approx(0.5)


def test_resample_coverage_error():
    grid = ResampleGrid(1.0, np.array([0.0, 0.0015]))
    with pytest.raises(CoverageError) as err:
        resample_signal([0.0, 1.0], 1000.0, 0.0, grid)
    assert err.value.index == 1


def test_resample_constant_speed_sinusoid():
    # 10 Hz shaft, order 5 at 25 kHz: linear interpolation error is bounded by (w*h)^2/8
    profile = MotorProfile([(2.0, 600.0, 600.0)], {ChannelKind.VibrationX: {5: 1.0}})
    rate = 25000.0
    frame = synth_vibration(profile, ChannelKind.VibrationX, 0.0, 40000, rate)
    grid = resample_grid(synth_tach(profile, 1.6), TWO_PI / 64)
    x = resample_signal(frame.values, rate, 0.0, grid)
    expected = np.sin(5 * grid.angles)
    bound = (TWO_PI * 50 / rate) ** 2 / 8
    assert np.max(np.abs(x - expected)) <= bound * 1.01


# -- order_spectrum ----------------------------------------------------------


def naive_spectrum(x):
    """Direct DFT with the same window and single-sided scaling."""
    n = len(x)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    k = np.arange(n // 2 + 1)[:, None]
    X = (x * w * np.exp(-2j * np.pi * k * np.arange(n) / n)).sum(axis=1)
    amp = np.abs(X) * 2 / (n * 0.5)
    amp[0] /= 2
    amp[-1] /= 2
    return amp


def test_spectrum_order5():
    theta = np.arange(512) * TWO_PI / 64
    sp = order_spectrum(np.sin(5 * theta), TWO_PI / 64)
    assert sp.order_resolution == pytest.approx(1 / 8)
    k = int(np.argmax(sp.amplitudes))
    assert sp.orders[k] == pytest.approx(5.0)
    assert sp.amplitudes[k] == pytest.approx(1.0, abs=0.01)
    far = np.abs(sp.orders - 5.0) >= 2
    assert np.all(sp.amplitudes[far] < 0.01)


def test_spectrum_matches_direct_dft(rng):
    x = rng.normal(size=256)
    sp = order_spectrum(x, TWO_PI / 32)
    assert np.allclose(sp.amplitudes, naive_spectrum(x), rtol=1e-10, atol=1e-12)


def test_spectrum_zero():
    assert not order_spectrum(np.zeros(64)).amplitudes.any()


def test_spectrum_dc_offset():
    sp = order_spectrum(np.full(512, 3.0), TWO_PI / 64)
    assert sp.amplitudes[0] == pytest.approx(3.0, abs=0.01)
    # the Hann main lobe puts 3.0/2 * 2 into bin 1; every bin past the lobe is empty
    assert np.all(sp.amplitudes[2:] < 0.01)


def test_block_length():
    assert block_length(600, TWO_PI / 64) == 512
    assert block_length(64, TWO_PI / 64) == 64
    assert block_length(100, TWO_PI / 64) == 64


# -- diagnose ----------------------------------------------------------------


def _spec(values, res=0.125):
    return OrderSpectrum(res, np.asarray(values, dtype=float), 1 / res)


def test_diagnose_identity():
    sp = _spec(np.linspace(0.1, 0.2, 200))
    rep = diagnose(sp, sp, range(1, 21), 5.0, 0.02)
    assert rep.verdict is Verdict.HEALTHY and rep.flagged_orders == []


def test_diagnose_floor_dominates():
    base = _spec(np.full(200, 1e-4))
    rep = diagnose(_spec(np.full(200, 1e-3)), base, range(1, 21), 5.0, 0.02)
    assert rep.verdict is Verdict.HEALTHY


def test_diagnose_flags_orders():
    base = np.full(200, 0.01)
    meas = base.copy()
    meas[80] = 0.5  # order 10
    meas[112] = 0.4  # order 14
    rep = diagnose(_spec(meas), _spec(base), range(1, 21), 5.0, 0.02)
    assert rep.flagged_orders == [10.0, 14.0]
    assert rep.verdict is Verdict.FAULTY
    assert rep.max_ratio == pytest.approx(50.0)


def test_diagnose_resolution_mismatch():
    with pytest.raises(ComparabilityError):
        diagnose(_spec(np.ones(200), 0.125), _spec(np.ones(100), 0.25), [1], 5, 0.02)


def test_diagnose_order_out_of_range():
    with pytest.raises(ComparabilityError):
        diagnose(_spec(np.ones(40)), _spec(np.ones(40)), [20], 5, 0.02)


# -- streaming ---------------------------------------------------------------


def test_streaming_matches_batch():
    profile = MotorProfile([(3.0, 900.0, 1500.0)], {ChannelKind.VibrationX: {3: 1.0, 7: 0.3}})
    rate = 20000.0
    frames = [synth_vibration(profile, ChannelKind.VibrationX, b * 0.1, 2000, rate) for b in range(30)]
    pulses = synth_tach(profile, 3.0)
    an = StreamingOrderAnalyzer({0: rate}, TWO_PI, TWO_PI / 64, block_revolutions=8)
    out = []
    for b, f in enumerate(frames):
        an.add_pulses(pulses.times[(pulses.times >= b * 0.1) & (pulses.times < (b + 1) * 0.1)])
        an.add_frame(0, f.t0, f.values)
        out.extend(an.poll())
    assert len(out) >= 3
    values = np.concatenate([f.values for f in frames])
    # first streamed block covers pulses 0..8
    first = analyze_block(TachPulseTrain(pulses.times[:9], TWO_PI), {0: (values, rate, 0.0)}, TWO_PI / 64, 512)
    cid, t, sp = out[0]
    assert cid == 0 and t == pytest.approx(pulses.times[8])
    assert np.allclose(sp.amplitudes, first[0].amplitudes, atol=1e-12)
    for _, _, sp in out:
        assert sp.orders[np.argmax(sp.amplitudes)] == pytest.approx(3.0)
