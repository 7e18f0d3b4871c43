import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viscotomo.attenuation import ComplexFrequency
from viscotomo.errors import DomainError
from viscotomo.signal import (RickerSpec, TimeSignal, add_white_noise, laplace_fourier,
                              measured_snr_db, ricker)
from viscotomo.solver import FrequencyData


def test_ricker_peak_and_zero_crossings():
    spec = RickerSpec(1e6, 1.5e-6)
    s = ricker(spec, 400, 10e-9)
    k0 = int(round(1.5e-6 / 10e-9))
    assert s.samples[k0] == pytest.approx(1.0, abs=1e-15)
    assert np.argmax(np.abs(s.samples)) == k0
    # 2 pi^2 f^2 (t - t0)^2 = 1
    t_zero = 1 / (math.pi * 1e6 * math.sqrt(2))
    one = ricker(RickerSpec(1e6, 0.0), 2, t_zero)
    assert one.samples[1] == pytest.approx(0.0, abs=1e-14)


def test_ricker_zero_mean():
    f = 1e6
    s = ricker(RickerSpec(f, 3e-6), 600, 10e-9)
    assert abs(np.sum(s.samples) * s.dt) <= 1e-3 / f


def test_ricker_spectrum_peak():
    f = 1e6
    s = ricker(RickerSpec(f, 1.5e-6), 1000, 10e-9)
    freqs = np.linspace(0.2e6, 2.0e6, 181)
    mags = [abs(laplace_fourier(s, ComplexFrequency.from_hz(fr))) for fr in freqs]
    assert abs(freqs[int(np.argmax(mags))] - f) <= freqs[1] - freqs[0]


def test_laplace_fourier_examples():
    delta = TimeSignal(1.0, np.r_[1.0, np.zeros(9)])
    assert laplace_fourier(delta, ComplexFrequency(3.0, 2.0)) == 1 + 0j
    ones = TimeSignal(1e-3, np.ones(50))
    assert laplace_fourier(ones, ComplexFrequency(1e-12)) == pytest.approx(50)
    pair = TimeSignal(1.0, np.array([0.0, 1.0]))
    assert laplace_fourier(pair, 1j * math.log(2)) == pytest.approx(0.5, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**32 - 1))
def test_laplace_fourier_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    s1, s2 = rng.normal(size=64), rng.normal(size=64)
    w = ComplexFrequency(2 * math.pi * 1e5, 1e4)
    dt = 1e-7
    lhs = laplace_fourier(TimeSignal(dt, a * s1 + b * s2), w)
    rhs = a * laplace_fourier(TimeSignal(dt, s1), w) + b * laplace_fourier(TimeSignal(dt, s2), w)
    scale = abs(a) * np.sum(np.abs(s1)) + abs(b) * np.sum(np.abs(s2)) + 1e-300
    assert abs(lhs - rhs) <= 1e-12 * scale


def test_damping_of_time_shift():
    dt = 1e-8
    s = ricker(RickerSpec(1e6, 1.5e-6), 2000, dt)
    m = 300
    shifted = TimeSignal(dt, np.r_[np.zeros(m), s.samples[:-m]])
    w = ComplexFrequency(2 * math.pi * 8e5, 2e5)
    ratio = abs(laplace_fourier(shifted, w)) / abs(laplace_fourier(s, w))
    assert ratio == pytest.approx(math.exp(-w.omega_i * m * dt), rel=1e-10)


def _data(seed=0, shape=(3, 8, 40)):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    omegas = tuple(ComplexFrequency.from_hz(f) for f in (1e5, 2e5, 3e5)[:shape[0]])
    return FrequencyData(omegas, tuple(range(shape[1])), vals)


def test_noise_level_and_determinism():
    d = _data(shape=(3, 36, 360))
    a = add_white_noise(d, 20.0, 7)
    b = add_white_noise(d, 20.0, 7)
    assert np.array_equal(a.values, b.values)
    assert abs(measured_snr_db(d.values, a.values) - 20.0) <= 0.5
    c = add_white_noise(d, 20.0, 8)
    assert not np.array_equal(a.values, c.values)


def test_noise_infinite_snr_is_identity():
    d = _data()
    assert add_white_noise(d, math.inf, 1) is d


def test_noise_rejects_bad_input():
    with pytest.raises(DomainError):
        add_white_noise(np.zeros(0, dtype=complex), 20, 0)
    with pytest.raises(DomainError):
        add_white_noise(_data(), math.nan, 0)
