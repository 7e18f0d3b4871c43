"""Source wavelets, the discrete Laplace-Fourier transform and data noise."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attenuation import ComplexFrequency
from .errors import DomainError

__all__ = ["TimeSignal", "RickerSpec", "ricker", "laplace_fourier", "add_white_noise", "measured_snr_db"]


@dataclass(frozen=True)
class TimeSignal:
    dt: float
    samples: np.ndarray

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError("dt must be > 0")
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1 or s.size < 1:
            raise DomainError("a time signal needs at least one sample")
        object.__setattr__(self, "samples", s)

    @property
    def nt(self) -> int:
        return self.samples.size

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.nt) * self.dt


@dataclass(frozen=True)
class RickerSpec:
    peak_frequency: float
    delay: float = 0.0

    def __post_init__(self):
        if not self.peak_frequency > 0:
            raise DomainError("peak frequency must be > 0")
        if not self.delay >= 0:
            raise DomainError("delay must be >= 0")


def ricker(spec: RickerSpec, nt: int, dt: float) -> TimeSignal:
    """Ricker wavelet ``(1 - 2 a) exp(-a)``, ``a = (pi f (t - t0))**2``, sampled at ``k*dt``."""
    if nt < 2:
        raise DomainError("ricker needs nt >= 2")
    t = np.arange(nt) * dt - spec.delay
    a = (math.pi * spec.peak_frequency * t) ** 2
    return TimeSignal(dt, (1.0 - 2.0 * a) * np.exp(-a))


def laplace_fourier(signal: TimeSignal, omega) -> complex:
    """``sum_k S_k exp(i omega k dt)`` for a (possibly complex) frequency.

    With ``omega_i > 0`` late samples are damped by ``exp(-omega_i t)``.
    """
    w = omega.value if isinstance(omega, ComplexFrequency) else complex(omega)
    t = signal.times
    return complex(np.sum(signal.samples * np.exp(1j * w * t)))


def measured_snr_db(clean, noisy) -> float:
    clean = np.asarray(clean)
    noise = np.asarray(noisy) - clean
    return 10.0 * math.log10(np.sum(np.abs(clean) ** 2) / np.sum(np.abs(noise) ** 2))


def add_white_noise(data, snr_db: float, seed: int):
    """Add circular complex Gaussian noise at a global signal-to-noise ratio.

    ``data`` is a :class:`~viscotomo.solver.FrequencyData` (or a complex
    array); the noise variance is set from the mean power over the whole
    data set.  ``snr_db = inf`` returns the input unchanged.
    """
    values = data.values if hasattr(data, "values") else np.asarray(data)
    if values.size == 0:
        raise DomainError("cannot add noise to an empty data set")
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise DomainError(f"snr_db must be finite or +inf, got {snr_db!r}")
    if snr_db == math.inf:
        return data
    power = float(np.mean(np.abs(values) ** 2))
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0) / 2.0)
    rng = np.random.default_rng(seed)
    noise = sigma * (rng.standard_normal(values.shape) + 1j * rng.standard_normal(values.shape))
    noisy = values + noise
    if hasattr(data, "with_values"):
        return data.with_values(noisy)
    return noisy
