"""Visco-acoustic attenuation laws expressed as complex bulk moduli.

Every model maps a real bulk modulus ``kappa0`` (Pa) and a handful of real
coefficients to a complex modulus ``kappa_dagger`` whose imaginary part is
non-positive (time convention ``exp(-i omega t)``).  The per-model formulas
are evaluated at the real part ``omega_r`` of the frequency; only the
multi-mechanism ``Generalized`` law uses the full complex frequency.

Two layers are exposed:

* the frozen dataclasses (``KelvinVoigt(tau_eps=4.5e-9)`` ...) holding scalar
  coefficients, used by :func:`evaluate_bulk_modulus` and friends;
* vectorised kernels keyed by model tag (:func:`bulk_modulus`,
  :func:`bulk_modulus_dkappa0`, :func:`calibrate_coefficients`) that operate
  on per-node coefficient arrays and back the solver and the phantom builder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, ClassVar, Iterable, Mapping

import numpy as np

from .errors import CalibrationError, ConstraintViolation, DomainError, ValidityError

__all__ = [
    "ComplexFrequency",
    "AttenuationSpec",
    "NoAttenuation",
    "KolskyFutterman",
    "ColeCole",
    "Zener",
    "KelvinVoigt",
    "Maxwell",
    "KSB",
    "Szabo",
    "Generalized",
    "MODEL_TAGS",
    "ATTENUATING_KINDS",
    "Validity",
    "evaluate_bulk_modulus",
    "quality_factor",
    "complex_wave_speed",
    "validate_attenuation",
    "calibrate_to_quality",
    "calibrate_coefficients",
    "dispersion_table",
    "bulk_modulus",
    "bulk_modulus_dkappa0",
    "check_coefficients",
    "coefficient_names",
    "spec_from_coefficients",
    "model_kind",
    "REFERENCE_FREQUENCY_HZ",
    "REFERENCE_Q118",
]

REFERENCE_FREQUENCY_HZ = 300e3


@dataclass(frozen=True)
class ComplexFrequency:
    """Laplace-Fourier frequency ``omega_r + i*omega_i``.

    ``omega_r`` is an angular frequency in rad/s and ``omega_i`` a damping
    rate in 1/s.
    """

    omega_r: float
    omega_i: float = 0.0

    def __post_init__(self):
        if not (self.omega_r > 0):
            raise DomainError(f"omega_r must be > 0, got {self.omega_r!r}")
        if not (self.omega_i >= 0):
            raise DomainError(f"omega_i must be >= 0, got {self.omega_i!r}")

    @classmethod
    def from_hz(cls, freq_hz: float, omega_i: float = 0.0) -> "ComplexFrequency":
        return cls(2.0 * math.pi * freq_hz, omega_i)

    @property
    def value(self) -> complex:
        return complex(self.omega_r, self.omega_i)

    @property
    def freq_hz(self) -> float:
        return self.omega_r / (2.0 * math.pi)

    def __complex__(self) -> complex:
        return self.value


def _as_complex_omega(omega):
    if isinstance(omega, ComplexFrequency):
        return omega.value
    if np.ndim(omega):
        return np.asarray(omega, dtype=complex)
    return complex(omega)


# ---------------------------------------------------------------------------
# Vectorised kernels
# ---------------------------------------------------------------------------

def _kf(k0, c, w):
    return k0 - 1j * k0 / c["eta_q"]


def _cole_cole(k0, c, w):
    wr = w.real
    beta = c["beta"]
    num = 1.0 + np.power(-1j * wr * c["tau_eps"] + 0j, beta)
    den = 1.0 + np.power(-1j * wr * c["tau_sig"] + 0j, beta)
    return k0 * num / den


def _zener(k0, c, w):
    wr = w.real
    return k0 * (1.0 - 1j * wr * c["tau_eps"]) / (1.0 - 1j * wr * c["tau_sig"])


def _kelvin_voigt(k0, c, w):
    return k0 - 1j * w.real * k0 * c["tau_eps"]


def _maxwell(k0, c, w):
    a = -1j * w.real * c["eta"]
    return a * k0 / (k0 + a)


def _ksb(k0, c, w):
    inner = np.sqrt(1.0 + np.power(-1j * w.real * c["tau"] + 0j, c["beta"]))
    return k0 / (1.0 + c["eta_q"] / inner) ** 2


def _szabo(k0, c, w):
    # tau**beta * (-i w)**(beta - 1), written as tau * (-i w tau)**(beta - 1)
    tau, beta = c["tau"], c["beta"]
    return k0 / (1.0 + tau * np.power(-1j * w.real * tau + 0j, beta - 1.0))


def _generalized(k0, c, w):
    total = 0.0
    for l in range(_n_mechanisms(c)):
        wl = c[f"omega_{l + 1}"]
        total = total + c[f"b_{l + 1}"] * wl / (wl - 1j * w)
    return k0 * (1.0 - total)


def _n_mechanisms(coeffs: Mapping) -> int:
    n = 0
    while f"omega_{n + 1}" in coeffs:
        n += 1
    return n


def _none(k0, c, w):
    return np.asarray(k0) + 0j


# condition checks return a message when violated
def _chk(ok, msg):
    return None if np.all(ok) else msg


def _cond_kf(c):
    return _chk(c["eta_q"] > 0, "Kolsky-Futterman requires eta_q > 0")


def _cond_cc(c):
    return (_chk(c["tau_eps"] >= c["tau_sig"], "Cole-Cole requires tau_eps >= tau_sig")
            or _chk(c["tau_sig"] >= 0, "Cole-Cole requires tau_sig >= 0")
            or _chk((c["beta"] >= 0) & (c["beta"] <= 1), "Cole-Cole requires 0 <= beta <= 1"))


def _cond_zener(c):
    return (_chk(c["tau_eps"] >= c["tau_sig"], "Zener requires tau_eps >= tau_sig")
            or _chk(c["tau_sig"] >= 0, "Zener requires tau_sig >= 0"))


def _cond_kv(c):
    return _chk(c["tau_eps"] >= 0, "Kelvin-Voigt requires tau_eps >= 0")


def _cond_maxwell(c):
    return _chk(c["eta"] > 0, "Maxwell requires eta > 0")


def _cond_ksb(c):
    return (_chk(c["eta_q"] > 0, "KSB requires eta_q > 0")
            or _chk(c["tau"] > 0, "KSB requires tau > 0")
            or _chk((c["beta"] > 0) & (c["beta"] < 1), "KSB requires 0 < beta < 1"))


def _cond_szabo(c):
    return (_chk(c["tau"] > 0, "Szabo requires tau > 0")
            or _chk((c["beta"] > 0) & (c["beta"] < 1), "Szabo requires 0 < beta < 1"))


def _cond_generalized(c):
    total = 0.0
    for l in range(_n_mechanisms(c)):
        msg = (_chk(c[f"omega_{l + 1}"] > 0, "Generalized requires every omega_l > 0")
               or _chk(c[f"b_{l + 1}"] >= 0, "Generalized requires every B_l >= 0"))
        if msg:
            return msg
        total = total + c[f"b_{l + 1}"]
    return _chk(np.asarray(total) < 1, "Generalized requires sum(B_l) < 1")


@dataclass(frozen=True)
class _Model:
    tag: str
    code: int
    coeffs: tuple
    kernel: Callable
    condition: Callable | None
    linear_in_kappa0: bool = True


_MODELS = {
    m.tag: m
    for m in [
        _Model("none", 0, (), _none, None),
        _Model("kolsky_futterman", 1, ("eta_q",), _kf, _cond_kf),
        _Model("cole_cole", 2, ("tau_eps", "tau_sig", "beta"), _cole_cole, _cond_cc),
        _Model("zener", 3, ("tau_eps", "tau_sig"), _zener, _cond_zener),
        _Model("kelvin_voigt", 4, ("tau_eps",), _kelvin_voigt, _cond_kv),
        _Model("maxwell", 5, ("eta",), _maxwell, _cond_maxwell, linear_in_kappa0=False),
        _Model("ksb", 6, ("eta_q", "tau", "beta"), _ksb, _cond_ksb),
        _Model("szabo", 7, ("tau", "beta"), _szabo, _cond_szabo),
        _Model("generalized", 8, (), _generalized, _cond_generalized),
    ]
}

MODEL_TAGS: dict[str, int] = {tag: m.code for tag, m in _MODELS.items()}
ATTENUATING_KINDS = ("kolsky_futterman", "cole_cole", "zener", "kelvin_voigt",
                     "maxwell", "ksb", "szabo")


def _model(kind: str) -> _Model:
    try:
        return _MODELS[kind]
    except KeyError:
        raise DomainError(f"unknown attenuation model {kind!r}") from None


def model_kind(kind) -> str:
    """Normalise a model tag, spec class or spec instance to its tag string."""
    if isinstance(kind, AttenuationSpec) or (isinstance(kind, type) and issubclass(kind, AttenuationSpec)):
        return kind.kind
    if isinstance(kind, (int, np.integer)):
        for tag, code in MODEL_TAGS.items():
            if code == kind:
                return tag
        raise DomainError(f"unknown attenuation model code {kind}")
    tag = str(kind).strip().lower().replace("-", "_")
    _model(tag)
    return tag


def coefficient_names(kind, coeffs: Mapping | None = None) -> tuple:
    """Coefficient field names of a model (generalized: read from ``coeffs``)."""
    kind = model_kind(kind)
    if kind == "generalized":
        n = _n_mechanisms(coeffs or {})
        return tuple(name for l in range(n) for name in (f"omega_{l + 1}", f"b_{l + 1}"))
    return _model(kind).coeffs


def check_coefficients(kind, coeffs: Mapping) -> None:
    """Raise :class:`ConstraintViolation` if ``coeffs`` breach the model condition."""
    kind = model_kind(kind)
    m = _model(kind)
    missing = [n for n in coefficient_names(kind, coeffs) if n not in coeffs]
    if missing:
        raise ConstraintViolation(f"{kind}: missing coefficients {missing}")
    if m.condition is None:
        return
    arrs = {k: np.asarray(v, dtype=float) for k, v in coeffs.items()}
    for name, arr in arrs.items():
        if not np.all(np.isfinite(arr)):
            raise ConstraintViolation(f"{kind}: coefficient {name} is not finite")
    msg = m.condition(arrs)
    if msg:
        raise ConstraintViolation(msg)


def bulk_modulus(kind, kappa0, coeffs: Mapping, omega, check: bool = True):
    """Complex bulk modulus for (arrays of) real ``kappa0`` and coefficients."""
    kind = model_kind(kind)
    if check:
        check_coefficients(kind, coeffs)
    k0 = np.asarray(kappa0, dtype=float)
    if np.any(k0 <= 0):
        raise DomainError("kappa0 must be > 0")
    c = {k: np.asarray(v, dtype=float) for k, v in coeffs.items()}
    return _model(kind).kernel(k0, c, _as_complex_omega(omega))


def bulk_modulus_dkappa0(kind, kappa0, coeffs: Mapping, omega):
    """Derivative of the complex modulus with respect to ``kappa0`` at fixed coefficients."""
    kind = model_kind(kind)
    k0 = np.asarray(kappa0, dtype=float)
    c = {k: np.asarray(v, dtype=float) for k, v in coeffs.items()}
    w = _as_complex_omega(omega)
    if kind == "maxwell":
        a = -1j * w.real * c["eta"]
        return a * a / (k0 + a) ** 2
    # every other law is kappa0 times a coefficient-only factor
    return _model(kind).kernel(np.ones_like(k0), c, w)


# ---------------------------------------------------------------------------
# Scalar specs
# ---------------------------------------------------------------------------

class AttenuationSpec:
    """Base class of the attenuation-law tagged union."""

    kind: ClassVar[str] = ""

    def coefficients(self) -> dict:
        return {name: float(getattr(self, name)) for name in _model(self.kind).coeffs}

    def validate(self) -> None:
        check_coefficients(self.kind, self.coefficients())


@dataclass(frozen=True)
class NoAttenuation(AttenuationSpec):
    kind: ClassVar[str] = "none"


@dataclass(frozen=True)
class KolskyFutterman(AttenuationSpec):
    """Frequency-independent (simplified) Kolsky-Futterman law; Q equals ``eta_q``."""

    eta_q: float
    kind: ClassVar[str] = "kolsky_futterman"


@dataclass(frozen=True)
class ColeCole(AttenuationSpec):
    tau_eps: float
    tau_sig: float
    beta: float
    kind: ClassVar[str] = "cole_cole"


@dataclass(frozen=True)
class Zener(AttenuationSpec):
    tau_eps: float
    tau_sig: float
    kind: ClassVar[str] = "zener"


@dataclass(frozen=True)
class KelvinVoigt(AttenuationSpec):
    tau_eps: float
    kind: ClassVar[str] = "kelvin_voigt"


@dataclass(frozen=True)
class Maxwell(AttenuationSpec):
    eta: float
    kind: ClassVar[str] = "maxwell"


@dataclass(frozen=True)
class KSB(AttenuationSpec):
    """Kowar-Scherzer-Bonnefond law."""

    eta_q: float
    tau: float
    beta: float
    kind: ClassVar[str] = "ksb"


@dataclass(frozen=True)
class Szabo(AttenuationSpec):
    """Modified Szabo law."""

    tau: float
    beta: float
    kind: ClassVar[str] = "szabo"


@dataclass(frozen=True)
class Generalized(AttenuationSpec):
    """Superposition of relaxation mechanisms ``(omega_l, B_l)`` with constant ``B_l``."""

    mechanisms: tuple = field(default_factory=tuple)
    kind: ClassVar[str] = "generalized"

    def __post_init__(self):
        object.__setattr__(self, "mechanisms",
                           tuple((float(w), float(b)) for w, b in self.mechanisms))

    def coefficients(self) -> dict:
        out = {}
        for l, (w, b) in enumerate(self.mechanisms):
            out[f"omega_{l + 1}"] = w
            out[f"b_{l + 1}"] = b
        return out


_SPEC_CLASSES = {cls.kind: cls for cls in
                 (NoAttenuation, KolskyFutterman, ColeCole, Zener, KelvinVoigt,
                  Maxwell, KSB, Szabo, Generalized)}

# coefficient sets giving Q = 118 at 300 kHz for kappa0 = 2.25 GPa
REFERENCE_Q118: dict[str, AttenuationSpec] = {
    "kolsky_futterman": KolskyFutterman(eta_q=118.0),
    "kelvin_voigt": KelvinVoigt(tau_eps=4.5e-9),
    "maxwell": Maxwell(eta=1.4e5),
    "zener": Zener(tau_eps=90e-9, tau_sig=85.4e-9),
    "cole_cole": ColeCole(tau_eps=90.5e-9, tau_sig=85.5e-9, beta=0.8),
    "ksb": KSB(eta_q=8.75, tau=2e5, beta=0.5),
    "szabo": Szabo(tau=13.28, beta=0.6),
}


def spec_from_coefficients(kind, coeffs: Mapping) -> AttenuationSpec:
    kind = model_kind(kind)
    if kind == "generalized":
        n = _n_mechanisms(coeffs)
        return Generalized(tuple((coeffs[f"omega_{l + 1}"], coeffs[f"b_{l + 1}"]) for l in range(n)))
    cls = _SPEC_CLASSES[kind]
    return cls(**{name: float(coeffs[name]) for name in _model(kind).coeffs})


# ---------------------------------------------------------------------------
# Public scalar operations
# ---------------------------------------------------------------------------

def evaluate_bulk_modulus(spec: AttenuationSpec, kappa0: float, omega) -> complex:
    """Complex bulk modulus of ``spec`` at frequency ``omega``.

    Raises
    ------
    ConstraintViolation
        If the coefficients of ``spec`` breach the model's admissibility condition.
    """
    if not kappa0 > 0:
        raise DomainError(f"kappa0 must be > 0, got {kappa0!r}")
    return complex(bulk_modulus(spec.kind, kappa0, spec.coefficients(), omega))


def _q_from_kappa(kd):
    kd = np.asarray(kd)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(kd.imag == 0, np.inf, kd.real / -kd.imag)
    return q


def quality_factor(spec: AttenuationSpec, kappa0: float, omega) -> float:
    """Ratio ``Re(kappa)/(-Im(kappa))``; ``inf`` for a lossless law."""
    kd = evaluate_bulk_modulus(spec, kappa0, omega)
    if kd.imag > 0:
        raise ValidityError(
            f"Im(kappa_dagger) = {kd.imag:g} > 0: attenuation would amplify the wave")
    return float(_q_from_kappa(kd))


def complex_wave_speed(kappa_dagger, rho):
    """Principal square root of ``kappa_dagger / rho`` (scalar or array)."""
    rho_arr = np.asarray(rho, dtype=float)
    if np.any(rho_arr <= 0):
        raise DomainError("density must be > 0")
    c = np.sqrt(np.asarray(kappa_dagger, dtype=complex) / rho_arr)
    return complex(c) if np.ndim(c) == 0 else c


@dataclass(frozen=True)
class Validity:
    """Outcome of :func:`validate_attenuation`; ``clause`` is 1, 2 or 3 when rejected."""

    valid: bool
    clause: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.valid


def validate_attenuation(c_dagger: complex, omega) -> Validity:
    """Check that a complex speed / frequency pair yields a decaying wave."""
    if isinstance(omega, ComplexFrequency):
        wr, wi = omega.omega_r, omega.omega_i
    else:
        w = complex(omega)
        wr, wi = w.real, w.imag
    c = complex(c_dagger)
    if not (wr > 0 and wi >= 0):
        return Validity(False, 1, f"frequency needs omega_r > 0 and omega_i >= 0 (got {wr:g}, {wi:g})")
    if not c.real > 0:
        return Validity(False, 2, f"Re(c) = {c.real:g} must be > 0")
    if not c.imag <= 0:
        return Validity(False, 3, f"Im(c) = {c.imag:g} must be <= 0")
    return Validity(True)


def validity_mask(c_dagger, omega) -> np.ndarray:
    """Vectorised clauses 2 and 3 of :func:`validate_attenuation` (clause 1 is per frequency)."""
    c = np.asarray(c_dagger)
    return (c.real > 0) & (c.imag <= 0)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

# coefficient solved for by bisection, per model without a closed form
_FREE = {
    "cole_cole": "tau_eps",
    "zener": "tau_eps",
    "ksb": "eta_q",
    "szabo": "tau",
}

_SCAN_POINTS = 481
_BISECT_RTOL = 1e-10


def _search_interval(kind, fixed):
    if kind in ("cole_cole", "zener"):
        ts = np.asarray(fixed["tau_sig"], dtype=float)
        lo = np.where(ts > 0, ts * (1 + 1e-12), 1e-18)
        hi = np.maximum(ts, 1e-12) * 1e12
        return lo, hi
    if kind == "ksb":
        return np.asarray(1e-8), np.asarray(1e12)
    return np.asarray(1e-15), np.asarray(1e15)


def calibrate_coefficients(kind, kappa0, target_q, omega_ref, fixed: Mapping | None = None) -> dict:
    """Vectorised calibration: coefficient arrays giving ``target_q`` at ``omega_ref``.

    ``kappa0`` and ``target_q`` broadcast against each other; ``fixed`` holds
    every coefficient except the free one.
    """
    kind = model_kind(kind)
    fixed = dict(fixed or {})
    k0 = np.asarray(kappa0, dtype=float)
    q = np.asarray(target_q, dtype=float)
    if np.any(q <= 0) or not np.all(np.isfinite(q)):
        raise DomainError("target quality factor must be finite and > 0")
    k0, q = np.broadcast_arrays(k0, q)
    wr = ComplexFrequency(omega_ref.omega_r) if isinstance(omega_ref, ComplexFrequency) else ComplexFrequency(float(np.real(omega_ref)))
    w = wr.omega_r

    if kind == "kolsky_futterman":
        return {"eta_q": q.copy()}
    if kind == "kelvin_voigt":
        return {"tau_eps": 1.0 / (w * q)}
    if kind == "maxwell":
        return {"eta": q * k0 / w}
    if kind not in _FREE:
        raise CalibrationError(f"calibration is not available for model {kind!r}")

    free = _FREE[kind]
    need = [n for n in _model(kind).coeffs if n != free and n not in fixed]
    if need:
        raise CalibrationError(f"{kind}: calibration needs fixed coefficients {need}")
    fx = {k: np.broadcast_to(np.asarray(v, dtype=float), q.shape) for k, v in fixed.items()
          if k in _model(kind).coeffs}
    lo, hi = (np.broadcast_to(a, q.shape) for a in _search_interval(kind, fx))

    def resid(x):
        coeffs = dict(fx)
        coeffs[free] = x
        kd = _model(kind).kernel(k0, {k: np.asarray(v) for k, v in coeffs.items()}, w + 0j)
        with np.errstate(divide="ignore", invalid="ignore"):
            # log-ratio keeps the residual well scaled over decades of Q
            qq = _q_from_kappa(kd)
            out = np.where(qq > 0, np.log(np.abs(qq)) - np.log(q), np.nan)
        return out

    # coarse log-spaced scan for a sign change, then bisection in log space
    t = np.linspace(0.0, 1.0, _SCAN_POINTS)
    llo, lhi = np.log(lo), np.log(hi)
    grid = llo[..., None] + (lhi - llo)[..., None] * t
    vals = np.stack([resid(np.exp(grid[..., i])) for i in range(_SCAN_POINTS)], axis=-1)
    sign = np.sign(vals)
    change = (sign[..., :-1] * sign[..., 1:] <= 0) & np.isfinite(vals[..., :-1]) & np.isfinite(vals[..., 1:])
    found = change.any(axis=-1)
    if not np.all(found):
        bad = np.flatnonzero(~np.ravel(found))[0]
        raise CalibrationError(
            f"{kind}: no {free} in the searched interval [{np.ravel(lo)[bad]:.3e}, {np.ravel(hi)[bad]:.3e}] "
            f"gives Q = {np.ravel(q)[bad]:g} at {w / (2 * math.pi):.6g} Hz")
    first = change.argmax(axis=-1)
    a = np.take_along_axis(grid, first[..., None], axis=-1)[..., 0]
    b = np.take_along_axis(grid, first[..., None] + 1, axis=-1)[..., 0]
    fa = np.take_along_axis(vals, first[..., None], axis=-1)[..., 0]
    while np.max(b - a) > _BISECT_RTOL:
        m = 0.5 * (a + b)
        fm = resid(np.exp(m))
        left = np.sign(fm) == np.sign(fa)
        a = np.where(left, m, a)
        fa = np.where(left, fm, fa)
        b = np.where(left, b, m)
    out = {k: np.array(v, copy=True) for k, v in fx.items()}
    out[free] = np.exp(0.5 * (a + b))
    return out


def calibrate_to_quality(kind, kappa0: float, target_q: float, omega_ref,
                         fixed: Mapping | None = None) -> AttenuationSpec:
    """Spec of model ``kind`` whose quality factor at ``omega_ref`` is ``target_q``.

    Closed forms are used for Kolsky-Futterman, Kelvin-Voigt and Maxwell.  For
    Cole-Cole and Zener ``tau_eps`` is solved for (``tau_sig`` and ``beta``
    fixed), for KSB ``eta_q`` and for Szabo ``tau``.
    """
    kind = model_kind(kind)
    if not target_q > 0:
        raise DomainError(f"target quality factor must be > 0, got {target_q!r}")
    coeffs = calibrate_coefficients(kind, kappa0, target_q, omega_ref, fixed)
    return spec_from_coefficients(kind, {k: float(v) for k, v in coeffs.items()})


def dispersion_table(spec: AttenuationSpec, kappa0: float, rho: float,
                     freqs: Iterable[float]) -> list[tuple[float, float]]:
    """Rows ``(frequency_hz, Q)`` for real frequencies ``freqs``."""
    if not rho > 0:
        raise DomainError("density must be > 0")
    rows = []
    for f in freqs:
        if not f > 0:
            raise DomainError(f"frequencies must be > 0, got {f!r}")
        rows.append((float(f), quality_factor(spec, kappa0, ComplexFrequency.from_hz(f))))
    return rows
