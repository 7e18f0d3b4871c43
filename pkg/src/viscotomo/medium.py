"""Gridded media, synthetic phantoms, parametrizations and model-error scoring."""

from __future__ import annotations

import enum
import io
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import attenuation as att
from .attenuation import ComplexFrequency
from .errors import DomainError

__all__ = [
    "MediumGrid",
    "Parametrization",
    "Region",
    "Disk",
    "Ellipse",
    "Annulus",
    "Rect",
    "Layer",
    "PhantomSpec",
    "TISSUES",
    "build_phantom",
    "breast_phantom_spec",
    "reparametrize",
    "relative_model_error",
    "rms_model_error",
    "write_grid",
    "read_grid",
    "grid_bytes",
]


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MediumGrid:
    """Collocated node grid of bulk modulus, density and attenuation coefficients.

    Arrays have shape ``(nx, nz)``; node ``(i, j)`` sits at ``x = i*dx``,
    ``z = j*dz``.  All arrays are stored read-only.
    """

    nx: int
    nz: int
    dx: float
    dz: float
    kappa0: np.ndarray
    rho: np.ndarray
    atten_kind: str = "none"
    atten_coeffs: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.nx < 3 or self.nz < 3:
            raise DomainError(f"grid needs at least 3x3 nodes, got {self.nx}x{self.nz}")
        if not (self.dx > 0 and self.dz > 0):
            raise DomainError("grid spacing must be > 0")
        shape = (self.nx, self.nz)
        kind = att.model_kind(self.atten_kind)
        object.__setattr__(self, "atten_kind", kind)
        k0 = _frozen(np.broadcast_to(self.kappa0, shape))
        rho = _frozen(np.broadcast_to(self.rho, shape))
        if np.any(~(k0 > 0)):
            i = np.argwhere(~(k0 > 0))[0]
            raise DomainError(f"kappa0 must be > 0 (node {tuple(i)})")
        if np.any(~(rho > 0)):
            i = np.argwhere(~(rho > 0))[0]
            raise DomainError(f"rho must be > 0 (node {tuple(i)})")
        coeffs = {k: _frozen(np.broadcast_to(v, shape)) for k, v in self.atten_coeffs.items()}
        names = att.coefficient_names(kind, coeffs)
        extra = set(coeffs) - set(names)
        if extra:
            raise DomainError(f"unexpected coefficients {sorted(extra)} for model {kind}")
        att.check_coefficients(kind, coeffs)
        object.__setattr__(self, "kappa0", k0)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "atten_coeffs", {n: coeffs[n] for n in names})

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.nz)

    @property
    def size(self) -> int:
        return self.nx * self.nz

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.nx) * self.dx

    @property
    def z(self) -> np.ndarray:
        return np.arange(self.nz) * self.dz

    @property
    def extent(self) -> tuple[float, float]:
        return ((self.nx - 1) * self.dx, (self.nz - 1) * self.dz)

    def speed(self) -> np.ndarray:
        return np.sqrt(self.kappa0 / self.rho)

    def kappa_dagger(self, omega) -> np.ndarray:
        return att.bulk_modulus(self.atten_kind, self.kappa0, self.atten_coeffs, omega, check=False)

    def dkappa_dagger(self, omega) -> np.ndarray:
        return att.bulk_modulus_dkappa0(self.atten_kind, self.kappa0, self.atten_coeffs, omega)

    def quality_factor(self, omega) -> np.ndarray:
        kd = self.kappa_dagger(omega)
        with np.errstate(divide="ignore"):
            return np.where(kd.imag == 0, np.inf, kd.real / -kd.imag)

    def replace(self, **changes) -> "MediumGrid":
        kw = dict(nx=self.nx, nz=self.nz, dx=self.dx, dz=self.dz, kappa0=self.kappa0,
                  rho=self.rho, atten_kind=self.atten_kind, atten_coeffs=self.atten_coeffs)
        kw.update(changes)
        return MediumGrid(**kw)

    def fields(self) -> dict[str, np.ndarray]:
        out = {"kappa0": self.kappa0, "rho": self.rho}
        out.update(self.atten_coeffs)
        return out

    def same_as(self, other: "MediumGrid") -> bool:
        """Bitwise equality of geometry and every field."""
        if (self.nx, self.nz, self.dx, self.dz, self.atten_kind) != (
                other.nx, other.nz, other.dx, other.dz, other.atten_kind):
            return False
        a, b = self.fields(), other.fields()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

    @classmethod
    def homogeneous(cls, nx, nz, dx, dz, c0, rho,
                    atten: att.AttenuationSpec | None = None) -> "MediumGrid":
        atten = atten or att.NoAttenuation()
        shape = (nx, nz)
        return cls(nx, nz, dx, dz, np.full(shape, rho * c0 * c0), np.full(shape, float(rho)),
                   atten.kind, {k: np.full(shape, v) for k, v in atten.coefficients().items()})


# ---------------------------------------------------------------------------
# Parametrizations
# ---------------------------------------------------------------------------

class Parametrization(enum.Enum):
    """Pairs of physical fields usable as optimisation variables."""

    KAPPA_RHO = ("kappa0", "rho")
    IMPEDANCE_RHO = ("impedance", "rho")
    SPEED_RHO = ("speed", "rho")
    IMPEDANCE_SPEED = ("impedance", "speed")

    @property
    def names(self) -> tuple[str, str]:
        return self.value

    @classmethod
    def parse(cls, text) -> "Parametrization":
        if isinstance(text, cls):
            return text
        key = str(text).strip().upper().replace("-", "_").replace(" ", "_")
        aliases = {"KAPPARHO": "KAPPA_RHO", "IMPEDANCERHO": "IMPEDANCE_RHO",
                   "SPEEDRHO": "SPEED_RHO", "IMPEDANCESPEED": "IMPEDANCE_SPEED"}
        key = aliases.get(key, key)
        try:
            return cls[key]
        except KeyError:
            raise DomainError(f"unknown parametrization {text!r}") from None


def _check_positive(name, arr):
    bad = ~(np.asarray(arr) > 0)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0]) if np.ndim(arr) else ()
        raise DomainError(f"{name} must be > 0 (node {idx})")


def _all_quantities(a, b, frm: Parametrization) -> dict:
    if frm is Parametrization.KAPPA_RHO:
        k, r = a, b
        return {"kappa0": k, "rho": r, "impedance": np.sqrt(k * r), "speed": np.sqrt(k / r)}
    if frm is Parametrization.IMPEDANCE_RHO:
        i, r = a, b
        return {"kappa0": i * i / r, "rho": r, "impedance": i, "speed": i / r}
    if frm is Parametrization.SPEED_RHO:
        c, r = a, b
        return {"kappa0": r * c * c, "rho": r, "impedance": r * c, "speed": c}
    i, c = a, b
    return {"kappa0": i * c, "rho": i / c, "impedance": i, "speed": c}


def reparametrize(fields, frm, to):
    """Convert a pair of positive node arrays between parametrizations."""
    frm, to = Parametrization.parse(frm), Parametrization.parse(to)
    a, b = (np.asarray(f, dtype=float) for f in fields)
    _check_positive(frm.names[0], a)
    _check_positive(frm.names[1], b)
    if frm is to:
        return a, b
    q = _all_quantities(a, b, frm)
    return q[to.names[0]], q[to.names[1]]


# ---------------------------------------------------------------------------
# Model error
# ---------------------------------------------------------------------------

def relative_model_error(c_true, c_rec) -> float:
    """Unnormalised l2 norm over nodes of ``(c_true - c_rec) / c_true``."""
    ct = np.asarray(c_true, dtype=float)
    cr = np.asarray(c_rec, dtype=float)
    if ct.shape != cr.shape:
        raise DomainError(f"shape mismatch {ct.shape} vs {cr.shape}")
    _check_positive("c_true", ct)
    return float(np.linalg.norm(((ct - cr) / ct).ravel()))


def rms_model_error(c_true, c_rec) -> float:
    """Root-mean-square variant of :func:`relative_model_error`."""
    n = np.asarray(c_true).size
    return relative_model_error(c_true, c_rec) / math.sqrt(n)


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------

class Region:
    def mask(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def inside_box(self, width: float, height: float) -> bool:
        raise NotImplementedError


@dataclass(frozen=True)
class Ellipse(Region):
    cx: float
    cz: float
    ax: float
    az: float

    def mask(self, x, z):
        return ((x - self.cx) / self.ax) ** 2 + ((z - self.cz) / self.az) ** 2 <= 1.0

    def inside_box(self, width, height):
        return (self.ax > 0 and self.az > 0 and self.cx - self.ax >= 0 and self.cx + self.ax <= width
                and self.cz - self.az >= 0 and self.cz + self.az <= height)


def Disk(cx: float, cz: float, r: float) -> Ellipse:
    return Ellipse(cx, cz, r, r)


@dataclass(frozen=True)
class Annulus(Region):
    cx: float
    cz: float
    r_inner: float
    r_outer: float

    def mask(self, x, z):
        r = np.hypot(x - self.cx, z - self.cz)
        return (r >= self.r_inner) & (r <= self.r_outer)

    def inside_box(self, width, height):
        return (0 <= self.r_inner < self.r_outer and self.cx - self.r_outer >= 0
                and self.cx + self.r_outer <= width and self.cz - self.r_outer >= 0
                and self.cz + self.r_outer <= height)


@dataclass(frozen=True)
class Rect(Region):
    x0: float
    x1: float
    z0: float
    z1: float

    def mask(self, x, z):
        return (x >= self.x0) & (x <= self.x1) & (z >= self.z0) & (z <= self.z1)

    def inside_box(self, width, height):
        return 0 <= self.x0 < self.x1 <= width and 0 <= self.z0 < self.z1 <= height


@dataclass(frozen=True)
class Layer:
    """Region painted with tissue values; ``*_spread`` set the half-width of
    the uniform random draw around the nominal value."""

    region: Region
    c0: float
    rho: float
    q: float
    name: str = ""
    c0_spread: float = 0.0
    rho_spread: float = 0.0


# (wave speed interval, density interval, Q interval at 300 kHz)
TISSUES = {
    "water": ((1490.0, 1490.0), (1000.0, 1000.0), (800.0, 800.0)),
    "skin": ((1590.0, 1610.0), (1100.0, 1120.0), (100.0, 120.0)),
    "blood": ((1565.0, 1575.0), (1090.0, 1110.0), (290.0, 310.0)),
    "fat": ((1440.0, 1460.0), (920.0, 940.0), (410.0, 430.0)),
    "glandular": ((1490.0, 1520.0), (1030.0, 1050.0), (280.0, 300.0)),
    "inclusion": ((1550.0, 1550.0), (1050.0, 1050.0), (350.0, 350.0)),
}


def tissue_layer(name: str, region: Region, perturb: bool = False) -> Layer:
    (c_lo, c_hi), (r_lo, r_hi), (q_lo, q_hi) = TISSUES[name]
    return Layer(region, 0.5 * (c_lo + c_hi), 0.5 * (r_lo + r_hi), 0.5 * (q_lo + q_hi), name,
                 0.5 * (c_hi - c_lo) if perturb else 0.0, 0.5 * (r_hi - r_lo) if perturb else 0.0)


@dataclass(frozen=True)
class PhantomSpec:
    """Layered phantom: background, layers painted in order, then the inclusion."""

    width: float
    height: float
    spacing: float
    background: tuple = (1490.0, 1000.0, 800.0)
    layers: Sequence[Layer] = ()
    inclusion: Layer | None = None
    seed: int = 0

    def validate(self) -> None:
        if not (self.width > 0 and self.height > 0 and self.spacing > 0):
            raise DomainError("phantom width, height and spacing must be > 0")
        for lay in list(self.layers) + ([self.inclusion] if self.inclusion else []):
            if not (lay.c0 - lay.c0_spread > 0 and lay.rho - lay.rho_spread > 0 and lay.q > 0):
                raise DomainError(f"layer {lay.name or lay.region} has non-positive values")
        if self.inclusion is not None and not self.inclusion.region.inside_box(self.width, self.height):
            raise DomainError("inclusion must lie inside the domain")
        c, r, q = self.background
        if not (c > 0 and r > 0 and q > 0):
            raise DomainError("background values must be > 0")

    def regions(self) -> list[Layer]:
        bg = Layer(Rect(0, self.width, 0, self.height), *self.background, name="background")
        return [bg] + list(self.layers) + ([self.inclusion] if self.inclusion else [])


def _default_fixed(kind: str) -> dict:
    """Coefficients held fixed while calibrating multi-coefficient laws."""
    return {
        "zener": {"tau_sig": 5e-9},
        "cole_cole": {"tau_sig": 5e-9, "beta": 0.8},
        "ksb": {"tau": 4.0, "beta": 0.5},
        "szabo": {"beta": 0.5},
    }.get(kind, {})


def region_index(spec: PhantomSpec, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Index into ``spec.regions()`` of the region owning each node."""
    idx = np.zeros(np.broadcast(x, z).shape, dtype=int)
    for k, lay in enumerate(spec.regions()[1:], start=1):
        idx[lay.region.mask(x, z)] = k
    return idx


def build_phantom(spec: PhantomSpec, kind="kolsky_futterman",
                  omega_ref: ComplexFrequency | None = None,
                  fixed: Mapping | None = None) -> MediumGrid:
    """Rasterise ``spec`` onto a node grid and calibrate attenuation per region.

    Wave speed and density are drawn uniformly within each layer's spread
    (seeded); the quality factor is constant per region so every node
    reproduces its region's Q at ``omega_ref``.
    """
    spec.validate()
    kind = att.model_kind(kind)
    omega_ref = omega_ref or ComplexFrequency.from_hz(att.REFERENCE_FREQUENCY_HZ)
    nx = int(round(spec.width / spec.spacing)) + 1
    nz = int(round(spec.height / spec.spacing)) + 1
    X, Z = np.meshgrid(np.arange(nx) * spec.spacing, np.arange(nz) * spec.spacing, indexing="ij")
    owner = region_index(spec, X, Z)
    regions = spec.regions()
    rng = np.random.default_rng(spec.seed)
    c0 = np.empty((nx, nz))
    rho = np.empty((nx, nz))
    q = np.empty((nx, nz))
    for k, lay in enumerate(regions):
        m = owner == k
        n = int(m.sum())
        # draw for every region in a fixed order so the stream is layout independent
        uc = rng.uniform(-1.0, 1.0, n)
        ur = rng.uniform(-1.0, 1.0, n)
        c0[m] = lay.c0 + lay.c0_spread * uc
        rho[m] = lay.rho + lay.rho_spread * ur
        q[m] = lay.q
    kappa0 = rho * c0 * c0
    if kind == "none":
        coeffs = {}
    else:
        fx = dict(_default_fixed(kind))
        fx.update(fixed or {})
        coeffs = {}
        if kind == "maxwell":
            coeffs = att.calibrate_coefficients(kind, kappa0, q, omega_ref, fx)
        else:
            # Q of the remaining laws does not depend on kappa0: calibrate per region
            uq, inv = np.unique(q, return_inverse=True)
            sol = att.calibrate_coefficients(kind, 1.0, uq, omega_ref, fx)
            coeffs = {k: np.asarray(v)[inv].reshape(q.shape) for k, v in sol.items()}
    return MediumGrid(nx, nz, spec.spacing, spec.spacing, kappa0, rho, kind, coeffs)


def breast_phantom_spec(size: float = 0.18, spacing: float = 5e-4, perturb: bool = False,
                        seed: int = 0, inclusion: bool = True) -> PhantomSpec:
    """Breast-like cross-section in water: skin ring, fat, glandular lobes, a
    vessel and an elliptic inclusion, scaled to a ``size`` x ``size`` domain."""
    s = size / 0.18
    cx = cz = size / 2
    layers = [
        tissue_layer("skin", Annulus(cx, cz, 0.068 * s, 0.072 * s), perturb),
        tissue_layer("fat", Disk(cx, cz, 0.068 * s), perturb),
        tissue_layer("glandular", Ellipse(cx - 0.012 * s, cz + 0.008 * s, 0.040 * s, 0.030 * s), perturb),
        tissue_layer("glandular", Ellipse(cx + 0.030 * s, cz - 0.020 * s, 0.018 * s, 0.024 * s), perturb),
        tissue_layer("blood", Ellipse(cx - 0.040 * s, cz - 0.030 * s, 0.006 * s, 0.012 * s), perturb),
    ]
    inc = tissue_layer("inclusion", Ellipse(cx + 0.015 * s, cz + 0.010 * s, 0.012 * s, 0.008 * s)) if inclusion else None
    bg = tuple(0.5 * (lo + hi) for lo, hi in TISSUES["water"])
    return PhantomSpec(size, size, spacing, bg, tuple(layers), inc, seed)


# ---------------------------------------------------------------------------
# VAGRID01 binary format
# ---------------------------------------------------------------------------

MAGIC = b"VAGRID01"


def grid_bytes(grid: MediumGrid) -> bytes:
    """Serialise ``grid``: header, length-prefixed field names, then f64 data."""
    fields = grid.fields()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIddBI", grid.nx, grid.nz, grid.dx, grid.dz,
                          att.MODEL_TAGS[grid.atten_kind], len(fields)))
    for name in fields:
        raw = name.encode("ascii")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    for arr in fields.values():
        # (nx, nz) C order is row-major with z varying fastest
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temporary sibling file and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_grid(path, grid: MediumGrid) -> None:
    atomic_write(path, grid_bytes(grid))


def read_grid(path) -> MediumGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise DomainError(f"{path}: not a VAGRID01 file")
    off = 8
    nx, nz, dx, dz, tag, nfields = struct.unpack_from("<IIddBI", data, off)
    off += struct.calcsize("<IIddBI")
    names = []
    for _ in range(nfields):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        names.append(data[off:off + n].decode("ascii"))
        off += n
    count = nx * nz
    arrays = {}
    for name in names:
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(nx, nz).astype(float)
        off += 8 * count
    if off != len(data):
        raise DomainError(f"{path}: trailing or missing bytes")
    kappa0 = arrays.pop("kappa0")
    rho = arrays.pop("rho")
    return MediumGrid(nx, nz, dx, dz, kappa0, rho, att.model_kind(tag), arrays)
