"""Two-dimensional complex-frequency Helmholtz solver.

The pressure equation obtained by eliminating the particle velocity,

    div(rho^-1 grad p) + (omega^2 / kappa_dagger) p = i omega g,

is discretised with a node-centred finite-volume 5-point stencil: every node
owns a control cell (halved on the boundary), face coefficients use
``2 / (rho_a + rho_b)`` and the rows are scaled by the cell area so that the
matrix is complex symmetric.  Absorbing sides add the Robin flux
``rho^-1 dp/dn = i omega / (rho c_dagger) p``; wall sides add nothing
(zero normal derivative).
"""

from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .attenuation import ComplexFrequency
from .errors import ContractError, DomainError, FactorizationError, ValidityError
from .medium import MediumGrid

__all__ = [
    "PointSource",
    "ArraySource",
    "Acquisition",
    "Boundary",
    "BoundarySpec",
    "HelmholtzSystem",
    "FrequencyData",
    "assemble_system",
    "factorize",
    "solve",
    "solve_adjoint",
    "forward_map",
    "simulate",
    "source_matrix",
    "receiver_matrix",
    "analytic_green_2d",
    "hankel1_0",
    "HANKEL_CROSSOVER",
]


# ---------------------------------------------------------------------------
# Acquisition and boundaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointSource:
    id: int
    x: float
    z: float

    @property
    def points(self) -> tuple:
        return ((self.x, self.z),)


@dataclass(frozen=True)
class ArraySource:
    """Point sources excited simultaneously (e.g. a transducer)."""

    id: int
    points: tuple

    def __post_init__(self):
        pts = tuple((float(x), float(z)) for x, z in self.points)
        if not pts:
            raise DomainError("an array source needs at least one point")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class Acquisition:
    sources: tuple
    receivers: np.ndarray

    def __post_init__(self):
        srcs = tuple(self.sources)
        rcv = np.asarray(self.receivers, dtype=float).reshape(-1, 2)
        if not srcs:
            raise DomainError("acquisition needs at least one source")
        if rcv.shape[0] == 0:
            raise DomainError("acquisition needs at least one receiver")
        ids = [s.id for s in srcs]
        if len(set(ids)) != len(ids):
            raise DomainError("source ids must be unique")
        rcv.setflags(write=False)
        object.__setattr__(self, "sources", srcs)
        object.__setattr__(self, "receivers", rcv)

    @property
    def source_ids(self) -> tuple:
        return tuple(s.id for s in self.sources)

    @property
    def n_receivers(self) -> int:
        return self.receivers.shape[0]

    def check_inside(self, medium: MediumGrid) -> None:
        w, h = medium.extent
        eps = 1e-9 * max(w, h)
        pts = [p for s in self.sources for p in s.points] + [tuple(r) for r in self.receivers]
        for x, z in pts:
            if not (-eps <= x <= w + eps and -eps <= z <= h + eps):
                raise DomainError(f"position ({x:g}, {z:g}) lies outside the {w:g} x {h:g} domain")

    @classmethod
    def ring(cls, center, radius, n_sources, n_receivers, start_angle=0.0) -> "Acquisition":
        """Sources and receivers evenly spaced on one circle."""
        cx, cz = center
        ts = start_angle + 2 * math.pi * np.arange(n_sources) / n_sources
        tr = start_angle + 2 * math.pi * np.arange(n_receivers) / n_receivers
        sources = tuple(PointSource(i, cx + radius * math.cos(t), cz + radius * math.sin(t))
                        for i, t in enumerate(ts))
        receivers = np.column_stack([cx + radius * np.cos(tr), cz + radius * np.sin(tr)])
        return cls(sources, receivers)


class Boundary(str, enum.Enum):
    ABSORBING = "absorbing"
    WALL = "wall"


@dataclass(frozen=True)
class BoundarySpec:
    """Condition per side: left ``x=0``, right ``x=max``, top ``z=0``, bottom ``z=max``."""

    left: Boundary = Boundary.ABSORBING
    right: Boundary = Boundary.ABSORBING
    top: Boundary = Boundary.ABSORBING
    bottom: Boundary = Boundary.ABSORBING

    def __post_init__(self):
        for side in ("left", "right", "top", "bottom"):
            object.__setattr__(self, side, Boundary(getattr(self, side)))

    @classmethod
    def all(cls, kind) -> "BoundarySpec":
        return cls(kind, kind, kind, kind)

    @classmethod
    def all_absorbing(cls) -> "BoundarySpec":
        return cls.all(Boundary.ABSORBING)

    @classmethod
    def all_wall(cls) -> "BoundarySpec":
        return cls.all(Boundary.WALL)


# ---------------------------------------------------------------------------
# Frequency-domain data
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FrequencyData:
    """Complex receiver values, ``values[w, s, r]`` for frequency ``omegas[w]``,
    source ``source_ids[s]`` and receiver ``r``."""

    omegas: tuple
    source_ids: tuple
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        omegas = tuple(self.omegas)
        sids = tuple(self.source_ids)
        if vals.ndim != 3 or vals.shape[:2] != (len(omegas), len(sids)):
            raise DomainError(f"values shape {vals.shape} does not match "
                              f"{len(omegas)} frequencies x {len(sids)} sources")
        if len(set(omegas)) != len(omegas):
            raise DomainError("duplicate frequencies in data set")
        object.__setattr__(self, "omegas", omegas)
        object.__setattr__(self, "source_ids", sids)
        object.__setattr__(self, "values", vals)

    @property
    def n_receivers(self) -> int:
        return self.values.shape[2]

    @property
    def size(self) -> int:
        return self.values.size

    def at(self, omega: ComplexFrequency) -> "FrequencyData":
        try:
            k = self.omegas.index(omega)
        except ValueError:
            raise DomainError(f"no data at omega = {omega}") from None
        return FrequencyData((omega,), self.source_ids, self.values[k:k + 1])

    def with_values(self, values) -> "FrequencyData":
        return FrequencyData(self.omegas, self.source_ids, values)

    def congruent(self, other: "FrequencyData") -> bool:
        return (self.omegas == other.omegas and self.source_ids == other.source_ids
                and self.values.shape == other.values.shape)

    @classmethod
    def concat(cls, parts: Sequence["FrequencyData"]) -> "FrequencyData":
        parts = list(parts)
        if not parts:
            raise DomainError("nothing to concatenate")
        sids = parts[0].source_ids
        if any(p.source_ids != sids or p.n_receivers != parts[0].n_receivers for p in parts):
            raise DomainError("data sets have different source / receiver layouts")
        return cls(tuple(w for p in parts for w in p.omegas), sids,
                   np.concatenate([p.values for p in parts], axis=0))


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def _cell_widths(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


@dataclass(eq=False)
class HelmholtzSystem:
    """Assembled operator for one ``(medium, omega, boundaries)`` triple.

    ``lu`` is ``None`` until :func:`factorize` has run.
    """

    medium: MediumGrid
    omega: ComplexFrequency
    bcs: BoundarySpec
    matrix: sp.csc_matrix
    kappa_dagger: np.ndarray
    volume: np.ndarray
    robin_length: np.ndarray
    lu: object = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def factorized(self) -> bool:
        return self.lu is not None


def _robin_length(medium: MediumGrid, bcs: BoundarySpec) -> np.ndarray:
    wx = _cell_widths(medium.nx, medium.dx)
    wz = _cell_widths(medium.nz, medium.dz)
    length = np.zeros(medium.shape)
    if bcs.left is Boundary.ABSORBING:
        length[0, :] += wz
    if bcs.right is Boundary.ABSORBING:
        length[-1, :] += wz
    if bcs.top is Boundary.ABSORBING:
        length[:, 0] += wx
    if bcs.bottom is Boundary.ABSORBING:
        length[:, -1] += wx
    return length


def face_geometry(medium: MediumGrid) -> tuple[np.ndarray, np.ndarray]:
    """Face length over node distance for x-faces ``(nx-1, nz)`` and z-faces ``(nx, nz-1)``."""
    wx = _cell_widths(medium.nx, medium.dx)
    wz = _cell_widths(medium.nz, medium.dz)
    gx = np.broadcast_to(wz / medium.dx, (medium.nx - 1, medium.nz))
    gz = np.broadcast_to((wx / medium.dz)[:, None], (medium.nx, medium.nz - 1))
    return gx, gz


def assemble_system(medium: MediumGrid, omega: ComplexFrequency, bcs: BoundarySpec) -> HelmholtzSystem:
    """Assemble the sparse complex operator for ``medium`` at ``omega``.

    Raises
    ------
    ValidityError
        If the complex wave speed at some node violates the decay conditions.
    """
    if not isinstance(omega, ComplexFrequency):
        raise DomainError("omega must be a ComplexFrequency")
    nx, nz = medium.shape
    w = omega.value
    kd = medium.kappa_dagger(omega)
    c = np.sqrt(kd / medium.rho)
    bad = ~((c.real > 0) & (c.imag <= 0))
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        clause = 2 if not c[i, j].real > 0 else 3
        raise ValidityError(f"node ({i}, {j}): complex wave speed {c[i, j]:.6g} "
                            f"violates validity clause {clause}")

    idx = np.arange(nx * nz).reshape(nx, nz)
    volume = np.outer(_cell_widths(nx, medium.dx), _cell_widths(nz, medium.dz))
    gx, gz = face_geometry(medium)
    rho = medium.rho
    cx = gx * 2.0 / (rho[1:, :] + rho[:-1, :])
    cz = gz * 2.0 / (rho[:, 1:] + rho[:, :-1])

    diag = (w * w / kd) * volume
    robin = _robin_length(medium, bcs)
    diag = diag + 1j * w * robin / np.sqrt(rho * kd)
    diag = diag.astype(complex)
    diag[1:, :] -= cx
    diag[:-1, :] -= cx
    diag[:, 1:] -= cz
    diag[:, :-1] -= cz

    a_x, b_x = idx[1:, :].ravel(), idx[:-1, :].ravel()
    a_z, b_z = idx[:, 1:].ravel(), idx[:, :-1].ravel()
    rows = np.concatenate([idx.ravel(), a_x, b_x, a_z, b_z])
    cols = np.concatenate([idx.ravel(), b_x, a_x, b_z, a_z])
    vals = np.concatenate([diag.ravel(), cx.ravel(), cx.ravel(), cz.ravel(), cz.ravel()]).astype(complex)
    mat = sp.csc_matrix((vals, (rows, cols)), shape=(nx * nz, nx * nz))
    return HelmholtzSystem(medium, omega, bcs, mat, kd, volume, robin)


def factorize(system: HelmholtzSystem) -> HelmholtzSystem:
    """Sparse LU (SuperLU, COLAMD ordering); reused by every later solve."""
    if system.factorized:
        raise ContractError("system is already factorized")
    try:
        lu = spla.splu(system.matrix, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise FactorizationError(f"LU factorization failed at omega = {system.omega}: {exc}") from exc
    diag = lu.U.diagonal()
    if not np.all(np.isfinite(diag)) or np.min(np.abs(diag)) == 0.0:
        raise FactorizationError(f"singular pivot at omega = {system.omega}")
    system.lu = lu
    return system


def _threads() -> int:
    env = os.environ.get("VISCOTOMO_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise DomainError(f"VISCOTOMO_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _solve(system: HelmholtzSystem, rhs: np.ndarray, trans: str) -> np.ndarray:
    if not system.factorized:
        raise ContractError("system must be factorized before solving")
    b = np.asarray(rhs, dtype=complex)
    if b.shape[0] != system.n:
        raise DomainError(f"right-hand side has {b.shape[0]} rows, expected {system.n}")
    if b.ndim == 1 or b.shape[1] < 2:
        return system.lu.solve(b, trans=trans)
    nthreads = min(_threads(), b.shape[1])
    if nthreads <= 1:
        return system.lu.solve(b, trans=trans)
    chunks = np.array_split(np.arange(b.shape[1]), nthreads)
    with ThreadPoolExecutor(nthreads) as pool:
        parts = list(pool.map(lambda c: system.lu.solve(np.ascontiguousarray(b[:, c]), trans=trans), chunks))
    return np.concatenate(parts, axis=1)


def solve(system: HelmholtzSystem, rhs) -> np.ndarray:
    """Solve ``A x = rhs`` (one column per right-hand side)."""
    return _solve(system, rhs, "N")


def solve_adjoint(system: HelmholtzSystem, rhs) -> np.ndarray:
    """Solve ``A^H x = rhs`` with the same factorization."""
    return _solve(system, rhs, "H")


# ---------------------------------------------------------------------------
# Sources, receivers and the forward map
# ---------------------------------------------------------------------------

def _nearest(medium: MediumGrid, x: float, z: float) -> int:
    i = int(np.clip(np.rint(x / medium.dx), 0, medium.nx - 1))
    j = int(np.clip(np.rint(z / medium.dz), 0, medium.nz - 1))
    return i * medium.nz + j


def source_matrix(medium: MediumGrid, acq: Acquisition, omega: ComplexFrequency,
                  amplitude: complex = 1.0) -> np.ndarray:
    """Right-hand sides ``(N, n_sources)``: ``i omega amplitude / (dx dz)`` at the
    nearest node, multiplied by that node's cell area."""
    vol = np.outer(_cell_widths(medium.nx, medium.dx), _cell_widths(medium.nz, medium.dz)).ravel()
    scale = 1j * omega.value * amplitude / (medium.dx * medium.dz)
    b = np.zeros((medium.size, len(acq.sources)), dtype=complex)
    for s, src in enumerate(acq.sources):
        for x, z in src.points:
            k = _nearest(medium, x, z)
            b[k, s] += scale * vol[k]
    return b


def receiver_matrix(medium: MediumGrid, receivers: np.ndarray) -> sp.csr_matrix:
    """Bilinear interpolation operator ``(n_receivers, N)``."""
    rcv = np.asarray(receivers, dtype=float).reshape(-1, 2)
    fx = rcv[:, 0] / medium.dx
    fz = rcv[:, 1] / medium.dz
    i = np.clip(np.floor(fx).astype(int), 0, medium.nx - 2)
    j = np.clip(np.floor(fz).astype(int), 0, medium.nz - 2)
    tx = np.clip(fx - i, 0.0, 1.0)
    tz = np.clip(fz - j, 0.0, 1.0)
    nz = medium.nz
    rows = np.repeat(np.arange(rcv.shape[0]), 4)
    cols = np.column_stack([i * nz + j, (i + 1) * nz + j, i * nz + j + 1, (i + 1) * nz + j + 1]).ravel()
    vals = np.column_stack([(1 - tx) * (1 - tz), tx * (1 - tz), (1 - tx) * tz, tx * tz]).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(rcv.shape[0], medium.size))


@dataclass(eq=False)
class Simulation:
    """Factorized system, full fields ``(n_sources, N)`` and receiver data."""

    system: HelmholtzSystem
    fields: np.ndarray
    data: FrequencyData
    receivers: sp.csr_matrix


def simulate(medium: MediumGrid, omega: ComplexFrequency, acq: Acquisition, bcs: BoundarySpec,
             amplitude: complex = 1.0) -> Simulation:
    acq.check_inside(medium)
    system = factorize(assemble_system(medium, omega, bcs))
    u = solve(system, source_matrix(medium, acq, omega, amplitude))
    fields = np.ascontiguousarray(u.T)
    R = receiver_matrix(medium, acq.receivers)
    data = FrequencyData((omega,), acq.source_ids, (R @ u).T[None, :, :])
    return Simulation(system, fields, data, R)


def forward_map(medium: MediumGrid, omega: ComplexFrequency, acq: Acquisition,
                bcs: BoundarySpec, amplitude: complex = 1.0):
    """Receiver data and full pressure fields ``(n_sources, nx, nz)`` at ``omega``."""
    sim = simulate(medium, omega, acq, bcs, amplitude)
    return sim.data, sim.fields.reshape(len(acq.sources), medium.nx, medium.nz)


# ---------------------------------------------------------------------------
# Analytic oracle
# ---------------------------------------------------------------------------

HANKEL_CROSSOVER = 12.0
_EULER_GAMMA = 0.57721566490153286061
_SERIES_TERMS = 64


def _h0_series(z: np.ndarray) -> np.ndarray:
    q = -(z * z) / 4.0
    term = np.ones_like(z)
    j0 = np.ones_like(z)
    ysum = np.zeros_like(z)
    harmonic = 0.0
    for m in range(1, _SERIES_TERMS):
        term = term * q / (m * m)
        harmonic += 1.0 / m
        j0 = j0 + term
        ysum = ysum + harmonic * term
    y0 = (2.0 / math.pi) * ((np.log(z / 2.0) + _EULER_GAMMA) * j0 - ysum)
    return j0 + 1j * y0


def _h0_asymptotic(z: np.ndarray) -> np.ndarray:
    total = np.ones_like(z)
    term = np.ones_like(z)
    best = np.abs(term)
    done = np.zeros(z.shape, dtype=bool)
    for k in range(1, 60):
        new = term * (1j * -((2 * k - 1) ** 2) / (k * 8.0)) / z
        mag = np.abs(new)
        # stop each entry at its smallest term (the series is asymptotic)
        done |= mag >= best
        total = np.where(done, total, total + new)
        term = new
        best = np.minimum(best, mag)
        if np.all(done | (mag < 1e-17)):
            break
    return np.sqrt(2.0 / (math.pi * z)) * np.exp(1j * (z - math.pi / 4.0)) * total


def hankel1_0(z):
    """Hankel function of the first kind and order zero, ``Re(z) > 0``.

    Power series below ``|z| = 12``, large-argument expansion above.
    """
    zz = np.asarray(z, dtype=complex)
    if np.any(zz.real <= 0):
        raise DomainError("hankel1_0 needs Re(z) > 0")
    flat = zz.ravel()
    out = np.empty_like(flat)
    small = np.abs(flat) <= HANKEL_CROSSOVER
    if small.any():
        out[small] = _h0_series(flat[small])
    if (~small).any():
        out[~small] = _h0_asymptotic(flat[~small])
    out = out.reshape(zz.shape)
    return complex(out) if out.ndim == 0 else out


def analytic_green_2d(k, r, rho: float, omega):
    """Free-space pressure ``(omega rho / 4) H0(k r)`` of a unit point source."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise DomainError("r must be > 0 (logarithmic singularity at the source)")
    w = omega.value if isinstance(omega, ComplexFrequency) else complex(omega)
    return w * rho / 4.0 * hankel1_0(complex(k) * r)
