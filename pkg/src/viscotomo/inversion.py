"""Least-squares misfit, adjoint-state gradients and the multi-frequency
nonlinear conjugate-gradient reconstruction loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .attenuation import ComplexFrequency, model_kind
from .errors import ConstraintViolation, ContractError, DomainError, ValidityError
from .medium import MediumGrid, Parametrization, reparametrize
from .solver import (Acquisition, BoundarySpec, FrequencyData, HelmholtzSystem, face_geometry,
                     receiver_matrix, simulate, solve_adjoint)

__all__ = [
    "misfit",
    "residuals",
    "adjoint_gradient",
    "kappa_rho_gradient",
    "chain_rule",
    "frequency_schedule",
    "InversionConfig",
    "HistoryRow",
    "BlockSummary",
    "InversionHistory",
    "invert",
]

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Misfit and gradient
# ---------------------------------------------------------------------------

def _check_congruent(sim: FrequencyData, obs: FrequencyData) -> None:
    if not sim.congruent(obs):
        raise DomainError("simulated and observed data have different index sets")


def misfit(sim: FrequencyData, obs: FrequencyData) -> float:
    """``0.5 * sum |sim - obs|^2`` over every frequency, source and receiver."""
    _check_congruent(sim, obs)
    r = (sim.values - obs.values).ravel()
    return 0.5 * float(np.vdot(r, r).real)


def residuals(sim: FrequencyData, obs: FrequencyData) -> FrequencyData:
    _check_congruent(sim, obs)
    return sim.with_values(sim.values - obs.values)


def kappa_rho_gradient(system: HelmholtzSystem, fields: np.ndarray, adjoint: np.ndarray):
    """Node-wise ``dJ/dkappa0`` and ``dJ/drho`` from forward and adjoint fields.

    Uses ``dJ/dm = -Re(lambda^H (dA/dm) p)`` summed over the columns of
    ``fields`` / ``adjoint`` (both ``(N, n_sources)``).
    """
    med = system.medium
    shape = med.shape
    w = system.omega.value
    kd = system.kappa_dagger
    rho = med.rho
    lam_c = np.conj(adjoint).T.reshape((-1,) + shape)
    p = fields.T.reshape((-1,) + shape)

    diag_pair = np.sum(lam_c * p, axis=0)
    robin = 1j * w * system.robin_length / np.sqrt(rho * kd)
    dk = med.dkappa_dagger(system.omega)
    d_diag_dk = (-(w * w) * system.volume / (kd * kd) - 0.5 * robin / kd) * dk
    g_kappa = -np.real(diag_pair * d_diag_dk)

    g_rho = -np.real(diag_pair * (-0.5 * robin / rho))
    gx, gz = face_geometry(med)
    # face term: dc/drho_a (conj(lam_a) - conj(lam_b)) (p_b - p_a), same for rho_b
    fx = np.sum((lam_c[:, 1:, :] - lam_c[:, :-1, :]) * (p[:, :-1, :] - p[:, 1:, :]), axis=0)
    fz = np.sum((lam_c[:, :, 1:] - lam_c[:, :, :-1]) * (p[:, :, :-1] - p[:, :, 1:]), axis=0)
    dcx = -2.0 * gx / (rho[1:, :] + rho[:-1, :]) ** 2
    dcz = -2.0 * gz / (rho[:, 1:] + rho[:, :-1]) ** 2
    tx = -np.real(dcx * fx)
    tz = -np.real(dcz * fz)
    g_rho[1:, :] += tx
    g_rho[:-1, :] += tx
    g_rho[:, 1:] += tz
    g_rho[:, :-1] += tz
    return g_kappa, g_rho


def chain_rule(g_kappa, g_rho, kappa0, rho, param) -> tuple[np.ndarray, np.ndarray]:
    """Map ``(dJ/dkappa0, dJ/drho)`` to the gradient in ``param``'s variables."""
    param = Parametrization.parse(param)
    if param is Parametrization.KAPPA_RHO:
        return g_kappa, g_rho
    imp, speed = np.sqrt(kappa0 * rho), np.sqrt(kappa0 / rho)
    if param is Parametrization.IMPEDANCE_RHO:
        return g_kappa * 2 * imp / rho, g_rho - g_kappa * imp * imp / (rho * rho)
    if param is Parametrization.SPEED_RHO:
        return g_kappa * 2 * rho * speed, g_rho + g_kappa * speed * speed
    return (g_kappa * speed + g_rho / speed,
            g_kappa * imp - g_rho * imp / (speed * speed))


def adjoint_gradient(system: HelmholtzSystem, fields, resid: FrequencyData, medium: MediumGrid,
                     param=Parametrization.KAPPA_RHO, acq: Acquisition | None = None,
                     spec_kind: str | None = None) -> dict[str, np.ndarray]:
    """Gradient of the misfit at ``system.omega`` in the variables of ``param``.

    Parameters
    ----------
    system : factorized HelmholtzSystem
        Operator of ``medium`` at the data frequency.
    fields : array ``(n_sources, N)`` or ``(n_sources, nx, nz)``
        Forward pressure fields, in the order of ``resid.source_ids``.
    resid : FrequencyData
        Simulated minus observed data at the single frequency ``system.omega``.
    acq : Acquisition
        Receiver positions (residuals are injected at the receivers).
    spec_kind : str, optional
        Attenuation model the caller expects the medium to use.

    Returns
    -------
    dict
        One ``(nx, nz)`` array per variable name of ``param``.
    """
    if not system.factorized:
        raise ContractError("adjoint_gradient needs a factorized system")
    if not system.medium.same_as(medium):
        raise ContractError("system was assembled for a different medium")
    if resid.omegas != (system.omega,):
        raise ContractError(f"residuals at {resid.omegas} do not match system frequency {system.omega}")
    if spec_kind is not None and model_kind(spec_kind) != medium.atten_kind:
        raise ContractError(f"medium uses {medium.atten_kind}, expected {model_kind(spec_kind)}")
    if acq is None:
        raise ContractError("receiver positions are required")
    ns = len(resid.source_ids)
    p = np.asarray(fields, dtype=complex).reshape(ns, -1)
    if p.shape[1] != medium.size:
        raise ContractError("fields do not match the medium size")
    if resid.n_receivers != acq.n_receivers:
        raise ContractError("residuals do not match the receiver count")

    # deterministic reduction: order sources by id
    order = np.argsort(np.asarray(resid.source_ids), kind="stable")
    R = receiver_matrix(medium, acq.receivers)
    r = resid.values[0][order]
    rhs = np.asarray((R.T @ r.T), dtype=complex)
    lam = solve_adjoint(system, rhs)
    lam = lam.reshape(medium.size, ns)
    gk, gr = kappa_rho_gradient(system, p[order].T, lam)
    param = Parametrization.parse(param)
    ga, gb = chain_rule(gk, gr, medium.kappa0, medium.rho, param)
    return {param.names[0]: ga, param.names[1]: gb}


# ---------------------------------------------------------------------------
# Schedule and configuration
# ---------------------------------------------------------------------------

def frequency_schedule(omega_r_list, omega_i_list=(0.0,)) -> list[ComplexFrequency]:
    """``omega_r`` ascending (outer), ``omega_i`` descending (inner)."""
    wr = [float(w) for w in omega_r_list]
    wi = [float(w) for w in omega_i_list]
    if not wr or not wi:
        raise DomainError("frequency lists must be nonempty")
    if any(b <= a for a, b in zip(wr, wr[1:])):
        raise DomainError("omega_r list must be strictly ascending")
    if any(b >= a for a, b in zip(wi, wi[1:])):
        raise DomainError("omega_i list must be strictly descending")
    return [ComplexFrequency(r, i) for r in wr for i in wi]


@dataclass(frozen=True)
class InversionConfig:
    """Settings of the reconstruction loop.

    ``bounds`` maps a variable name of ``parametrization`` to ``(lower, upper)``.
    ``initial_step`` is the largest relative change of an inverted field on the
    first trial step of a block.
    """

    omega_r_list: tuple
    omega_i_list: tuple = (0.0,)
    iters_per_frequency: int = 30
    parametrization: Parametrization = Parametrization.KAPPA_RHO
    inverted_fields: tuple = ("kappa0",)
    initial_step: float = 0.02
    backtrack: float = 0.5
    armijo_c: float = 1e-4
    max_backtracks: int = 20
    min_step: float = 1e-12
    max_failures: int = 2
    bounds: Mapping = field(default_factory=dict)

    def __post_init__(self):
        param = Parametrization.parse(self.parametrization)
        object.__setattr__(self, "parametrization", param)
        object.__setattr__(self, "omega_r_list", tuple(float(w) for w in self.omega_r_list))
        object.__setattr__(self, "omega_i_list", tuple(float(w) for w in self.omega_i_list))
        object.__setattr__(self, "inverted_fields", tuple(self.inverted_fields))
        frequency_schedule(self.omega_r_list, self.omega_i_list)
        if self.iters_per_frequency < 1:
            raise DomainError("iters_per_frequency must be >= 1")
        if not self.inverted_fields or any(f not in param.names for f in self.inverted_fields):
            raise DomainError(f"inverted fields {self.inverted_fields} not in {param.names}")
        if not (0 < self.backtrack < 1 and 0 < self.armijo_c < 1 and self.initial_step > 0):
            raise DomainError("line-search parameters out of range")
        for name, (lo, hi) in self.bounds.items():
            if name not in param.names or not (0 < lo < hi):
                raise DomainError(f"invalid bounds for {name!r}: ({lo}, {hi})")

    @property
    def schedule(self) -> list[ComplexFrequency]:
        return frequency_schedule(self.omega_r_list, self.omega_i_list)


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    omega: ComplexFrequency
    misfit: float
    step: float
    grad_norm: float
    accepted: bool


@dataclass
class BlockSummary:
    omega: ComplexFrequency
    initial_misfit: float
    final_misfit: float = math.nan
    iterations: int = 0
    message: str = ""

    @property
    def reduction(self) -> float:
        """Fraction of the block's initial misfit removed."""
        if self.initial_misfit == 0:
            return 0.0
        return 1.0 - self.final_misfit / self.initial_misfit


@dataclass
class InversionHistory:
    rows: list = field(default_factory=list)
    blocks: list = field(default_factory=list)

    def block_rows(self, k: int) -> list[HistoryRow]:
        omega = self.blocks[k].omega
        return [r for r in self.rows if r.omega == omega]


# ---------------------------------------------------------------------------
# Reconstruction loop
# ---------------------------------------------------------------------------

class _Problem:
    """Objective at one frequency in normalised optimisation variables."""

    def __init__(self, config, medium, omega, obs, acq, bcs, amplitude, scale):
        self.cfg = config
        self.base = medium
        self.omega = omega
        self.obs = obs
        self.acq = acq
        self.bcs = bcs
        self.amplitude = amplitude
        self.param = config.parametrization
        self.scale = scale
        a, b = reparametrize((medium.kappa0, medium.rho), Parametrization.KAPPA_RHO, self.param)
        self.fixed = {self.param.names[0]: a, self.param.names[1]: b}

    def bounds(self, name):
        lo, hi = self.cfg.bounds.get(name, (0.0, math.inf))
        return lo / self.scale[name], hi / self.scale[name]

    def pack(self, medium) -> np.ndarray:
        a, b = reparametrize((medium.kappa0, medium.rho), Parametrization.KAPPA_RHO, self.param)
        vals = {self.param.names[0]: a, self.param.names[1]: b}
        return np.concatenate([vals[n].ravel() / self.scale[n] for n in self.cfg.inverted_fields])

    def clamp(self, x: np.ndarray) -> np.ndarray:
        n = self.base.size
        out = x.copy()
        for k, name in enumerate(self.cfg.inverted_fields):
            lo, hi = self.bounds(name)
            np.clip(out[k * n:(k + 1) * n], lo, hi, out=out[k * n:(k + 1) * n])
        return out

    def unpack(self, x: np.ndarray) -> MediumGrid:
        vals = dict(self.fixed)
        n = self.base.size
        for k, name in enumerate(self.cfg.inverted_fields):
            vals[name] = x[k * n:(k + 1) * n].reshape(self.base.shape) * self.scale[name]
        a, b = vals[self.param.names[0]], vals[self.param.names[1]]
        k0, rho = reparametrize((a, b), self.param, Parametrization.KAPPA_RHO)
        return self.base.replace(kappa0=k0, rho=rho)

    def value(self, x: np.ndarray, gradient: bool = False):
        try:
            medium = self.unpack(x)
            sim = simulate(medium, self.omega, self.acq, self.bcs, self.amplitude)
        except (ValidityError, DomainError, ConstraintViolation):
            return math.inf, None
        J = misfit(sim.data, self.obs)
        if not gradient:
            return J, None
        g = adjoint_gradient(sim.system, sim.fields, residuals(sim.data, self.obs), medium,
                             self.param, self.acq)
        return J, np.concatenate([g[n].ravel() * self.scale[n] for n in self.cfg.inverted_fields])


def _line_search(prob: _Problem, x, J0, g, d, trial):
    """Backtracking Armijo search on the clamped path; returns (x, J, step, ok)."""
    cfg = prob.cfg

    def attempt(alpha):
        xn = prob.clamp(x + alpha * d)
        Jn, _ = prob.value(xn)
        ok = Jn <= J0 + cfg.armijo_c * float(g @ (xn - x))
        return xn, Jn, ok

    xt, Jt, ok_t = attempt(trial)
    slope = float(g @ d)
    candidates = [(Jt, trial, xt, ok_t)]
    # quadratic model through J0, slope and J(trial)
    curv = Jt - J0 - slope * trial
    if math.isfinite(Jt) and curv > 0:
        aq = -slope * trial * trial / (2 * curv)
        aq = min(max(aq, 0.1 * trial), 10 * trial)
        if abs(aq - trial) > 1e-3 * trial:
            xq, Jq, ok_q = attempt(aq)
            candidates.append((Jq, aq, xq, ok_q))
    good = [c for c in candidates if c[3]]
    if good:
        best = min(good, key=lambda c: c[0])
        return best[2], best[0], best[1], True
    alpha = min(c[1] for c in candidates)
    for _ in range(cfg.max_backtracks):
        alpha *= cfg.backtrack
        if alpha < cfg.min_step:
            break
        xn, Jn, ok = attempt(alpha)
        if ok:
            return xn, Jn, alpha, True
    return x, J0, alpha, False


def _run_block(prob: _Problem, x, history: InversionHistory, summary: BlockSummary, counter):
    cfg = prob.cfg
    J, g = prob.value(x, gradient=True)
    if not math.isfinite(J):
        raise ValidityError(f"initial model of block {prob.omega} is invalid")
    summary.initial_misfit = summary.final_misfit = J
    d = -g
    g_prev = None
    change_prev = None
    failures = 0
    for _ in range(cfg.iters_per_frequency):
        counter[0] += 1
        gnorm = float(np.linalg.norm(g))
        summary.iterations += 1
        if gnorm == 0.0 or J == 0.0:
            history.rows.append(HistoryRow(counter[0], prob.omega, J, 0.0, gnorm, False))
            summary.message = "zero gradient; model is stationary"
            break
        if g_prev is not None:
            beta = max(0.0, float(g @ (g - g_prev)) / float(g_prev @ g_prev))
            d = -g + beta * d
            if float(g @ d) >= 0:
                d = -g
        # unit max-norm direction: the step is the largest relative model change
        du = d / float(np.max(np.abs(d)))
        trial = cfg.initial_step if change_prev is None else min(2.0 * change_prev, 10.0 * cfg.initial_step)
        x_new, J_new, step, ok = _line_search(prob, x, J, g, du, trial)
        if ok:
            change_prev = step
            x, J = x_new, J_new
            g_prev = g
            _, g = prob.value(x, gradient=True)
            failures = 0
            history.rows.append(HistoryRow(counter[0], prob.omega, J, step, gnorm, True))
        else:
            history.rows.append(HistoryRow(counter[0], prob.omega, J, 0.0, gnorm, False))
            failures += 1
            g_prev = None
            change_prev = None
            d = -g
            if failures >= cfg.max_failures:
                summary.message = f"line search failed {failures} times in a row; block ended early"
                log.warning("%s at omega = %s", summary.message, prob.omega)
                break
    summary.final_misfit = J
    return x


def invert(config: InversionConfig, obs: FrequencyData, initial: MediumGrid, acq: Acquisition,
           bcs: BoundarySpec, amplitude: complex | Callable[[ComplexFrequency], complex] = 1.0,
           callback: Callable | None = None):
    """Multi-frequency reconstruction with nonlinear conjugate gradients.

    Parameters
    ----------
    obs : FrequencyData
        Observed data containing every scheduled frequency.
    amplitude : complex or callable
        Source spectrum value, or a function of the frequency returning it.
    callback : callable, optional
        Called as ``callback(omega, medium)`` after each frequency block.

    Returns
    -------
    (MediumGrid, InversionHistory)
    """
    schedule = config.schedule
    missing = [w for w in schedule if w not in obs.omegas]
    if missing:
        raise DomainError(f"observed data missing at {missing}")
    if obs.source_ids != acq.source_ids or obs.n_receivers != acq.n_receivers:
        raise DomainError("observed data do not match the acquisition")
    a, b = reparametrize((initial.kappa0, initial.rho), Parametrization.KAPPA_RHO,
                         config.parametrization)
    init = {config.parametrization.names[0]: a, config.parametrization.names[1]: b}
    scale = {n: float(np.mean(init[n])) for n in config.parametrization.names}

    history = InversionHistory()
    medium = initial
    counter = [0]
    for omega in schedule:
        amp = amplitude(omega) if callable(amplitude) else amplitude
        prob = _Problem(config, medium, omega, obs.at(omega), acq, bcs, amp, scale)
        summary = BlockSummary(omega, math.nan)
        history.blocks.append(summary)
        x = prob.pack(medium)
        x = _run_block(prob, x, history, summary, counter)
        medium = prob.unpack(x)
        log.info("omega = %s: misfit %.4e -> %.4e", omega, summary.initial_misfit, summary.final_misfit)
        if callback is not None:
            callback(omega, medium)
    return medium, history
