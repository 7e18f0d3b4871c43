"""Batch command line: ``viscotomo phantom|forward|noise|invert|dispersion|error``.

Every command reads an INI-style configuration (``[section]`` / ``key = value``)
and writes its artifacts atomically.  Exit codes: 0 success, 2 configuration
error, 3 calibration failure, 4 solver failure.

Configuration keys (units in brackets)::

    [phantom]     preset = water | disk | breast, width, height, spacing [m],
                  size [m] (breast), background = c0, rho, Q,
                  inclusion = cx, cz, radius [m], c0, rho, Q (disk),
                  model, reference_hz, perturb, seed, fixed = name:value, ...
    [medium]      grid = path of the true model
    [acquisition] center = x, z [m], radius [m], source_radius [m] (default radius),
                  sources, receivers, start_angle [rad]
    [frequencies] freqs_hz = f1, f2, ... ; omega_i = w1, w2, ... [1/s] (descending)
    [boundaries]  all = absorbing | wall ; or left / right / top / bottom
    [source]      wavelet = unit | ricker, peak_hz, delay [s], dt [s], nt
    [noise]       input, snr_db, seed
    [inversion]   data, initial = path | homogeneous, c0, rho, q, model,
                  reference_hz, iterations, parametrization, inverted,
                  bounds = name:lo:hi, ..., initial_step
    [dispersion]  models = all | kind, ... ; coefficients = reference | calibrate,
                  target_q, reference_hz, kappa0, rho, start_hz, stop_hz, count
    [output]      grid, data, noisy, reconstruction, history, table, report
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import attenuation as att
from .attenuation import ComplexFrequency
from .errors import CalibrationError, FactorizationError, ValidityError, ViscotomoError
from .inversion import InversionConfig, invert
from .medium import (Disk, Layer, MediumGrid, Parametrization, PhantomSpec, atomic_write,
                     breast_phantom_spec, build_phantom, read_grid, region_index,
                     relative_model_error, rms_model_error, write_grid)
from .signal import RickerSpec, add_white_noise, laplace_fourier, ricker
from .solver import Acquisition, BoundarySpec, FrequencyData, forward_map

__all__ = ["main", "read_data_csv", "write_data_csv", "data_csv", "history_csv", "ConfigError",
           "EXIT_OK", "EXIT_CONFIG", "EXIT_CALIBRATION", "EXIT_SOLVER"]

EXIT_OK, EXIT_CONFIG, EXIT_CALIBRATION, EXIT_SOLVER = 0, 2, 3, 4
DATA_HEADER = ["source_id", "receiver_id", "omega_r", "omega_i", "p_real", "p_imag"]
HISTORY_HEADER = ["iteration", "omega_r", "omega_i", "misfit", "step", "grad_norm", "accepted"]

log = logging.getLogger("viscotomo")


class ConfigError(ViscotomoError):
    """Missing or malformed configuration."""


def _g(x: float) -> str:
    return "%.17g" % x


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def data_csv(data: FrequencyData) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DATA_HEADER)
    for k, omega in enumerate(data.omegas):
        for s, sid in enumerate(data.source_ids):
            for r in range(data.n_receivers):
                v = data.values[k, s, r]
                w.writerow([sid, r, _g(omega.omega_r), _g(omega.omega_i), _g(v.real), _g(v.imag)])
    return buf.getvalue()


def write_data_csv(path, data: FrequencyData) -> None:
    atomic_write(path, data_csv(data))


def read_data_csv(path) -> FrequencyData:
    """Parse a data CSV; the index set must be complete."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DATA_HEADER:
            raise ConfigError(f"{path}: expected header {','.join(DATA_HEADER)}")
        entries = {}
        omegas, sources, nrcv = [], [], 0
        for lineno, row in enumerate(reader, start=2):
            try:
                sid, rid = int(row[0]), int(row[1])
                omega = ComplexFrequency(float(row[2]), float(row[3]))
                val = complex(float(row[4]), float(row[5]))
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"{path}:{lineno}: malformed row ({exc})") from None
            if omega not in omegas:
                omegas.append(omega)
            if sid not in sources:
                sources.append(sid)
            nrcv = max(nrcv, rid + 1)
            entries[(omega, sid, rid)] = val
    if not entries:
        raise ConfigError(f"{path}: no data rows")
    values = np.empty((len(omegas), len(sources), nrcv), dtype=complex)
    for k, omega in enumerate(omegas):
        for s, sid in enumerate(sources):
            for r in range(nrcv):
                try:
                    values[k, s, r] = entries[(omega, sid, r)]
                except KeyError:
                    raise ConfigError(f"{path}: missing value for source {sid}, receiver {r}, "
                                      f"omega {omega}") from None
    return FrequencyData(tuple(omegas), tuple(sources), values)


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for row in history.rows:
        w.writerow([row.iteration, _g(row.omega.omega_r), _g(row.omega.omega_i), _g(row.misfit),
                    _g(row.step), _g(row.grad_norm), int(row.accepted)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Configuration helpers
# ---------------------------------------------------------------------------

class RunConfig:
    """Typed access to the INI sections of a run."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.is_file():
            raise ConfigError(f"config file {path} not found")
        self.cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            self.cp.read(self.path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def has(self, section, key) -> bool:
        return self.cp.has_option(section, key)

    def str(self, section, key, default=None) -> str:
        if self.cp.has_option(section, key):
            return self.cp.get(section, key).strip()
        if default is None:
            raise ConfigError(f"missing key [{section}] {key}")
        return default

    def float(self, section, key, default=None) -> float:
        raw = self.str(section, key, None if default is None else repr(float(default)))
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a number") from None

    def int(self, section, key, default=None) -> int:
        raw = self.str(section, key, None if default is None else str(default))
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not an integer") from None

    def bool(self, section, key, default=False) -> bool:
        raw = self.str(section, key, "true" if default else "false").lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a boolean")

    def floats(self, section, key, default=None) -> list[float]:
        raw = self.str(section, key, None if default is None else ",".join(map(repr, default)))
        try:
            return [float(v) for v in raw.replace(";", ",").split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a number list") from None

    def path_of(self, section, key, default=None, must_exist=False) -> Path:
        p = Path(self.str(section, key, default))
        if not p.is_absolute():
            p = self.path.parent / p
        if must_exist and not p.is_file():
            raise ConfigError(f"[{section}] {key}: file {p} not found")
        return p

    def pairs(self, section, key) -> dict:
        """``name:value, ...`` into a dict of floats."""
        out = {}
        if not self.has(section, key):
            return out
        for item in self.str(section, key).split(","):
            if not item.strip():
                continue
            parts = item.split(":")
            try:
                out[parts[0].strip()] = tuple(float(v) for v in parts[1:])
            except ValueError:
                raise ConfigError(f"[{section}] {key}: malformed entry {item!r}") from None
        return out


def _output(cfg: RunConfig, args, key: str, default: str) -> Path:
    if args.out:
        return Path(args.out)
    return cfg.path_of("output", key, default)


def _phantom_spec(cfg: RunConfig, seed) -> PhantomSpec:
    s = "phantom"
    preset = cfg.str(s, "preset", "water").lower()
    seed = cfg.int(s, "seed", 0) if seed is None else seed
    perturb = cfg.bool(s, "perturb", False)
    if preset == "breast":
        size = cfg.float(s, "size", 0.18)
        return breast_phantom_spec(size, cfg.float(s, "spacing", 5e-4), perturb, seed,
                                   cfg.bool(s, "inclusion", True))
    width = cfg.float(s, "width")
    height = cfg.float(s, "height", width)
    bg = tuple(cfg.floats(s, "background", (1490.0, 1000.0, 800.0)))
    if len(bg) != 3:
        raise ConfigError("[phantom] background needs c0, rho, Q")
    inclusion = None
    if preset == "disk":
        vals = cfg.floats(s, "inclusion")
        if len(vals) != 6:
            raise ConfigError("[phantom] inclusion needs cx, cz, radius, c0, rho, Q")
        cx, cz, r, c0, rho, q = vals
        inclusion = Layer(Disk(cx, cz, r), c0, rho, q, "inclusion")
    elif preset != "water":
        raise ConfigError(f"[phantom] unknown preset {preset!r}")
    return PhantomSpec(width, height, cfg.float(s, "spacing"), bg, (), inclusion, seed)


def _acquisition(cfg: RunConfig, grid: MediumGrid) -> Acquisition:
    s = "acquisition"
    w, h = grid.extent
    center = cfg.floats(s, "center", (w / 2, h / 2))
    if len(center) != 2:
        raise ConfigError("[acquisition] center needs x, z")
    radius = cfg.float(s, "radius", 0.45 * min(w, h))
    src_radius = cfg.float(s, "source_radius", radius)
    start = cfg.float(s, "start_angle", 0.0)
    ring = Acquisition.ring(tuple(center), radius, 1, cfg.int(s, "receivers", 360), start)
    srcs = Acquisition.ring(tuple(center), src_radius, cfg.int(s, "sources", 36), 1, start)
    return Acquisition(srcs.sources, ring.receivers)


def _boundaries(cfg: RunConfig) -> BoundarySpec:
    s = "boundaries"
    try:
        default = cfg.str(s, "all", "absorbing").lower()
        return BoundarySpec(*(cfg.str(s, side, default).lower()
                              for side in ("left", "right", "top", "bottom")))
    except ValueError as exc:
        raise ConfigError(f"[boundaries] {exc}") from None


def _omega_lists(cfg: RunConfig):
    freqs = cfg.floats("frequencies", "freqs_hz")
    omega_i = cfg.floats("frequencies", "omega_i", (0.0,))
    return [2 * math.pi * f for f in freqs], omega_i


def _amplitude(cfg: RunConfig):
    s = "source"
    kind = cfg.str(s, "wavelet", "unit").lower()
    if kind == "unit":
        return lambda omega: 1.0
    if kind != "ricker":
        raise ConfigError(f"[source] unknown wavelet {kind!r}")
    peak = cfg.float(s, "peak_hz")
    sig = ricker(RickerSpec(peak, cfg.float(s, "delay", 1.5 / peak)),
                 cfg.int(s, "nt", 1000), cfg.float(s, "dt", 0.02 / peak))
    return lambda omega: laplace_fourier(sig, omega)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_phantom(cfg: RunConfig, args) -> int:
    spec = _phantom_spec(cfg, args.seed)
    kind = att.model_kind(cfg.str("phantom", "model", "kolsky_futterman"))
    omega_ref = ComplexFrequency.from_hz(cfg.float("phantom", "reference_hz", att.REFERENCE_FREQUENCY_HZ))
    fixed = {k: v[0] for k, v in cfg.pairs("phantom", "fixed").items()}
    grid = build_phantom(spec, kind, omega_ref, fixed)
    out = _output(cfg, args, "grid", "phantom.vagrid")
    write_grid(out, grid)
    X, Z = np.meshgrid(grid.x, grid.z, indexing="ij")
    owner = region_index(spec, X, Z)
    c0, q = grid.speed(), grid.quality_factor(omega_ref)
    for k, lay in enumerate(spec.regions()):
        m = owner == k
        if m.any():
            print(f"region={lay.name or k} nodes={int(m.sum())} c0={np.mean(c0[m]):.6g} "
                  f"rho={np.mean(grid.rho[m]):.6g} Q={np.mean(q[m]):.6g}")
    print(f"wrote {out} ({grid.nx}x{grid.nz}, model {grid.atten_kind})")
    return EXIT_OK


def cmd_forward(cfg: RunConfig, args) -> int:
    grid = read_grid(cfg.path_of("medium", "grid", must_exist=True))
    acq = _acquisition(cfg, grid)
    bcs = _boundaries(cfg)
    wr, wi = _omega_lists(cfg)
    amp = _amplitude(cfg)
    parts = []
    for w_r in wr:
        for w_i in wi:
            omega = ComplexFrequency(w_r, w_i)
            parts.append(forward_map(grid, omega, acq, bcs, amp(omega))[0])
    data = FrequencyData.concat(parts)
    out = _output(cfg, args, "data", "data.csv")
    write_data_csv(out, data)
    print(f"wrote {out} ({data.size} rows)")
    return EXIT_OK


def cmd_noise(cfg: RunConfig, args) -> int:
    data = read_data_csv(cfg.path_of("noise", "input", must_exist=True))
    snr = args.snr_db if args.snr_db is not None else cfg.float("noise", "snr_db")
    seed = args.seed if args.seed is not None else cfg.int("noise", "seed", 0)
    noisy = add_white_noise(data, snr, seed)
    out = _output(cfg, args, "noisy", "data_noisy.csv")
    write_data_csv(out, noisy)
    print(f"wrote {out} (snr {snr:g} dB, seed {seed})")
    return EXIT_OK


def _initial_model(cfg: RunConfig) -> MediumGrid:
    s = "inversion"
    init = cfg.str(s, "initial", "homogeneous")
    if init != "homogeneous":
        return read_grid(cfg.path_of(s, "initial", must_exist=True))
    ref = read_grid(cfg.path_of("medium", "grid", must_exist=True))
    c0 = cfg.float(s, "c0", 1490.0)
    rho = cfg.float(s, "rho", 1000.0)
    kind = att.model_kind(cfg.str(s, "model", ref.atten_kind))
    spec = None
    if kind != "none":
        omega_ref = ComplexFrequency.from_hz(cfg.float(s, "reference_hz", att.REFERENCE_FREQUENCY_HZ))
        fixed = {k: v[0] for k, v in cfg.pairs(s, "fixed").items()}
        spec = att.calibrate_to_quality(kind, rho * c0 * c0, cfg.float(s, "q", 800.0), omega_ref,
                                        fixed or None)
    return MediumGrid.homogeneous(ref.nx, ref.nz, ref.dx, ref.dz, c0, rho, spec)


def cmd_invert(cfg: RunConfig, args) -> int:
    s = "inversion"
    obs = read_data_csv(cfg.path_of(s, "data", must_exist=True))
    initial = _initial_model(cfg)
    acq = _acquisition(cfg, initial)
    bcs = _boundaries(cfg)
    wr, wi = _omega_lists(cfg)
    param = Parametrization.parse(cfg.str(s, "parametrization", "kappa_rho"))
    inverted = tuple(v.strip() for v in cfg.str(s, "inverted", param.names[0]).split(",") if v.strip())
    bounds = {k: v for k, v in cfg.pairs(s, "bounds").items()}
    if any(len(v) != 2 for v in bounds.values()):
        raise ConfigError("[inversion] bounds entries need name:lower:upper")
    config = InversionConfig(tuple(wr), tuple(wi), cfg.int(s, "iterations", 30), param, inverted,
                             initial_step=cfg.float(s, "initial_step", 0.02), bounds=bounds)
    rec, history = invert(config, obs, initial, acq, bcs, _amplitude(cfg))
    out = _output(cfg, args, "reconstruction", "reconstruction.vagrid")
    write_grid(out, rec)
    hist_path = cfg.path_of("output", "history", str(Path(out).with_suffix(".history.csv")))
    atomic_write(hist_path, history_csv(history))
    for b in history.blocks:
        line = (f"omega_r={b.omega.omega_r:.6g} omega_i={b.omega.omega_i:g} "
                f"misfit {b.initial_misfit:.6e} -> {b.final_misfit:.6e}")
        print(line + (f" [{b.message}]" if b.message else ""))
    truth_path = args.truth or (cfg.str(s, "truth") if cfg.has(s, "truth") else None)
    if truth_path:
        truth = read_grid(truth_path)
        print(f"relative_model_error={relative_model_error(truth.speed(), rec.speed()):.6g} "
              f"rms={rms_model_error(truth.speed(), rec.speed()):.6g}")
    print(f"wrote {out} and {hist_path}")
    return EXIT_OK


def cmd_dispersion(cfg: RunConfig, args) -> int:
    s = "dispersion"
    models = cfg.str(s, "models", "all").lower()
    kinds = att.ATTENUATING_KINDS if models == "all" else tuple(
        att.model_kind(m) for m in models.split(",") if m.strip())
    kappa0 = cfg.float(s, "kappa0", 2.25e9)
    rho = cfg.float(s, "rho", 1000.0)
    if cfg.has(s, "freqs_hz"):
        freqs = cfg.floats(s, "freqs_hz")
    else:
        freqs = list(np.linspace(cfg.float(s, "start_hz", 50e3), cfg.float(s, "stop_hz", 800e3),
                                 cfg.int(s, "count", 151)))
    mode = cfg.str(s, "coefficients", "reference").lower()
    fixed = {k: v[0] for k, v in cfg.pairs(s, "fixed").items()}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "freq_hz", "Q"])
    for kind in kinds:
        if mode == "reference":
            spec = att.REFERENCE_Q118[kind]
        elif mode == "calibrate":
            omega_ref = ComplexFrequency.from_hz(cfg.float(s, "reference_hz", att.REFERENCE_FREQUENCY_HZ))
            spec = att.calibrate_to_quality(kind, kappa0, cfg.float(s, "target_q", 118.0), omega_ref,
                                            {k: v for k, v in fixed.items()
                                             if k in att.coefficient_names(kind)} or None)
        else:
            raise ConfigError(f"[dispersion] unknown coefficients mode {mode!r}")
        for f, q in att.dispersion_table(spec, kappa0, rho, freqs):
            w.writerow([kind, _g(f), _g(q)])
    out = _output(cfg, args, "table", "dispersion.csv")
    atomic_write(out, buf.getvalue())
    print(f"wrote {out} ({len(kinds)} models x {len(freqs)} frequencies)")
    return EXIT_OK


def cmd_error(cfg: RunConfig, args) -> int:
    truth_path = args.truth or cfg.path_of("error", "truth", must_exist=True)
    rec_path = cfg.path_of("error", "reconstruction",
                           str(cfg.path_of("output", "reconstruction", "reconstruction.vagrid")),
                           must_exist=True)
    truth, rec = read_grid(truth_path), read_grid(rec_path)
    e = relative_model_error(truth.speed(), rec.speed())
    r = rms_model_error(truth.speed(), rec.speed())
    print(f"relative_model_error={e:.6g} rms={r:.6g}")
    if args.out:
        atomic_write(args.out, f"relative_model_error,rms\n{_g(e)},{_g(r)}\n")
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "forward": cmd_forward,
    "noise": cmd_noise,
    "invert": cmd_invert,
    "dispersion": cmd_dispersion,
    "error": cmd_error,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viscotomo", description="Visco-acoustic frequency-domain "
                                "modelling and waveform inversion.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI configuration file")
    p.add_argument("--seed", type=int, default=None, help="override the random seed")
    p.add_argument("--snr-db", type=float, default=None, help="noise level in dB (noise)")
    p.add_argument("--truth", default=None, help="true model grid for error reporting")
    p.add_argument("--out", default=None, help="override the primary output path")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig(args.config)
        return COMMANDS[args.command](cfg, args)
    except CalibrationError as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (ValidityError, FactorizationError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ViscotomoError, ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
