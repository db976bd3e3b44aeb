"""Command-line driver for spectra, couplings, resonance traces, tilt
spectra and the measurement fits.

One TOML file configures a run; the command line only selects the command
and the cross-cutting options::

    mate-optix --config run.toml --out results spectrum
    mate-optix --config run.toml --out results fit loss

All configuration values are SI (meters, radians, rad/s, kilograms).
Every float in an output file is written with 17 significant digits and
JSON objects are emitted with sorted keys, so a repeated run produces
byte-identical files. Exit codes: 0 success, 2 bad input (configuration,
data file or model construction), 3 a fit that failed or did not
converge. The MATE_OPTIX_LOG environment variable sets the stderr log
level (DEBUG, INFO, WARNING, ...).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib

from .constants import C
from .core import (CavityGeometry, MechanicalMode, MembraneSpec, Mirror, fsr,
                   thin_membrane_coefficients)
from .couplings import (dissipative_b, dissipative_maxima, dispersive_mate,
                        dispersive_mim, extremal_couplings,
                        pure_quadratic_points, strong_parameters)
from .errors import (BranchDiscontinuityError, DegenerateConfigurationError,
                     FitFailedError, ModelValidityWarning, RootNotFoundError)
from .fitting import (FitResult, ModeTrace, SweepData, TransmissionSweep,
                      fit_loss_budget, fit_resonance_map,
                      fit_transmission_global, loss_budget_model,
                      map_model_detuning)
from .resonance import (kappa as position_kappa, mate_detuning, mim_detuning,
                        solve_resonant_k, trace_branch)
from .spectra import CavityModel, position_sweep, spectrum_map
from .tilt import TILT_VALIDITY_LIMIT, TiltedCavity, flexure_sagitta, \
    wavelength_spectrum

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_FIT = 3

# pinned input schemas; headers are mandatory and must match exactly
DATA_COLUMNS = {
    "map": ("piezo_x_raw", "piezo_L_raw", "mode_id", "detuning_raw"),
    "loss": ("x_m", "kappa_rad_s", "r_res", "sigma_kappa", "sigma_r"),
    "transmission": ("mode_l", "lambda_m", "p_t", "sigma"),
}

log = logging.getLogger("mate_optix.cli")


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit code 2."""


class DataFileError(Exception):
    """Malformed input data file; maps to exit code 2."""


# ---------------------------------------------------------------------------
# deterministic formatting


def format_float(value: float) -> str:
    """17 significant digits: enough to round-trip any binary double."""
    v = float(value) + 0.0  # normalize -0.0
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format_float(value)


def write_csv(path: Path, header: Sequence[str],
              rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")
    log.info("wrote %s (%d rows)", path, len(rows))


def json_text(obj: Any, indent: int = 0) -> str:
    """Render JSON with sorted keys and 17-significant-digit floats.

    The stdlib encoder writes floats with repr (shortest round-trip form),
    which honors a different contract than the fixed-precision one the
    output files pin, hence this small recursive writer. Non-finite
    numbers become null.
    """
    pad = "  " * indent
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return format_float(v) if math.isfinite(v) else "null"
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, Mapping):
        if not obj:
            return "{}"
        parts = [f'{pad}  {json.dumps(str(k))}: {json_text(v, indent + 1)}'
                 for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))]
        return "{\n" + ",\n".join(parts) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not len(obj):
            return "[]"
        parts = [f"{pad}  {json_text(v, indent + 1)}" for v in obj]
        return "[\n" + ",\n".join(parts) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path: Path, obj: Any) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(json_text(obj) + "\n")
    log.info("wrote %s", path)


def _note(message: str) -> None:
    print(f"mate-optix: note: {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """One parsed invocation: the command, option flags and the TOML tables.

    Construction validates the cross-cutting pieces (config readable,
    output directory creatable, thread count sane); the per-command model
    parameters are validated by the module constructors before any output
    file is opened.
    """

    command: str
    fit_kind: str | None
    config_path: Path
    out_dir: Path
    threads: int
    seed: int | None
    settings: Mapping[str, Any]

    def __post_init__(self) -> None:
        if self.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {self.threads}")
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(
                f"cannot create output directory {self.out_dir}: {exc}")

    def table(self, name: str) -> Mapping[str, Any]:
        value = self.settings.get(name)
        if not isinstance(value, Mapping):
            raise ConfigError(f"missing [{name}] table in {self.config_path}")
        return value

    def resolve(self, relative: str) -> Path:
        """Paths inside the config file are relative to its directory."""
        path = Path(relative)
        if not path.is_absolute():
            path = self.config_path.parent / path
        return path

    def out(self, name: str) -> Path:
        return self.out_dir / name


def load_settings(path: Path) -> Mapping[str, Any]:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")


def _subtable(table: Mapping[str, Any], key: str,
              where: str) -> Mapping[str, Any]:
    value = table.get(key)
    if not isinstance(value, Mapping):
        raise ConfigError(f"missing [{where}.{key}] table")
    return value


def _number(table: Mapping[str, Any], key: str, where: str,
            default: float | None = None) -> float:
    if key not in table:
        if default is not None:
            return default
        raise ConfigError(f"missing key {key!r} in [{where}]")
    value = table[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"[{where}] {key} must be a number, got {value!r}")
    return float(value)


def _integer(table: Mapping[str, Any], key: str, where: str,
             default: int | None = None) -> int:
    if key not in table:
        if default is not None:
            return default
        raise ConfigError(f"missing key {key!r} in [{where}]")
    value = table[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"[{where}] {key} must be an integer, got {value!r}")
    return value


def build_mirror(table: Mapping[str, Any], where: str) -> Mirror:
    """Either power transmission t_sq (plus loss_s) or explicit r_mag/t_mag."""
    loss_s = _number(table, "loss_s", where, default=0.0)
    r_phase = _number(table, "r_phase", where, default=math.pi)
    try:
        if "t_sq" in table:
            t_sq = _number(table, "t_sq", where)
            r_sq = 1.0 - t_sq - loss_s
            if t_sq < 0.0 or r_sq < 0.0:
                raise ValueError(f"t_sq + loss_s must lie in [0, 1], "
                                 f"got {t_sq} + {loss_s}")
            return Mirror(math.sqrt(r_sq), math.sqrt(t_sq), r_phase, loss_s)
        if "r_mag" in table:
            return Mirror(_number(table, "r_mag", where),
                          _number(table, "t_mag", where), r_phase, loss_s)
    except ValueError as exc:
        raise ConfigError(f"[{where}]: {exc}")
    raise ConfigError(f"[{where}] needs t_sq or r_mag/t_mag")


def build_membrane(table: Mapping[str, Any], where: str,
                   k_eval: float | None = None) -> MembraneSpec:
    kind = table.get("kind", "slab")
    try:
        if kind == "slab":
            return MembraneSpec.slab(_number(table, "index_n", where),
                                     _number(table, "thickness_d", where))
        if kind == "thin":
            if k_eval is None:
                raise ConfigError(f"[{where}] kind 'thin' needs a branch "
                                  "wavenumber; give [model] branch_n")
            return thin_membrane_coefficients(
                _number(table, "index_n", where),
                _number(table, "thickness_d", where), k_eval)
        if kind == "coeffs":
            r_mag = _number(table, "r_mag", where)
            t_default = math.sqrt(max(1.0 - r_mag * r_mag, 0.0))
            return MembraneSpec.coefficients(
                r_mag, _number(table, "r_phase", where, default=math.pi),
                _number(table, "t_mag", where, default=t_default))
    except ValueError as exc:
        raise ConfigError(f"[{where}]: {exc}")
    raise ConfigError(f"[{where}] kind must be slab, thin or coeffs, "
                      f"got {kind!r}")


def build_mode(table: Mapping[str, Any], where: str) -> MechanicalMode:
    try:
        return MechanicalMode(_number(table, "mass_kg", where),
                              _number(table, "omega_mech", where))
    except ValueError as exc:
        raise ConfigError(f"[{where}]: {exc}")


def build_grid(table: Mapping[str, Any], prefix: str,
               where: str) -> np.ndarray:
    lo = _number(table, f"{prefix}_min", where)
    hi = _number(table, f"{prefix}_max", where)
    points = _integer(table, f"{prefix}_points", where)
    if points < 2:
        raise ConfigError(f"[{where}] {prefix}_points must be >= 2")
    if not hi > lo:
        raise ConfigError(f"[{where}] needs {prefix}_max > {prefix}_min")
    return np.linspace(lo, hi, points)


def _model_pieces(cfg: RunConfig):
    """(mirror1, mirror2, membrane, length_l, branch_n) from [model]."""
    model = cfg.table("model")
    length_l = _number(model, "length_l", "model")
    if length_l <= 0.0:
        raise ConfigError("[model] length_l must be positive")
    branch_n = _integer(model, "branch_n", "model")
    if branch_n < 1:
        raise ConfigError("[model] branch_n must be >= 1")
    mirror1 = build_mirror(_subtable(model, "mirror1", "model"),
                           "model.mirror1")
    mirror2 = build_mirror(_subtable(model, "mirror2", "model"),
                           "model.mirror2")
    membrane = build_membrane(_subtable(model, "membrane", "model"),
                              "model.membrane",
                              k_eval=math.pi * branch_n / length_l)
    return mirror1, mirror2, membrane, length_l, branch_n


def _report_warnings(caught: Sequence[warnings.WarningMessage]) -> None:
    seen: dict[str, None] = {}
    for record in caught:
        if isinstance(record.message, ModelValidityWarning):
            seen.setdefault(str(record.message))
        else:
            log.debug("suppressed warning: %s", record.message)
    for message in seen:
        _note(message)


# ---------------------------------------------------------------------------
# spectrum


def cmd_spectrum(cfg: RunConfig) -> int:
    mirror1, mirror2, membrane, length_l, branch_n = _model_pieces(cfg)
    eps = _number(cfg.table("model"), "mode_match_eps", "model", default=1.0)
    try:
        model = CavityModel(mirror1=mirror1, mirror2=mirror2,
                            membrane=membrane, length_l=length_l,
                            mode_match_eps=eps)
    except ValueError as exc:
        raise ConfigError(f"[model]: {exc}")
    table = cfg.table("spectrum")
    x_grid = build_grid(table, "x", "spectrum")
    detuning_grid = build_grid(table, "detuning", "spectrum")
    half_span = _number(table, "sweep_half_span", "spectrum", default=6.0)
    sweep_points = _integer(table, "sweep_points", "spectrum", default=481)

    sweep = None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ModelValidityWarning)
        reflection = spectrum_map(model, x_grid, detuning_grid, branch_n)
        try:
            sweep = position_sweep(model, x_grid, branch_n,
                                   half_span=half_span, points=sweep_points)
        except FitFailedError as exc:
            # a contrast-free configuration (no mode matching, or a
            # lossless single port) has no dip to measure; the map is
            # still well defined
            _note(f"linewidth sweep skipped: {exc}")
    _report_warnings(caught)

    map_rows = [(x, d, reflection.values[i, j])
                for i, x in enumerate(x_grid)
                for j, d in enumerate(detuning_grid)]
    write_csv(cfg.out("map.csv"),
              ("x_m", "detuning_rad_s", "reflected_power"), map_rows)
    if sweep is not None:
        kappas, r_res = sweep
        write_csv(cfg.out("sweep.csv"),
                  ("x_m", "kappa_rad_s", "resonant_reflection"),
                  list(zip(x_grid, kappas, r_res)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# couplings


def _kappa_along_branch(dx, placement: str, branch_n: int,
                        membrane: MembraneSpec, mirror1: Mirror,
                        mirror2: Mirror, length_l: float):
    """Decay rate on the resonance branch for a membrane at offset dx."""
    if placement == "mim":
        delta_omega = mim_detuning(dx, branch_n, membrane, length_l)
        x_pos = length_l / 2.0 + np.asarray(dx, dtype=float)
    else:
        delta_omega = mate_detuning(dx, branch_n, membrane, length_l)
        if placement == "mate-input":
            x_pos = np.asarray(dx, dtype=float)
        else:
            x_pos = length_l - np.asarray(dx, dtype=float)
    k_res = math.pi * branch_n / length_l + np.asarray(delta_omega) / C
    return position_kappa(x_pos, k_res, membrane, mirror1, mirror2, length_l)


def _dispersive(dx, geometry: str, branch_n: int, membrane: MembraneSpec,
                length_l: float):
    if geometry == "mim":
        return dispersive_mim(dx, branch_n, membrane, length_l)
    return dispersive_mate(dx, branch_n, membrane, length_l)


def _quadratic_strong(dx, geometry: str, placement: str, branch_n: int,
                      membrane: MembraneSpec, mirror1: Mirror,
                      mirror2: Mirror, length_l: float,
                      mode: MechanicalMode):
    g1, g2 = _dispersive(dx, geometry, branch_n, membrane, length_l)
    kap = _kappa_along_branch(dx, placement, branch_n, membrane, mirror1,
                              mirror2, length_l)
    return strong_parameters(g1, g2, kap, mode)[1]


def _peak_quadratic_strong(geometry: str, placement: str, branch_n: int,
                           membrane: MembraneSpec, mirror1: Mirror,
                           mirror2: Mirror, length_l: float,
                           mode: MechanicalMode) -> tuple[float, float]:
    """Location and signed value of the largest |A2| over one period.

    The peak can be orders of magnitude narrower than the period (its
    width shrinks with the membrane transmission), so a dense scan seeds
    a bounded refinement instead of trusting a display-sized grid.
    """
    period = length_l / branch_n
    scan = np.linspace(0.0, period, 200001)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ModelValidityWarning)
        a2 = np.abs(_quadratic_strong(scan, geometry, placement, branch_n,
                                      membrane, mirror1, mirror2, length_l,
                                      mode))
        peak = int(np.argmax(a2))
        lo = scan[max(peak - 1, 0)]
        hi = scan[min(peak + 1, scan.size - 1)]
        result = minimize_scalar(
            lambda d: -abs(_quadratic_strong(
                float(d), geometry, placement, branch_n, membrane, mirror1,
                mirror2, length_l, mode)),
            bounds=(lo, hi), method="bounded",
            options={"xatol": period * 1e-12})
        dx_peak = float(result.x)
        value = float(_quadratic_strong(dx_peak, geometry, placement,
                                        branch_n, membrane, mirror1, mirror2,
                                        length_l, mode))
    return dx_peak, value


def _ratio(edge: float, center: float) -> float:
    return abs(edge) / abs(center) if center != 0.0 else math.nan


def _couplings_extrema(membrane: MembraneSpec, mirror1: Mirror,
                       mirror2: Mirror, length_l: float, branch_n: int,
                       mode: MechanicalMode) -> dict[str, Any]:
    report: dict[str, Any] = {}
    peaks: dict[str, dict[str, float]] = {}
    b_method = "numeric" if mirror2.t_mag != 0.0 else "analytic"
    for geometry, placement in (("mim", "mim"), ("mate", "mate-input")):
        extrema = extremal_couplings(membrane, length_l, branch_n, geometry)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ModelValidityWarning)
            locations, limit = dissipative_maxima(membrane, branch_n,
                                                  length_l, mode, placement)
            b_values = [dissipative_b(loc, branch_n, membrane, mirror1,
                                      mirror2, length_l, mode,
                                      placement=placement, method=b_method)
                        for loc in locations]
        a2_dx, a2_value = _peak_quadratic_strong(
            geometry, placement, branch_n, membrane, mirror1, mirror2,
            length_l, mode)
        report[geometry] = {
            "g1": [{"dx_m": e.dx, "value": e.value}
                   for e in extrema if e.kind == "g1max"],
            "g2": [{"dx_m": e.dx, "value": e.value}
                   for e in extrema if e.kind == "g2max"],
            "b": {"locations_m": list(locations),
                  "values": b_values,
                  "low_transmission_limit": limit},
            "a2": {"dx_m": a2_dx, "value": a2_value},
        }
        peaks[geometry] = {
            "g1": max(abs(e.value) for e in extrema if e.kind == "g1max"),
            "g2": max(abs(e.value) for e in extrema if e.kind == "g2max"),
            "b": max(abs(v) for v in b_values),
            "a2": abs(a2_value),
        }
    report["pure_quadratic_points_m"] = pure_quadratic_points(
        membrane, branch_n, length_l)
    report["edge_over_center_ratios"] = {
        name: _ratio(peaks["mate"][name], peaks["mim"][name])
        for name in ("g1", "g2", "b", "a2")}
    return report


def cmd_couplings(cfg: RunConfig) -> int:
    mirror1, mirror2, membrane, length_l, branch_n = _model_pieces(cfg)
    mode = build_mode(_subtable(cfg.table("model"), "mode", "model"),
                      "model.mode")
    table = cfg.table("couplings")
    placement = table.get("placement", "mim")
    if placement not in ("mim", "mate-input", "mate-backstop"):
        raise ConfigError(f"[couplings] placement must be mim, mate-input "
                          f"or mate-backstop, got {placement!r}")
    geometry = "mim" if placement == "mim" else "mate"
    points = _integer(table, "points", "couplings", default=1001)
    if points < 2:
        raise ConfigError("[couplings] points must be >= 2")
    period = length_l / branch_n  # half-wave travel, lambda_N / 2
    dx_min = _number(table, "dx_min", "couplings", default=0.0)
    dx_max = _number(table, "dx_max", "couplings", default=period)
    if not dx_max > dx_min:
        raise ConfigError("[couplings] needs dx_max > dx_min")
    threshold_rel = _number(table, "g1_threshold_rel", "couplings",
                            default=1e-9)

    dx = np.linspace(dx_min, dx_max, points)
    # pin the exact linear-coupling zeros into the grid so the pure
    # quadratic rows are present whatever the spacing
    if geometry == "mim":
        zeros = [0.0, period / 2.0]
    else:
        zeros = pure_quadratic_points(membrane, branch_n, length_l)
    zeros = [z for z in zeros if dx_min <= z <= dx_max]
    dx = np.union1d(dx, np.asarray(zeros, dtype=float))

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ModelValidityWarning)
        g1, g2 = _dispersive(dx, geometry, branch_n, membrane, length_l)
        kap = _kappa_along_branch(dx, placement, branch_n, membrane, mirror1,
                                  mirror2, length_l)
        # the closed dissipative forms cover a single-port cavity; fall
        # back to the numeric derivative when the far mirror transmits
        method = ("numeric" if placement == "mate-backstop"
                  or mirror2.t_mag != 0.0 else "analytic")
        b_tilde = dissipative_b(dx, branch_n, membrane, mirror1, mirror2,
                                length_l, mode, placement=placement,
                                method=method)
        a1, a2 = strong_parameters(g1, g2, kap, mode)
        extrema = _couplings_extrema(membrane, mirror1, mirror2, length_l,
                                     branch_n, mode)
    _report_warnings(caught)

    threshold = threshold_rel * float(np.max(np.abs(g1)))
    quad_flag = np.abs(g1) <= threshold
    rows = list(zip(dx, g1, g2, kap, b_tilde, a1, a2, quad_flag))
    write_csv(cfg.out("couplings.csv"),
              ("dx_m", "g1_rad_s_m", "g2_rad_s_m2", "kappa_rad_s",
               "b_dissipative", "a1_strong", "a2_strong", "pure_quadratic"),
              rows)
    write_json(cfg.out("extrema.json"), extrema)
    return EXIT_OK


# ---------------------------------------------------------------------------
# resonances


def cmd_resonances(cfg: RunConfig) -> int:
    mirror1, mirror2, membrane, length_l, branch_n = _model_pieces(cfg)
    table = cfg.table("resonances")
    branches = table.get("branches", [branch_n])
    if (not isinstance(branches, list) or not branches
            or not all(isinstance(b, int) and not isinstance(b, bool)
                       and b >= 1 for b in branches)):
        raise ConfigError("[resonances] branches must be a list of "
                          "integers >= 1")
    x_grid = build_grid(table, "x", "resonances")

    rows = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ModelValidityWarning)
        for branch in branches:
            anchor = branch * fsr(length_l)
            solutions = trace_branch(x_grid, branch, membrane, mirror1,
                                     mirror2, length_l)
            for x, sol in zip(x_grid, solutions):
                rows.append((branch, x, sol.wavenumber_k, sol.omega,
                             sol.omega - anchor, sol.kappa))
    _report_warnings(caught)

    write_csv(cfg.out("resonances.csv"),
              ("branch_n", "x_m", "wavenumber_rad_m", "omega_rad_s",
               "detuning_rad_s", "kappa_rad_s"), rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# tilt


def cmd_tilt(cfg: RunConfig) -> int:
    model = cfg.table("model")
    mirror1 = build_mirror(_subtable(model, "mirror1", "model"),
                           "model.mirror1")
    membrane = build_membrane(_subtable(model, "membrane", "model"),
                              "model.membrane")
    table = cfg.table("tilt")
    phi = table.get("phi")
    if phi is not None:
        phi = _number(table, "phi", "tilt")
    try:
        cavity = TiltedCavity(x0=_number(table, "gap_x0", "tilt"),
                              theta=_number(table, "theta", "tilt"),
                              sigma=_number(table, "beam_sigma", "tilt"),
                              mirror1=mirror1, membrane=membrane, phi=phi)
    except ValueError as exc:
        raise ConfigError(f"[tilt]: {exc}")
    lambda_grid = build_grid(table, "wavelength", "tilt")
    if np.any(lambda_grid <= 0.0):
        raise ConfigError("[tilt] wavelengths must be positive")

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ModelValidityWarning)
        power = wavelength_spectrum(cavity, lambda_grid)
    _report_warnings(caught)
    worst = (2.0 * math.pi / float(np.min(lambda_grid))
             * abs(cavity.theta) * cavity.sigma)
    if worst >= TILT_VALIDITY_LIMIT:
        _note(f"k*theta*sigma reaches {worst:.3g}, beyond the quadratic "
              f"expansion validity limit {TILT_VALIDITY_LIMIT}")

    write_csv(cfg.out("tilt.csv"), ("wavelength_m", "transmitted_power"),
              list(zip(lambda_grid, power)))

    if "flexure_roc_m" in table:
        roc = _number(table, "flexure_roc_m", "tilt")
        offsets = table.get("flexure_offsets_m")
        if (not isinstance(offsets, list) or not offsets
                or not all(isinstance(v, (int, float))
                           and not isinstance(v, bool) for v in offsets)):
            raise ConfigError("[tilt] flexure_offsets_m must be a "
                              "non-empty list of numbers")
        try:
            sagittas = [flexure_sagitta(roc, float(v)) for v in offsets]
        except ValueError as exc:
            raise ConfigError(f"[tilt]: {exc}")
        write_csv(cfg.out("flexure.csv"),
                  ("lateral_offset_m", "sagitta_m"),
                  list(zip([float(v) for v in offsets], sagittas)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# fits


def read_data_rows(path: Path,
                   columns: Sequence[str]) -> list[tuple[int, tuple[float, ...]]]:
    """Rows of a pinned-schema CSV as (line number, values).

    The header line is mandatory and must match the schema exactly; every
    field must parse as a finite float with a '.' decimal separator. Any
    violation reports the offending line. A file with no data rows is an
    error.
    """
    if not path.is_file():
        raise DataFileError(f"{path}: file not found")
    expected = ",".join(columns)
    rows: list[tuple[int, tuple[float, ...]]] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFileError(f"{path}:1: empty file, expected header "
                                f"{expected!r}")
        if [h.strip() for h in header] != list(columns):
            raise DataFileError(f"{path}:1: expected header {expected!r}, "
                                f"got {','.join(header)!r}")
        for lineno, record in enumerate(reader, start=2):
            if not record or (len(record) == 1 and not record[0].strip()):
                continue
            if len(record) != len(columns):
                raise DataFileError(
                    f"{path}:{lineno}: expected {len(columns)} fields, "
                    f"got {len(record)}")
            values = []
            for name, field in zip(columns, record):
                try:
                    value = float(field)
                except ValueError:
                    raise DataFileError(
                        f"{path}:{lineno}: non-numeric value {field!r} "
                        f"in column {name}")
                if not math.isfinite(value):
                    raise DataFileError(
                        f"{path}:{lineno}: non-finite value in column {name}")
                values.append(value)
            rows.append((lineno, tuple(values)))
    if not rows:
        raise DataFileError(f"{path}: no data rows")
    return rows


def _integer_field(value: float, lineno: int, path: Path, name: str) -> int:
    if not float(value).is_integer():
        raise DataFileError(f"{path}:{lineno}: column {name} must hold an "
                            f"integer, got {value!r}")
    return int(value)


def _block_sigma(values: np.ndarray, path: Path, name: str):
    """A sigma column must be all positive (used) or all zero (absent)."""
    if np.all(values == 0.0):
        return None
    if np.any(values <= 0.0):
        raise DataFileError(f"{path}: column {name} mixes zero and positive "
                            "entries; use all zeros to drop the weights")
    return values


def _init_values(table: Mapping[str, Any], where: str) -> dict[str, float]:
    init = _subtable(table, "init", where)
    out = {}
    for key, value in init.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{where}.init] {key} must be a number, "
                              f"got {value!r}")
        out[str(key)] = float(value)
    if not out:
        raise ConfigError(f"[{where}.init] is empty")
    return out


def _run_map_fit(cfg: RunConfig, table: Mapping[str, Any],
                 data_path: Path) -> tuple[FitResult, list, tuple[str, ...]]:
    model = cfg.table("model")
    length_l = _number(model, "length_l", "model")
    membrane_model = table.get("membrane_model", "thin")
    refractive_index = _number(table, "refractive_index", "fit.map",
                               default=2.0)
    max_iterations = _integer(table, "max_iterations", "fit.map", default=300)
    init = _init_values(table, "fit.map")

    rows = read_data_rows(data_path, DATA_COLUMNS["map"])
    grouped: dict[int, list[tuple[float, ...]]] = {}
    for lineno, values in rows:
        branch = _integer_field(values[2], lineno, data_path, "mode_id")
        if branch < 1:
            raise DataFileError(f"{data_path}:{lineno}: mode_id must be >= 1")
        grouped.setdefault(branch, []).append(values)
    traces = []
    for branch, members in grouped.items():
        arr = np.asarray(members)
        try:
            traces.append(ModeTrace(raw_x=arr[:, 0], raw_detuning=arr[:, 3],
                                    branch_n=branch))
        except ValueError as exc:
            raise DataFileError(f"{data_path}: mode {branch}: {exc}")

    try:
        result = fit_resonance_map(traces, init, length_l=length_l,
                                   membrane_model=membrane_model,
                                   refractive_index=refractive_index,
                                   max_iterations=max_iterations)
    except KeyError as exc:
        raise ConfigError(f"[fit.map.init] missing key {exc}")
    except ValueError as exc:
        raise ConfigError(f"fit map: {exc}")

    x_center, x_half = result.extras["x_normalization"]
    v_center, v_half = result.extras["detuning_normalization"]
    x_poly = result.extras["x_stretch"]
    v_poly = result.extras["detuning_stretch"]
    x_scale = result.value("x_scale")
    det_scale = result.value("det_scale")
    if membrane_model == "coeffs":
        r_mag = result.value("r_mag")
        fitted = MembraneSpec.coefficients(
            r_mag, result.value("r_phase"),
            math.sqrt(max(1.0 - r_mag * r_mag, 0.0)))

        def membrane_for(branch: int) -> MembraneSpec:
            return fitted
    elif membrane_model == "slab":
        slab = MembraneSpec.slab(refractive_index, result.value("thickness_d"))

        def membrane_for(branch: int) -> MembraneSpec:
            return slab
    else:
        thickness = result.value("thickness_d")

        def membrane_for(branch: int) -> MembraneSpec:
            return thin_membrane_coefficients(
                refractive_index, thickness, math.pi * branch / length_l)

    offsets = {branch: result.value(f"offset_{i}")
               for i, branch in enumerate(grouped)}
    membranes = {branch: membrane_for(branch) for branch in grouped}
    residual_rows = []
    for lineno, values in rows:
        raw_x, raw_l, mode_id, raw_det = values
        branch = int(mode_id)
        x_phys = x_scale * x_poly((raw_x - x_center) / x_half)
        det_phys = det_scale * v_poly((raw_det - v_center) / v_half)
        model_det = offsets[branch] + float(np.ravel(map_model_detuning(
            x_phys, branch, membranes[branch], length_l))[0])
        residual_rows.append((raw_x, raw_l, branch, raw_det, x_phys,
                              det_phys, model_det, det_phys - model_det))
    header = ("piezo_x_raw", "piezo_L_raw", "mode_id", "detuning_raw",
              "x_m", "detuning_rad_s", "model_rad_s", "residual_rad_s")
    return result, residual_rows, header


def _run_loss_fit(cfg: RunConfig, table: Mapping[str, Any],
                  data_path: Path) -> tuple[FitResult, list, tuple[str, ...]]:
    mirror1, mirror2, membrane, length_l, branch_n = _model_pieces(cfg)
    del mirror1, mirror2  # the loss budget fits the mirror parameters
    max_iterations = _integer(table, "max_iterations", "fit.loss",
                              default=200)
    init = _init_values(table, "fit.loss")

    rows = read_data_rows(data_path, DATA_COLUMNS["loss"])
    data = np.asarray([values for _, values in rows])
    x = data[:, 0]
    sigma_kappa = _block_sigma(data[:, 3], data_path, "sigma_kappa")
    sigma_r = _block_sigma(data[:, 4], data_path, "sigma_r")
    try:
        kappa_data = SweepData(x, data[:, 1], sigma=sigma_kappa)
        reflection_data = SweepData(x, data[:, 2], sigma=sigma_r)
    except ValueError as exc:
        raise DataFileError(f"{data_path}: {exc}")

    try:
        result = fit_loss_budget(kappa_data, reflection_data, init,
                                 membrane=membrane, length_l=length_l,
                                 branch_n=branch_n,
                                 max_iterations=max_iterations)
    except KeyError as exc:
        raise ConfigError(f"[fit.loss.init] missing key {exc}")
    except ValueError as exc:
        raise ConfigError(f"fit loss: {exc}")

    resonant_k = np.asarray([solve_resonant_k(
        CavityGeometry(length_l=length_l, membrane_x=float(xi),
                       mode_index_n=branch_n,
                       wavenumber_k=math.pi * branch_n / length_l),
        membrane, branch_n=branch_n).wavenumber_k for xi in x])
    params = tuple(result.value(name) for name in
                   ("mode_match_eps", "t1_sq", "loss_s1", "t2_sq"))
    kappa_model, reflection_model = loss_budget_model(
        x, resonant_k, params, membrane, length_l)
    residual_rows = [
        (xi, ki, km, ki - km, ri, rm, ri - rm)
        for xi, ki, km, ri, rm in zip(x, data[:, 1], kappa_model,
                                      data[:, 2], reflection_model)]
    header = ("x_m", "kappa_rad_s", "kappa_model_rad_s",
              "kappa_residual_rad_s", "r_res", "r_model", "r_residual")
    return result, residual_rows, header


def _run_transmission_fit(cfg: RunConfig, table: Mapping[str, Any],
                          data_path: Path
                          ) -> tuple[FitResult, list, tuple[str, ...]]:
    model = cfg.table("model")
    membrane_table = _subtable(model, "membrane", "model")
    if membrane_table.get("kind", "slab") != "slab":
        raise ConfigError("fit transmission needs a slab membrane "
                          "([model.membrane] kind = 'slab')")
    thickness_d = _number(membrane_table, "thickness_d", "model.membrane")
    refractive_index = _number(membrane_table, "index_n", "model.membrane")
    beam_sigma = _number(table, "beam_sigma", "fit.transmission")
    l0_min = _integer(table, "l0_min", "fit.transmission")
    l0_max = _integer(table, "l0_max", "fit.transmission")
    if l0_max < l0_min:
        raise ConfigError("[fit.transmission] needs l0_max >= l0_min")
    max_iterations = _integer(table, "max_iterations", "fit.transmission",
                              default=150)
    init = _init_values(table, "fit.transmission")

    rows = read_data_rows(data_path, DATA_COLUMNS["transmission"])
    grouped: dict[int, list[tuple[float, ...]]] = {}
    for lineno, values in rows:
        offset = _integer_field(values[0], lineno, data_path, "mode_l")
        grouped.setdefault(offset, []).append(values)
    sweeps = []
    for offset, members in grouped.items():
        arr = np.asarray(members)
        sigma = _block_sigma(arr[:, 3], data_path, "sigma")
        try:
            sweeps.append(TransmissionSweep(mode_offset=offset,
                                            wavelengths=arr[:, 1],
                                            power=arr[:, 2], sigma=sigma))
        except ValueError as exc:
            raise DataFileError(f"{data_path}: mode {offset}: {exc}")

    try:
        result = fit_transmission_global(
            sweeps, init, l0_range=range(l0_min, l0_max + 1),
            thickness_d=thickness_d, refractive_index=refractive_index,
            beam_sigma=beam_sigma, threads=cfg.threads,
            max_iterations=max_iterations)
    except KeyError as exc:
        raise ConfigError(f"[fit.transmission.init] missing key {exc}")
    except ValueError as exc:
        raise ConfigError(f"fit transmission: {exc}")

    gaps = dict(zip(grouped, result.extras["gap_positions"]))
    gap_ref = gaps[0]
    r1_sq = result.value("r1_sq")
    theta_0 = result.value("theta_0")
    slope_a = result.value("tilt_slope_a")
    mirror1 = Mirror(math.sqrt(r1_sq), math.sqrt(max(1.0 - r1_sq, 0.0)))
    slab = MembraneSpec.slab(refractive_index, thickness_d)
    residual_rows = []
    for offset, members in grouped.items():
        arr = np.asarray(members)
        theta = theta_0 - slope_a * (gaps[offset] - gap_ref)
        cavity = TiltedCavity(x0=gaps[offset], theta=theta, sigma=beam_sigma,
                              mirror1=mirror1, membrane=slab)
        model_power = wavelength_spectrum(cavity, arr[:, 1])
        for values, mp in zip(members, model_power):
            residual_rows.append((offset, values[1], values[2], mp,
                                  values[2] - mp))
    header = ("mode_l", "lambda_m", "p_t", "model_p_t", "residual")
    return result, residual_rows, header


_FIT_RUNNERS: dict[str, Callable] = {
    "map": _run_map_fit,
    "loss": _run_loss_fit,
    "transmission": _run_transmission_fit,
}


def cmd_fit(cfg: RunConfig) -> int:
    kind = cfg.fit_kind
    if kind not in _FIT_RUNNERS:
        raise ConfigError(f"unknown fit kind {kind!r}")
    fit_table = cfg.table("fit")
    table = _subtable(fit_table, kind, "fit")
    data_key = table.get("data")
    if not isinstance(data_key, str) or not data_key:
        raise ConfigError(f"[fit.{kind}] needs a data file path "
                          "(key 'data')")
    data_path = cfg.resolve(data_key)
    log.info("fit %s on %s", kind, data_path)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ModelValidityWarning)
        result, residual_rows, header = _FIT_RUNNERS[kind](cfg, table,
                                                           data_path)
    _report_warnings(caught)

    write_json(cfg.out("fit.json"), result.as_dict())
    write_csv(cfg.out("residuals.csv"), header, residual_rows)
    for flag in result.flags:
        _note(f"fit flag: {flag}")
    if not result.converged:
        print("mate-optix: error: fit: did not converge "
              f"(flags: {', '.join(result.flags) or 'none'})",
              file=sys.stderr)
        return EXIT_FIT
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


_COMMANDS: dict[str, Callable[[RunConfig], int]] = {
    "spectrum": cmd_spectrum,
    "couplings": cmd_couplings,
    "resonances": cmd_resonances,
    "tilt": cmd_tilt,
    "fit": cmd_fit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mate-optix",
        description="Membrane cavity spectra, couplings and data fits.")
    parser.add_argument("--config", type=Path,
                        default=Path("mate-optix.toml"), metavar="PATH",
                        help="TOML configuration file "
                             "(default: mate-optix.toml)")
    parser.add_argument("--out", type=Path, default=Path("."), metavar="DIR",
                        help="output directory (default: current directory)")
    parser.add_argument("--threads", type=int, default=1, metavar="N",
                        help="worker threads for scans that support them")
    parser.add_argument("--seed", type=int, default=None, metavar="N",
                        help="seed for any randomized strategy; the current "
                             "commands are all deterministic")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")
    sub.add_parser("spectrum",
                   help="reflection map and linewidth sweep to "
                        "map.csv / sweep.csv")
    sub.add_parser("couplings",
                   help="coupling rates along the membrane travel to "
                        "couplings.csv / extrema.json")
    sub.add_parser("resonances",
                   help="resonance branches over position to resonances.csv")
    sub.add_parser("tilt",
                   help="tilted-cavity wavelength spectrum to tilt.csv")
    fit = sub.add_parser("fit", help="fit a measurement file, writing "
                                     "fit.json / residuals.csv")
    fit.add_argument("kind", choices=("map", "loss", "transmission"),
                     metavar="KIND",
                     help="map, loss or transmission")
    return parser


def _configure_logging() -> None:
    name = os.environ.get("MATE_OPTIX_LOG", "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(category: str, exc: BaseException) -> None:
    reason = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"mate-optix: error: {category}: {reason}", file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args.config)
        cfg = RunConfig(command=args.command,
                        fit_kind=getattr(args, "kind", None),
                        config_path=args.config, out_dir=args.out,
                        threads=args.threads, seed=args.seed,
                        settings=settings)
        log.info("%s with config %s", cfg.command, cfg.config_path)
        if cfg.seed is not None:
            log.debug("seed %d accepted (no randomized strategy in use)",
                      cfg.seed)
        return _COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        _fail("config", exc)
        return EXIT_INPUT
    except DataFileError as exc:
        _fail("data", exc)
        return EXIT_INPUT
    except FitFailedError as exc:
        if args.command == "fit":
            _fail("fit", exc)
            return EXIT_FIT
        # outside the fit command a failed internal fit means the model
        # cannot produce the requested quantity
        _fail("model", exc)
        return EXIT_INPUT
    except (DegenerateConfigurationError, BranchDiscontinuityError,
            RootNotFoundError, ValueError) as exc:
        _fail("model", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
