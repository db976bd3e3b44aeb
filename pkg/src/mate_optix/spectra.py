"""Transfer-matrix forward model of the mirror-membrane-mirror stack.

Composes the full reflection and transmission amplitudes of the two-mirror
cavity with a membrane inside, including the input mirror's internal loss
(single-pass amplitude factor applied at its intracavity face) and the
mode-matching fraction of input power that addresses the fundamental
transverse mode. Produces detuning traces, position-detuning maps, and
Lorentzian linewidth extractions from them.

The composition runs as a right-to-left reflectivity recursion rather than
raw 2x2 matrix products, which stays finite for a closed back mirror
(t2 = 0) where the matrix form divides by zero.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .constants import C
from .core import CavityGeometry, MembraneSpec, Mirror, fsr, membrane_amplitudes
from .errors import (
    DegenerateConfigurationError,
    FitFailedError,
    ModelValidityWarning,
)
from .resonance import kappa as kappa_closed_form
from .resonance import solve_resonant_k


@dataclass(frozen=True)
class CavityModel:
    """Everything the forward model needs: optics, geometry, power budget.

    mirror1 carries the input coupler's internal loss in its loss_s field;
    mirror2's internal loss must instead be folded into its transmission
    magnitude (reflection measurements cannot distinguish the two).
    mode_match_eps is the fraction of input power coupled to the
    fundamental transverse mode; the rest reflects without entering.
    """

    mirror1: Mirror
    mirror2: Mirror
    membrane: MembraneSpec
    length_l: float
    mode_match_eps: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.mode_match_eps <= 1.0:
            raise ValueError("mode_match_eps must lie in [0, 1]")
        if self.length_l <= 0.0:
            raise ValueError("length_l must be positive")
        if self.mirror2.loss_s != 0.0:
            raise ValueError(
                "mirror2 loss is not modeled separately; fold it into t_mag")


@dataclass(frozen=True)
class SpectrumMap:
    """Normalized reflected power on a position x detuning grid."""

    x_grid: np.ndarray
    detuning_grid: np.ndarray
    values: np.ndarray
    coarse: bool = False

    def __post_init__(self):
        if self.values.shape != (len(self.x_grid), len(self.detuning_grid)):
            raise ValueError("values shape must match the two grids")
        if self.values.min() < -1e-9 or self.values.max() > 1.0 + 1e-9:
            raise ValueError("normalized power out of [0, 1] range")


def _stack_fields(model: CavityModel, k, x: float):
    """(r, t, absorbed) of the full stack; vectorized over wavenumber k.

    absorbed is the fraction of incident power dissipated by the input
    mirror's internal loss, computed from the intracavity field so that
    |r|^2 + |t|^2 + absorbed = 1 holds for the lossless-membrane stack.
    """
    if not 0.0 < x < model.length_l:
        raise ValueError("membrane position must satisfy 0 < x < L")
    k = np.asarray(k, dtype=float)
    r_m, t_m = membrane_amplitudes(model.membrane, k)
    r1, t1 = model.mirror1.r, model.mirror1.t
    r2, t2 = model.mirror2.r, model.mirror2.t
    # per-crossing amplitude factor at the input mirror's inner face; two
    # crossings per round trip, so the round-trip power loss is exactly
    # e^{-loss_s} and the loss adds to |t1|^2 + |t2|^2 in the decay rate
    att = math.exp(-model.mirror1.loss_s / 4.0)

    # back mirror seen from inside, walked leftward to the input mirror
    rho = r2 * np.exp(2j * k * (model.length_l - x))
    tau = t2 * np.exp(1j * k * (model.length_l - x))
    den_m = 1.0 - r_m * rho
    tau = t_m * tau / den_m
    rho = r_m + t_m**2 * rho / den_m
    rho = rho * np.exp(2j * k * x)
    tau = tau * np.exp(1j * k * x)
    den_1 = 1.0 - r1 * att**2 * rho
    r_out = r1 + t1**2 * att**2 * rho / den_1
    t_out = t1 * att * tau / den_1

    # field heading into the attenuator from the input mirror side
    inward = t1 / den_1
    absorbed = ((1.0 - att**2) * np.abs(inward) ** 2
                * (1.0 + att**2 * np.abs(rho) ** 2))
    if not (np.all(np.isfinite(r_out)) and np.all(np.isfinite(t_out))):
        raise DegenerateConfigurationError(
            "stack composition is singular (lossless cavity on exact "
            "resonance with closed ports)")
    return r_out, t_out, absorbed


def stack_response(model: CavityModel, k, x: float):
    """Complex reflection and transmission amplitudes of the stack."""
    r_out, t_out, _ = _stack_fields(model, k, x)
    return r_out, t_out


def reflection_trace(model: CavityModel, x: float, detuning_grid,
                     branch_n: int, center_omega: float | None = None):
    """Normalized reflected power versus detuning from a branch resonance.

        R(delta) = (1 - eps) + eps |r_stack(omega_res + delta)|^2

    With center_omega=None the resonance of the requested branch is solved
    exactly; passing a center skips that solve (used by map assembly, where
    the axis is anchored to the branch index instead).
    """
    grid = np.asarray(detuning_grid, dtype=float)
    if grid.size == 0:
        raise ValueError("detuning grid is empty")
    if center_omega is None:
        geometry = CavityGeometry(
            length_l=model.length_l, membrane_x=x, mode_index_n=branch_n,
            wavenumber_k=math.pi * branch_n / model.length_l)
        center_omega = solve_resonant_k(geometry, model.membrane,
                                        branch_n=branch_n).omega
    k_grid = (center_omega + grid) / C
    r_out, _, _ = _stack_fields(model, k_grid, x)
    eps = model.mode_match_eps
    return (1.0 - eps) + eps * np.abs(r_out) ** 2


def spectrum_map(model: CavityModel, x_grid, detuning_grid,
                 branch_n: int) -> SpectrumMap:
    """Reflection map over membrane position and detuning from N*omega_FSR."""
    x_arr = np.asarray(x_grid, dtype=float)
    d_arr = np.asarray(detuning_grid, dtype=float)
    if x_arr.size == 0 or d_arr.size == 0:
        raise ValueError("grids must be non-empty")
    if np.any(np.diff(x_arr) <= 0.0) or np.any(np.diff(d_arr) <= 0.0):
        raise ValueError("grids must be strictly increasing")

    anchor = branch_n * fsr(model.length_l)
    k_n = math.pi * branch_n / model.length_l
    narrowest = min(
        float(kappa_closed_form(x, k_n, model.membrane, model.mirror1,
                                model.mirror2, model.length_l))
        for x in (x_arr[0], x_arr[-1], x_arr[x_arr.size // 2]))
    spacing = float(np.max(np.diff(d_arr))) if d_arr.size > 1 else math.inf
    coarse = spacing > narrowest / 3.0
    if coarse:
        warnings.warn("detuning grid spacing exceeds a third of the "
                      "narrowest linewidth; dips will be undersampled",
                      ModelValidityWarning, stacklevel=2)
    rows = [reflection_trace(model, x, d_arr, branch_n, center_omega=anchor)
            for x in x_arr]
    return SpectrumMap(x_grid=x_arr, detuning_grid=d_arr,
                       values=np.vstack(rows), coarse=coarse)


def _lorentzian(delta, offset, depth, center, width):
    return offset - depth / (1.0 + ((delta - center) / (width / 2.0)) ** 2)


def extract_linewidth(trace, detuning_grid):
    """Fit a Lorentzian dip; returns (kappa_fwhm, center, depth).

    The dip is located by global minimum with a three-point quadratic
    refinement, then least-squares fit. A trace without an interior dip
    raises FitFailedError.
    """
    y = np.asarray(trace, dtype=float)
    delta = np.asarray(detuning_grid, dtype=float)
    if y.shape != delta.shape or y.size < 7:
        raise ValueError("trace and grid must match, with at least 7 points")
    i0 = int(np.argmin(y))
    if i0 == 0 or i0 == y.size - 1:
        raise FitFailedError("resonance dip is not interior to the grid")
    offset0 = 0.5 * (np.median(y[:3]) + np.median(y[-3:]))
    depth0 = offset0 - y[i0]
    if depth0 <= 1e-9 * max(offset0, 1.0):
        raise FitFailedError("no dip found above the numerical floor")

    # quadratic refinement of the minimum position
    y_l, y_c, y_r = y[i0 - 1], y[i0], y[i0 + 1]
    curv = y_l - 2.0 * y_c + y_r
    shift = 0.5 * (y_l - y_r) / curv if curv > 0.0 else 0.0
    step = delta[i0 + 1] - delta[i0]
    center0 = delta[i0] + shift * step

    half = offset0 - depth0 / 2.0
    below = np.nonzero(y < half)[0]
    width0 = (delta[below[-1]] - delta[below[0]]) if below.size >= 2 else \
        (delta[-1] - delta[0]) / 4.0
    width0 = max(width0, abs(step))
    try:
        popt, _ = curve_fit(_lorentzian, delta, y,
                            p0=[offset0, depth0, center0, width0],
                            maxfev=10000)
    except RuntimeError as exc:
        raise FitFailedError(f"Lorentzian fit did not converge: {exc}",
                             params=[offset0, depth0, center0, width0])
    offset, depth, center, width = popt
    if depth <= 0.0 or not math.isfinite(width):
        raise FitFailedError("Lorentzian fit returned a non-dip",
                             params=list(popt))
    return abs(width), center, depth


def position_sweep(model: CavityModel, x_grid, branch_n: int,
                   half_span: float = 6.0, points: int = 481):
    """(kappa, resonant reflection) per membrane position.

    Each position gets a resonance-centered trace spanning half_span
    linewidth estimates on both sides; kappa comes from the Lorentzian
    fit and the resonant reflection from the trace center.
    """
    x_arr = np.asarray(x_grid, dtype=float)
    kappas = np.empty(x_arr.size)
    r_res = np.empty(x_arr.size)
    for i, x in enumerate(x_arr):
        geometry = CavityGeometry(
            length_l=model.length_l, membrane_x=float(x),
            mode_index_n=branch_n,
            wavenumber_k=math.pi * branch_n / model.length_l)
        solution = solve_resonant_k(geometry, model.membrane,
                                    branch_n=branch_n,
                                    mirror1=model.mirror1,
                                    mirror2=model.mirror2)
        kappa_est = solution.kappa
        grid = np.linspace(-half_span * kappa_est, half_span * kappa_est,
                           points)
        trace = reflection_trace(model, float(x), grid, branch_n,
                                 center_omega=solution.omega)
        try:
            kappas[i], _, _ = extract_linewidth(trace, grid)
        except FitFailedError as exc:
            raise FitFailedError(
                f"linewidth extraction failed at x index {i} "
                f"(x = {x:.9g} m): {exc}") from exc
        r_res[i] = trace[points // 2]
    return kappas, r_res


def empty_cavity_kappa(model: CavityModel) -> float:
    """Decay rate with the membrane removed: c(|t1|^2+|t2|^2+S1)/(2L)."""
    budget = (model.mirror1.t_mag**2 + model.mirror2.t_mag**2
              + model.mirror1.loss_s)
    return C * budget / (2.0 * model.length_l)


def length_sweep_to_detuning(delta_length, k, length_l: float):
    """Map a back-mirror displacement to the equivalent laser detuning.

    Lengthening the cavity by dL lowers every resonance:
    delta = -2 k dL c / (2 L).
    """
    return -2.0 * np.asarray(delta_length, dtype=float) * k * C \
        / (2.0 * length_l)
