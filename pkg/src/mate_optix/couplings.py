"""Dispersive and dissipative optomechanical couplings for both geometries.

Closed forms for G1 = dw/dx, G2 = d2w/dx2, the dissipative parameter
B = (dkappa/dx) x_zpf / kappa taken along the resonance branch, their
extremal values and locations, the purely-quadratic membrane positions, and
the strong-coupling parameters A1 = -G1 x_zpf / kappa, A2 = -G2 x_zpf^2 / kappa.

Membrane displacement dx is measured from the cavity center for the "mim"
placement and from the adjacent end mirror for the "mate-input" (near the
input mirror 1) and "mate-backstop" (near mirror 2) placements.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np

from .constants import C
from .core import MechanicalMode, MembraneCoefficients, MembraneSpec, Mirror, fsr
from .errors import DegenerateConfigurationError, ModelValidityWarning
from .resonance import _detuning_mate, _detuning_mim, _closed_form_coeffs

Placement = Literal["mim", "mate-input", "mate-backstop"]

# finite-difference steps as fractions of the optical wavelength; the
# first balances truncation against rounding for dkappa/dx, the second is
# the matching convention for quadratic-coupling difference checks
FD_STEP_FIRST = 1e-4
FD_STEP_SECOND = 1e-3


class Extremum(NamedTuple):
    dx: float
    value: float
    kind: str  # "g1max" or "g2max"


@dataclass(frozen=True)
class CouplingReport:
    """All coupling quantities at one membrane position."""

    dx: float
    g1: float
    g2: float
    kappa: float
    b_tilde: float
    a1_tilde: float
    a2_tilde: float


def _mim_branch_sign(phi_r: float) -> float:
    """Sign relating the in-band arccos branch to the direct one.

    The frequency closed form follows the arccos branch that lands in the
    indexed free-spectral-range interval; for reflection phases in
    (pi/2, 3 pi/2] that is the reflected branch, whose derivative flips
    sign relative to the direct-branch coupling expressions. Magnitudes
    are branch-independent.
    """
    phi = phi_r % (2.0 * math.pi)
    return -1.0 if (math.pi / 2 < phi <= 3 * math.pi / 2) else 1.0


def dispersive_mim(dx, branch_n: int, membrane: MembraneSpec,
                   length_l: float):
    """Linear and quadratic dispersive couplings, membrane near center.

        G1 = (-1)^(N+1) (2 w_FSR k_N / pi) |r_m| sin(2 k_N dx)
             / sqrt(1 - |r_m|^2 cos^2(2 k_N dx))
        G2 = (-1)^(N+1) (4 w_FSR k_N^2 / pi) |r_m| (1 - |r_m|^2) cos(2 k_N dx)
             / (1 - |r_m|^2 cos^2(2 k_N dx))^(3/2)

    both multiplied by the branch sign of the frequency closed form.
    Returns (g1, g2); accepts array dx.
    """
    coeffs = _closed_form_coeffs(membrane, branch_n, length_l)
    r = coeffs.r_mag
    if r >= 1.0:
        raise DegenerateConfigurationError(
            "dispersive couplings are singular at |r_m| = 1")
    w_fsr = fsr(length_l)
    k_n = math.pi * branch_n / length_l
    u = 2.0 * math.pi * branch_n * (np.asarray(dx, dtype=float) / length_l)
    sgn = (1.0 if (branch_n % 2) else -1.0) * _mim_branch_sign(coeffs.r_phase)
    root = np.sqrt(1.0 - r**2 * np.cos(u) ** 2)
    g1 = sgn * (2.0 * w_fsr * k_n / math.pi) * r * np.sin(u) / root
    g2 = (sgn * (4.0 * w_fsr * k_n**2 / math.pi) * r * (1.0 - r**2)
          * np.cos(u) / root**3)
    if np.isscalar(dx):
        return float(g1), float(g2)
    return g1, g2


def dispersive_mate(dx, branch_n: int, membrane: MembraneSpec,
                    length_l: float):
    """Linear and quadratic dispersive couplings, membrane near an end mirror.

        G1 = (2 k_N w_FSR / pi) |r_m| (|r_m| + cos w)
             / (|r_m|^2 + 2 |r_m| cos w + 1)
        G2 = -(4 k_N^2 w_FSR / pi) |r_m| (1 - |r_m|^2) sin w
             / (|r_m|^2 + 2 |r_m| cos w + 1)^2

    with w = 2 k_N dx + phi_r. Returns (g1, g2); accepts array dx.
    """
    coeffs = _closed_form_coeffs(membrane, branch_n, length_l)
    r = coeffs.r_mag
    if r >= 1.0:
        raise DegenerateConfigurationError(
            "dispersive couplings are singular at |r_m| = 1")
    _mate_validity_guard(dx, length_l, coeffs)
    w_fsr = fsr(length_l)
    k_n = math.pi * branch_n / length_l
    w = (2.0 * math.pi * branch_n * (np.asarray(dx, dtype=float) / length_l)
         + coeffs.r_phase)
    den = r**2 + 2.0 * r * np.cos(w) + 1.0
    g1 = (2.0 * k_n * w_fsr / math.pi) * r * (r + np.cos(w)) / den
    g2 = -(4.0 * k_n**2 * w_fsr / math.pi) * r * (1.0 - r**2) * np.sin(w) / den**2
    if np.isscalar(dx):
        return float(g1), float(g2)
    return g1, g2


def _mate_validity_guard(dx, length_l: float, coeffs: MembraneCoefficients):
    # the edge expressions assume 4 dx / L << |t_m|^2
    t_sq = max(coeffs.t_mag**2, 1e-300)
    if np.any(4.0 * np.abs(np.asarray(dx, dtype=float)) / length_l
              > t_sq / 10.0):
        warnings.warn(
            "membrane-mirror separation is not small against L|t_m|^2/4; "
            "edge-placement closed forms degrade here",
            ModelValidityWarning, stacklevel=3)


def extremal_couplings(membrane: MembraneSpec, length_l: float,
                       branch_n: int,
                       geometry: Literal["mim", "mate"]) -> list[Extremum]:
    """Closed-form extremum locations and values within one half-wave period.

    For the center placement the linear coupling peaks at dx = (2j+1) lambda/8
    and the quadratic one at dx = j lambda/4. For the edge placement the
    linear peak sits at (2j+1) pi - phi_r over 2 k_N and the quadratic peaks
    at 2 pi j - phi_r +- 2 arctan(sqrt[(6|r_m| + sqrt(|r_m|^4 + 34|r_m|^2 + 1))
    / (1 - |r_m|)^2]) over 2 k_N. Values are the dispersive forms evaluated
    at those locations.
    """
    coeffs = _closed_form_coeffs(membrane, branch_n, length_l)
    r = coeffs.r_mag
    if r >= 1.0:
        raise DegenerateConfigurationError("extrema diverge at |r_m| = 1")
    k_n = math.pi * branch_n / length_l
    lam_n = 2.0 * math.pi / k_n
    period = lam_n / 2.0
    out: list[Extremum] = []
    if geometry == "mim":
        for j in (1, 3):  # (2j+1) lambda/8 within one period
            dx = j * lam_n / 8.0
            g1, _ = dispersive_mim(dx, branch_n, membrane, length_l)
            out.append(Extremum(dx=dx, value=g1, kind="g1max"))
        for dx in (0.0, lam_n / 4.0):
            _, g2 = dispersive_mim(dx, branch_n, membrane, length_l)
            out.append(Extremum(dx=dx, value=g2, kind="g2max"))
    elif geometry == "mate":
        phi_r = coeffs.r_phase
        dx1 = ((math.pi - phi_r) / (2.0 * k_n)) % period
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ModelValidityWarning)
            g1, _ = dispersive_mate(dx1, branch_n, membrane, length_l)
            out.append(Extremum(dx=dx1, value=g1, kind="g1max"))
            probe = 2.0 * math.atan(math.sqrt(
                (6.0 * r + math.sqrt(r**4 + 34.0 * r**2 + 1.0))
                / (1.0 - r) ** 2))
            for sign in (+1.0, -1.0):
                dx2 = ((sign * probe - phi_r) / (2.0 * k_n)) % period
                _, g2 = dispersive_mate(dx2, branch_n, membrane, length_l)
                out.append(Extremum(dx=dx2, value=g2, kind="g2max"))
    else:
        raise ValueError(f"unknown geometry {geometry!r}")
    return out


def pure_quadratic_points(membrane: MembraneSpec, branch_n: int,
                          length_l: float) -> list[float]:
    """Membrane offsets where the linear edge coupling vanishes exactly.

        dx = (+-arccos(-|r_m|) - phi_r + 2 pi j) / (2 k_N)

    Both members within one half-wave period, sorted ascending.
    """
    coeffs = _closed_form_coeffs(membrane, branch_n, length_l)
    if coeffs.r_mag > 1.0:
        raise ValueError("membrane reflectivity magnitude exceeds 1")
    k_n = math.pi * branch_n / length_l
    period = math.pi / k_n
    a = math.acos(-coeffs.r_mag)
    points = sorted(((s * a - coeffs.r_phase) / (2.0 * k_n)) % period
                    for s in (+1.0, -1.0))
    return points


def _branch_kappa(dx, branch_n: int, membrane: MembraneSpec,
                  mirror1: Mirror, mirror2: Mirror, length_l: float,
                  placement: Placement):
    """Decay rate along the resonance branch, with phase-reduced arguments.

    The interference argument 2 k x + phi_r is ~1e5 rad at the operating
    point; it is decomposed against k_N L = pi N before any cosine so the
    result keeps full precision. Accepts array dx.
    """
    coeffs = _closed_form_coeffs(membrane, branch_n, length_l)
    r, phi_r = coeffs.r_mag, coeffs.r_phase
    dx_arr = np.asarray(dx, dtype=float)
    u = 2.0 * math.pi * branch_n * (dx_arr / length_l)
    if placement == "mim":
        theta = math.pi * _detuning_mim(dx_arr / length_l, branch_n, coeffs)
        arg = u + theta * (1.0 + 2.0 * dx_arr / length_l) + phi_r
        cos_arg = (1.0 if branch_n % 2 == 0 else -1.0) * np.cos(arg)
        x_pos = length_l / 2.0 + dx_arr
    elif placement == "mate-input":
        theta = math.pi * _detuning_mate(dx_arr / length_l, branch_n, coeffs)
        arg = u + 2.0 * theta * dx_arr / length_l + phi_r
        cos_arg = np.cos(arg)
        x_pos = dx_arr
    elif placement == "mate-backstop":
        theta = math.pi * _detuning_mate(dx_arr / length_l, branch_n, coeffs)
        arg = 2.0 * theta - u - 2.0 * theta * dx_arr / length_l + phi_r
        cos_arg = np.cos(arg)
        x_pos = length_l - dx_arr
    else:
        raise ValueError(f"unknown placement {placement!r}")
    edge = 1.0 + 2.0 * r * cos_arg + r**2
    bulk = 1.0 - r**2
    num = bulk * C * mirror1.t_mag**2 + edge * C * mirror2.t_mag**2
    den = 2.0 * x_pos * bulk + 2.0 * (length_l - x_pos) * edge
    return num / den


def dissipative_b(dx, branch_n: int, membrane: MembraneSpec,
                  mirror1: Mirror, mirror2: Mirror, length_l: float,
                  mode: MechanicalMode, placement: Placement = "mim",
                  method: Literal["analytic", "numeric"] = "analytic",
                  richardson: bool = False) -> float:
    """Dissipative coupling B = (dkappa/dx) x_zpf / kappa along the branch.

    The derivative is the total derivative: the resonant wavenumber follows
    the membrane, so dkappa/dx includes the dk/dx term. The analytic method
    implements the single-port (t2 = 0) closed forms for the "mim" and
    "mate-input" placements; "mate-backstop" and two-port configurations
    need method="numeric". The richardson flag extrapolates the numeric
    difference to one higher order.
    """
    coeffs = _closed_form_coeffs(membrane, branch_n, length_l)
    r, phi_r = coeffs.r_mag, coeffs.r_phase
    k_n = math.pi * branch_n / length_l
    x_zpf = mode.x_zpf
    if method == "numeric":
        lam_n = 2.0 * math.pi / k_n
        h = lam_n * FD_STEP_FIRST
        k_mid = _branch_kappa(dx, branch_n, membrane, mirror1, mirror2,
                              length_l, placement)
        if not np.all(k_mid > 0.0):
            raise DegenerateConfigurationError(
                "kappa vanishes; dissipative coupling undefined")

        def diff(step):
            k_hi = _branch_kappa(np.asarray(dx) + step, branch_n, membrane,
                                 mirror1, mirror2, length_l, placement)
            k_lo = _branch_kappa(np.asarray(dx) - step, branch_n, membrane,
                                 mirror1, mirror2, length_l, placement)
            return (k_hi - k_lo) / (2.0 * step)

        deriv = diff(h)
        if richardson:
            deriv = (4.0 * diff(h / 2.0) - deriv) / 3.0
        out = deriv / k_mid * x_zpf
        # backstop positions move opposite to the membrane coordinate
        if placement == "mate-backstop":
            out = -out
        return float(out) if np.isscalar(dx) else out

    if method != "analytic":
        raise ValueError(f"unknown method {method!r}")
    if mirror2.t_mag != 0.0:
        warnings.warn("analytic dissipative forms assume a single-port "
                      "cavity (t2 = 0)", ModelValidityWarning, stacklevel=2)
    dx_arr = np.asarray(dx, dtype=float)
    u = 2.0 * math.pi * branch_n * (dx_arr / length_l)
    if placement == "mim":
        theta = math.pi * _detuning_mim(dx_arr / length_l, branch_n, coeffs)
        arg = u + theta * (1.0 + 2.0 * dx_arr / length_l) + phi_r
        par = 1.0 if branch_n % 2 == 0 else -1.0
        cos_arg = par * np.cos(arg)
        sin_arg = par * np.sin(arg)
        g1, _ = dispersive_mim(dx_arr, branch_n, membrane, length_l)
        k_mim = k_n + theta / length_l
        x_pos = length_l / 2.0 + dx_arr
        dk_dx = g1 / C
        bracket = (r + cos_arg
                   + (k_mim + x_pos * dk_dx) * length_l * sin_arg)
        den = 1.0 + r * cos_arg
        out = (2.0 * r / length_l) * bracket / den * x_zpf
    elif placement == "mate-input":
        _mate_validity_guard(dx_arr, length_l, coeffs)
        w = u + phi_r
        bracket = (r + np.cos(w)
                   + 2.0 * k_n * length_l * np.sin(w))
        den = 1.0 + r**2 + 2.0 * r * np.cos(w)
        out = (2.0 * r / length_l) * bracket / den * x_zpf
    elif placement == "mate-backstop":
        raise ValueError(
            "no closed form for the backstop placement; use method='numeric'")
    else:
        raise ValueError(f"unknown placement {placement!r}")
    return float(out) if np.isscalar(dx) else out


def dissipative_maxima(membrane: MembraneSpec, branch_n: int,
                       length_l: float, mode: MechanicalMode,
                       placement: Placement) -> tuple[list[float], float]:
    """Low-transmission limits of the dissipative coupling maxima.

    Returns (locations within one period, limiting value):
    center placement (3 sqrt(3)/2) k_N x_zpf / |t_m| at
    dx = (j pi + (-1)^(j+N+1) |t_m|/sqrt(3)) / (2 k_N); input-mirror
    placement 4 k_N x_zpf / |t_m|^2 at
    dx = (2 pi (2j+1) - 2 phi_r +- |t_m|^2) / (4 k_N).
    """
    coeffs = _closed_form_coeffs(membrane, branch_n, length_l)
    t = coeffs.t_mag
    if t == 0.0:
        raise DegenerateConfigurationError(
            "dissipative maxima diverge at |t_m| = 0")
    k_n = math.pi * branch_n / length_l
    period = math.pi / k_n
    x_zpf = mode.x_zpf
    if placement == "mim":
        value = 1.5 * math.sqrt(3.0) * k_n * x_zpf / t
        # the half-wave alternation of the shift direction follows the
        # arccos branch of the frequency closed form
        sigma = _mim_branch_sign(coeffs.r_phase)
        locs = sorted(
            ((j * math.pi
              + sigma * (-1) ** (j + branch_n + 1) * t / math.sqrt(3.0))
             / (2.0 * k_n)) % period for j in (0, 1))
        return locs, value
    if placement == "mate-input":
        value = 4.0 * k_n * x_zpf / t**2
        phi_r = coeffs.r_phase
        locs = sorted(
            ((2.0 * math.pi - 2.0 * phi_r + s * t**2) / (4.0 * k_n)) % period
            for s in (+1.0, -1.0))
        return locs, value
    raise ValueError("maxima formulas cover 'mim' and 'mate-input' only")


def pure_point_dissipative(membrane: MembraneSpec, mode: MechanicalMode,
                           length_l: float, branch_n: int,
                           placement: Placement = "mim",
                           ) -> list[tuple[float, float]]:
    """Dissipative coupling at the purely-quadratic membrane positions.

    Single-port (t2 = 0) values: +-2 k_N x_zpf |r_m|/|t_m| at the center,
    +-4 k_N x_zpf |r_m|/|t_m| near the input mirror, and the same reduced
    by 2 dx_pure / L near the back mirror. Returns (dx, value) pairs; the
    sign at each point follows the slope of the decay rate there.
    """
    coeffs = _closed_form_coeffs(membrane, branch_n, length_l)
    r, t, phi_r = coeffs.r_mag, coeffs.t_mag, coeffs.r_phase
    if t == 0.0:
        raise DegenerateConfigurationError(
            "pure-point dissipative coupling diverges at |t_m| = 0")
    k_n = math.pi * branch_n / length_l
    x_zpf = mode.x_zpf
    period = math.pi / k_n
    out: list[tuple[float, float]] = []
    if placement == "mim":
        # pure points at dx = j lambda/4; interference phase there has
        # cos = -+r and sin = -+|t_m| alternating with j
        for j in (0, 1):
            dx = (j * math.pi / 2.0) / k_n % period
            theta = math.pi * float(
                _detuning_mim(dx / length_l, branch_n, coeffs))
            par = 1.0 if branch_n % 2 == 0 else -1.0
            sin_arg = par * math.sin(j * math.pi + theta + phi_r)
            out.append((dx, math.copysign(2.0 * k_n * x_zpf * r / t, sin_arg)))
        return out
    a = math.acos(-r)
    for s in (+1.0, -1.0):
        dx = ((s * a - phi_r) / (2.0 * k_n)) % period
        # w = 2 k_N dx + phi_r = +-arccos(-r): sin w = +-|t_m|
        if placement == "mate-input":
            out.append((dx, s * 4.0 * k_n * x_zpf * r / t))
        elif placement == "mate-backstop":
            out.append((dx, s * 4.0 * k_n * x_zpf * (dx / length_l) * r / t))
        else:
            raise ValueError(f"unknown placement {placement!r}")
    return sorted(out)


def strong_parameters(g1, g2, kappa_rate, mode: MechanicalMode):
    """Strong-coupling parameters A1 = -G1 x_zpf/kappa, A2 = -G2 x_zpf^2/kappa."""
    if not np.all(np.asarray(kappa_rate) > 0.0):
        raise DegenerateConfigurationError(
            "kappa must be positive to normalize coupling rates")
    x_zpf = mode.x_zpf
    a1 = -np.asarray(g1) * x_zpf / np.asarray(kappa_rate)
    a2 = -np.asarray(g2) * x_zpf**2 / np.asarray(kappa_rate)
    if np.isscalar(g1) and np.isscalar(g2):
        return float(a1), float(a2)
    return a1, a2


def a1_tilde_limit(branch_n: int, length_l: float, mirror1: Mirror,
                   membrane: MembraneSpec, mode: MechanicalMode) -> float:
    """Low-transmission limit of the peak linear strong-coupling parameter.

    -8 k_N x_zpf / (|t1|^2 |t_m|^2), identical for center and edge
    placements.
    """
    coeffs = _closed_form_coeffs(membrane, branch_n, length_l)
    if mirror1.t_mag == 0.0 or coeffs.t_mag == 0.0:
        raise DegenerateConfigurationError("limit diverges at zero transmission")
    k_n = math.pi * branch_n / length_l
    return -8.0 * k_n * mode.x_zpf / (mirror1.t_mag**2 * coeffs.t_mag**2)


def a2_tilde_ratio_limit(membrane: MembraneSpec, branch_n: int,
                         length_l: float) -> float:
    """Edge-over-center ratio of peak quadratic strong coupling, 4/(3 sqrt(3) |t_m|)."""
    coeffs = _closed_form_coeffs(membrane, branch_n, length_l)
    if coeffs.t_mag == 0.0:
        raise DegenerateConfigurationError("ratio diverges at |t_m| = 0")
    return 4.0 / (3.0 * math.sqrt(3.0) * coeffs.t_mag)


def coupling_report(dx: float, branch_n: int, membrane: MembraneSpec,
                    mirror1: Mirror, mirror2: Mirror, length_l: float,
                    mode: MechanicalMode,
                    placement: Placement = "mim") -> CouplingReport:
    """Assemble every coupling quantity at one membrane position."""
    if placement == "mim":
        g1, g2 = dispersive_mim(dx, branch_n, membrane, length_l)
    else:
        g1, g2 = dispersive_mate(dx, branch_n, membrane, length_l)
    kap = float(_branch_kappa(dx, branch_n, membrane, mirror1, mirror2,
                              length_l, placement))
    if kap <= 0.0:
        raise DegenerateConfigurationError("kappa must be positive")
    b = dissipative_b(dx, branch_n, membrane, mirror1, mirror2, length_l,
                      mode, placement=placement, method="numeric")
    a1, a2 = strong_parameters(g1, g2, kap, mode)
    return CouplingReport(dx=float(dx), g1=g1, g2=g2, kappa=kap, b_tilde=b,
                          a1_tilde=a1, a2_tilde=a2)
