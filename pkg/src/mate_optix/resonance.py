"""Cavity resonance condition: exact numeric roots and closed forms.

The closed cavity (high-finesse) model constrains resonant wavenumbers by

    (t_m^2 - r_m^2) e^{ikL} - e^{-ikL} = 2 r_m cos(2kx - kL),

which for any unitary membrane (|r_m|^2 + |t_m|^2 = 1 with
exp(2i(phi_t - phi_r)) = -1) reduces to the real transcendental

    -cos(kL + phi_r) = |r_m| cos(2kx - kL).

Numeric care: at L ~ 0.1 m and optical k the phase kL is ~4e5 rad, where a
float64 cosine loses ten digits. All phases here are reduced modulo 2 pi in
extended precision before any trig call, by writing k = k_N + q with
k_N = pi N / L and keeping only the small q in float64.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .constants import C
from .core import CavityGeometry, MembraneCoefficients, MembraneSpec, Mirror, fsr
from .errors import (
    BranchDiscontinuityError,
    DegenerateConfigurationError,
    ModelValidityWarning,
    RootNotFoundError,
)

_PI_L = np.longdouble("3.141592653589793238462643383279502884")
_RESIDUAL_TOL = 1e-10
_DEFAULT_SCAN = 96


@dataclass(frozen=True)
class ResonanceSolution:
    """One resonant mode: wavenumber, frequency, decay rate, and solver leftover.

    kappa is None when the solve was done without mirror data.
    """

    wavenumber_k: float
    omega: float
    branch_n: int
    residual: float
    kappa: float | None = None


def _validity_warnings(length_l: float, dx, wavelength: float):
    if length_l < 100.0 * wavelength:
        warnings.warn(
            f"cavity length {length_l:g} m is under 100 wavelengths; the "
            "long-cavity closed forms degrade here", ModelValidityWarning,
            stacklevel=3)
    if np.any(np.abs(dx) > length_l / 20.0):
        warnings.warn(
            "membrane displacement exceeds L/20; the leading-order "
            "k*dx expansion degrades here", ModelValidityWarning,
            stacklevel=3)


def _reduced_phase(n_band: int, x: float, length_l: float) -> float:
    """k_N (2x - L) reduced mod 2 pi, evaluated in extended precision."""
    big = _PI_L * np.longdouble(n_band) * (
        2.0 * np.longdouble(x) - np.longdouble(length_l)) / np.longdouble(length_l)
    return float(np.mod(big, 2.0 * _PI_L))


def _band_residual(n_band: int, x: float, length_l: float,
                   coeffs: MembraneCoefficients):
    """Residual f(q) = cos(kL + phi_r) + |r_m| cos(2kx - kL) at k = pi N/L + q.

    Returns a callable on the in-band offset q. Phase-reduced so q stays
    small; sign (-1)^N absorbs the k_N L = N pi part of the first cosine.
    """
    sgn = -1.0 if (n_band % 2) else 1.0
    phi_n = _reduced_phase(n_band, x, length_l)
    r_mag = coeffs.r_mag
    phi_r = coeffs.r_phase
    span = 2.0 * x - length_l

    def f(q):
        return (sgn * np.cos(q * length_l + phi_r)
                + r_mag * np.cos(phi_n + q * span))

    return f


def _band_roots(n_band: int, x: float, length_l: float,
                coeffs: MembraneCoefficients, nscan: int = _DEFAULT_SCAN):
    """All roots of the transcendental with k in [N pi/L, (N+1) pi/L)."""
    f = _band_residual(n_band, x, length_l, coeffs)
    dq = math.pi / length_l
    qs = np.linspace(0.0, dq, nscan)
    vals = f(qs)
    roots = []
    for i in range(nscan - 1):
        a, b = qs[i], qs[i + 1]
        fa, fb = vals[i], vals[i + 1]
        if fa == 0.0:
            roots.append(a)
            continue
        if fa * fb < 0.0:
            q0 = brentq(f, a, b, xtol=1e-18, rtol=8.9e-16)
            # one Newton polish; the derivative is analytic
            sgn = -1.0 if (n_band % 2) else 1.0
            phi_n = _reduced_phase(n_band, x, length_l)
            span = 2.0 * x - length_l
            df = (-sgn * math.sin(q0 * length_l + coeffs.r_phase) * length_l
                  - coeffs.r_mag * math.sin(phi_n + q0 * span) * span)
            if df != 0.0:
                q0 -= f(q0) / df
            if 0.0 <= q0 < dq:
                roots.append(float(q0))
    k_n = math.pi * n_band / length_l
    return [(k_n + q, float(abs(f(q)))) for q in roots]


def solve_resonant_k(geometry: CavityGeometry, membrane: MembraneSpec,
                     branch_n: int | None = None,
                     mirror1: Mirror | None = None,
                     mirror2: Mirror | None = None) -> ResonanceSolution:
    """Resonant wavenumber in the branch_n-th free-spectral-range interval.

    Finds the bracketed root of -cos(kL + phi_r) = |r_m| cos(2kx - kL) with
    k in [N pi/L, (N+1) pi/L). The same residual is the unitary reduction of
    the general complex transcendental, so slab-derived coefficients with
    arbitrary phases are handled identically. If the interval holds several
    roots the one nearest the geometry's nominal wavenumber is returned.

    Passing both mirrors fills in the decay rate of the solution.

    Raises
    ------
    RootNotFoundError
        if no sign change exists in the interval.
    DegenerateConfigurationError
        for a perfectly reflective membrane (|r_m| = 1).
    """
    length_l = geometry.length_l
    x = geometry.membrane_x
    n_band = geometry.mode_index_n if branch_n is None else branch_n
    coeffs = membrane.coefficients_at(geometry.wavenumber_k)
    if coeffs.r_mag >= 1.0:
        raise DegenerateConfigurationError(
            "membrane with |r_m| = 1 splits the cavity into uncoupled halves")
    wavelength = 2.0 * math.pi * length_l / (math.pi * n_band)
    if length_l < 100.0 * wavelength:
        warnings.warn("cavity shorter than 100 wavelengths",
                      ModelValidityWarning, stacklevel=2)

    found = _band_roots(n_band, x, length_l, coeffs)
    if not found:
        k_lo = math.pi * n_band / length_l
        k_hi = math.pi * (n_band + 1) / length_l
        raise RootNotFoundError(
            f"no resonance in k bracket [{k_lo:.9e}, {k_hi:.9e}] rad/m "
            f"for branch {n_band}", bracket=(k_lo, k_hi))
    # multi-root bands exist near the mirrors at high reflectivity; pick
    # the root closest to the geometry's nominal operating wavenumber
    k_res, residual = min(found,
                          key=lambda kr: abs(kr[0] - geometry.wavenumber_k))

    kap = None
    if mirror1 is not None and mirror2 is not None:
        kap = float(kappa(x, k_res, membrane, mirror1, mirror2, length_l))
    return ResonanceSolution(wavenumber_k=k_res, omega=C * k_res,
                             branch_n=n_band, residual=residual, kappa=kap)


def resonant_length(k: float, x: float, membrane: MembraneSpec,
                    branch_j: int = 0) -> float:
    """Cavity length resonant at wavenumber k with the membrane at x.

        L = (1/k) arctan[(cos phi_r + |r_m| cos 2kx)
                         / (sin phi_r - |r_m| sin 2kx)] + j pi / k

    The arctan branch is unwrapped so the returned length exceeds x;
    branch_j counts further solutions above that, each pi/k apart.
    """
    if k <= 0.0:
        raise ValueError("k must be positive")
    coeffs = membrane.coefficients_at(k)
    r_mag, phi_r = coeffs.r_mag, coeffs.r_phase
    num = math.cos(phi_r) + r_mag * math.cos(2.0 * k * x)
    den = math.sin(phi_r) - r_mag * math.sin(2.0 * k * x)
    if num * num + den * den < 1e-24:
        raise DegenerateConfigurationError(
            "resonant length indeterminate: arctan argument is 0/0")
    base = math.atan2(num, den) % math.pi
    # smallest multiple of pi/k lifting base/k above x
    j0 = max(0, math.ceil((x * k - base) / math.pi))
    length = (base + (j0 + branch_j) * math.pi) / k
    if length <= x:
        length += math.pi / k
    return length


def _detuning_mim(dx, branch_n: int, coeffs: MembraneCoefficients):
    """MIM detuning from N*omega_FSR, as a fraction of pi (i.e. of the FSR).

    The band-N root solves cos(theta + phi_r) = (-1)^(N+1) |r_m| cos(2 k_N dx)
    for theta in [0, pi). Both arccos branches +-a - phi_r (mod 2 pi) solve
    it; the one whose curve is centered on the band interior depends on
    phi_r: the direct branch for phi_r near 0, the reflected branch
    2 pi - a - phi_r for phi_r near pi. Either choice is continuous in dx.
    """
    sgn = 1.0 if (branch_n % 2) else -1.0  # (-1)^(N+1)
    u = 2.0 * (math.pi * branch_n) * np.asarray(dx, dtype=float)
    a = np.arccos(sgn * coeffs.r_mag * np.cos(u))
    phi = coeffs.r_phase % (2.0 * math.pi)
    if math.pi / 2 < phi <= 3 * math.pi / 2:
        theta = 2.0 * math.pi - a - phi
    elif phi > 3 * math.pi / 2:
        theta = a - phi + 2.0 * math.pi
    else:
        theta = a - phi
    return theta / math.pi


def _detuning_mate(dx, branch_n: int, coeffs: MembraneCoefficients):
    """MATE detuning from N*omega_FSR, as a fraction of pi."""
    u = 2.0 * (math.pi * branch_n) * np.asarray(dx, dtype=float)
    num = math.cos(coeffs.r_phase) + coeffs.r_mag * np.cos(u)
    den = math.sin(coeffs.r_phase) - coeffs.r_mag * np.sin(u)
    return np.mod(np.arctan2(num, den), math.pi) / math.pi


def omega_mim(dx, branch_n: int, membrane: MembraneSpec, length_l: float):
    """Resonant frequency of a membrane displaced dx from the cavity center.

        omega = N omega_FSR + (omega_FSR/pi)
                * (arccos[(-1)^(N+1) |r_m| cos(2 k_N dx)] - phi_r)

    with k_N = pi N / L, unwrapped into [N, N+1) free spectral ranges.
    dx may be an array; the detuning argument uses dx/L only through
    k_N dx, so dx is in meters.
    """
    coeffs = _closed_form_coeffs(membrane, branch_n, length_l)
    _validity_warnings(length_l, dx, 2.0 * length_l / branch_n)
    w_fsr = fsr(length_l)
    dx_over_l = np.asarray(dx, dtype=float) / length_l
    det = _detuning_mim(dx_over_l, branch_n, coeffs)
    out = (branch_n + det) * w_fsr
    return float(out) if np.isscalar(dx) else out


def omega_mate(dx, branch_n: int, membrane: MembraneSpec, length_l: float):
    """Resonant frequency of a membrane displaced dx from an end mirror.

        omega = N omega_FSR + (omega_FSR/pi)
                * arctan[(cos phi_r + |r_m| cos(2 k_N dx))
                         / (sin phi_r - |r_m| sin(2 k_N dx))]

    The arctan is taken mod pi so each branch stays within one free
    spectral range; with phi_r = pi the branch is continuous in dx.
    """
    coeffs = _closed_form_coeffs(membrane, branch_n, length_l)
    _validity_warnings(length_l, dx, 2.0 * length_l / branch_n)
    w_fsr = fsr(length_l)
    dx_over_l = np.asarray(dx, dtype=float) / length_l
    det = _detuning_mate(dx_over_l, branch_n, coeffs)
    out = (branch_n + det) * w_fsr
    return float(out) if np.isscalar(dx) else out


def mim_detuning(dx, branch_n: int, membrane: MembraneSpec, length_l: float):
    """omega_mim minus N*omega_FSR, in rad/s (precision-safe for comparisons)."""
    coeffs = _closed_form_coeffs(membrane, branch_n, length_l)
    det = _detuning_mim(np.asarray(dx, dtype=float) / length_l, branch_n, coeffs)
    out = det * fsr(length_l)
    return float(out) if np.isscalar(dx) else out


def mate_detuning(dx, branch_n: int, membrane: MembraneSpec, length_l: float):
    """omega_mate minus N*omega_FSR, in rad/s."""
    coeffs = _closed_form_coeffs(membrane, branch_n, length_l)
    det = _detuning_mate(np.asarray(dx, dtype=float) / length_l, branch_n, coeffs)
    out = det * fsr(length_l)
    return float(out) if np.isscalar(dx) else out


def _closed_form_coeffs(membrane: MembraneSpec, branch_n: int,
                        length_l: float) -> MembraneCoefficients:
    if branch_n < 1 or length_l <= 0.0:
        raise ValueError("branch_n >= 1 and length_l > 0 required")
    coeffs = membrane.coefficients_at(math.pi * branch_n / length_l)
    if coeffs.r_mag > 1.0:
        raise ValueError("membrane reflectivity magnitude exceeds 1")
    return coeffs


def kappa(x, k, membrane: MembraneSpec, mirror1: Mirror, mirror2: Mirror,
          length_l: float):
    """Position-dependent cavity energy decay rate.

        kappa(x) = [(1 - |r_m|^2) c |t1|^2
                    + (1 + 2|r_m| cos(2kx + phi_r) + |r_m|^2) c |t2|^2]
                   / [2x (1 - |r_m|^2)
                      + 2(L - x)(1 + 2|r_m| cos(2kx + phi_r) + |r_m|^2)]

    k must be the resonant wavenumber at this membrane position. Accepts
    arrays for x and k (broadcast together). With both mirror transmissions
    zero the cavity is closed; returns zero and warns.
    """
    x_arr = np.asarray(x, dtype=float)
    k_arr = np.asarray(k, dtype=float)
    coeffs = membrane.coefficients_at(float(np.mean(k_arr)))
    r_mag, phi_r = coeffs.r_mag, coeffs.r_phase
    t1_sq = mirror1.t_mag**2
    t2_sq = mirror2.t_mag**2
    if t1_sq == 0.0 and t2_sq == 0.0:
        warnings.warn("both end mirrors are perfectly reflective; the "
                      "cavity is lossless and kappa is zero",
                      ModelValidityWarning, stacklevel=2)
        out = np.zeros(np.broadcast(x_arr, k_arr).shape)
        return 0.0 if out.ndim == 0 or (np.isscalar(x) and np.isscalar(k)) else out

    edge = 1.0 + 2.0 * r_mag * np.cos(2.0 * k_arr * x_arr + phi_r) + r_mag**2
    bulk = 1.0 - r_mag**2
    num = bulk * C * t1_sq + edge * C * t2_sq
    den = 2.0 * x_arr * bulk + 2.0 * (length_l - x_arr) * edge
    out = num / den
    return float(out) if (np.isscalar(x) and np.isscalar(k)) else out


def subcavity_power_ratio(x, k, membrane: MembraneSpec):
    """Circulating power in the far subcavity over the near one, P2/P1.

        P2/P1 = (1 + |r_m|^2 + 2|r_m| cos(2kx + phi_r)) / (1 - |r_m|^2)
    """
    x_arr = np.asarray(x, dtype=float)
    k_arr = np.asarray(k, dtype=float)
    coeffs = membrane.coefficients_at(float(np.mean(k_arr)))
    r_mag, phi_r = coeffs.r_mag, coeffs.r_phase
    if r_mag >= 1.0:
        raise DegenerateConfigurationError(
            "power ratio diverges for |r_m| = 1")
    out = ((1.0 + r_mag**2 + 2.0 * r_mag * np.cos(2.0 * k_arr * x_arr + phi_r))
           / (1.0 - r_mag**2))
    return float(out) if (np.isscalar(x) and np.isscalar(k)) else out


def trace_branch(x_grid, branch_n: int, membrane: MembraneSpec,
                 mirror1: Mirror, mirror2: Mirror,
                 length_l: float) -> list[ResonanceSolution]:
    """Follow one resonance branch across membrane positions.

    Each position is solved with root candidates drawn from the band of the
    previous solution and its neighbors; the nearest candidate in k keeps
    the branch continuous. A point-to-point frequency jump above half a free
    spectral range means the grid is too coarse to follow the branch and
    raises BranchDiscontinuityError with the offending index.
    """
    x_grid = np.asarray(x_grid, dtype=float)
    if x_grid.ndim != 1 or len(x_grid) == 0:
        raise ValueError("x_grid must be a non-empty 1D array")
    if len(x_grid) > 1:
        d = np.diff(x_grid)
        if not (np.all(d > 0.0) or np.all(d < 0.0)):
            raise ValueError("x_grid must be strictly monotone")
    w_fsr = fsr(length_l)
    half_fsr_k = 0.5 * math.pi / length_l

    solutions: list[ResonanceSolution] = []
    prev_k: float | None = None
    band = branch_n
    for i, x in enumerate(x_grid):
        geom = CavityGeometry(length_l=length_l, membrane_x=float(x),
                              mode_index_n=band,
                              wavenumber_k=math.pi * band / length_l)
        coeffs = membrane.coefficients_at(geom.wavenumber_k)
        candidates = []
        for nb in (band - 1, band, band + 1):
            if nb >= 1:
                candidates.extend(_band_roots(nb, float(x), length_l, coeffs))
        if not candidates:
            raise RootNotFoundError(
                f"no resonance near branch {band} at x={x:g}",
                bracket=(math.pi * (band - 1) / length_l,
                         math.pi * (band + 2) / length_l))
        if prev_k is None:
            # first point: stay in the requested band
            in_band = [c for c in candidates
                       if math.pi * band / length_l <= c[0]
                       < math.pi * (band + 1) / length_l]
            pick = min(in_band or candidates,
                       key=lambda c: abs(c[0] - math.pi * (band + 0.5) / length_l))
        else:
            pick = min(candidates, key=lambda c: abs(c[0] - prev_k))
            if abs(pick[0] - prev_k) > half_fsr_k:
                raise BranchDiscontinuityError(
                    f"frequency jump of {abs(pick[0] - prev_k) * C / w_fsr:.2f} "
                    f"FSR between grid points {i - 1} and {i}; refine the grid",
                    index=i)
        k_res, residual = pick
        band = int(math.floor(k_res * length_l / math.pi))
        kap = float(kappa(float(x), k_res, membrane, mirror1, mirror2, length_l))
        solutions.append(ResonanceSolution(
            wavenumber_k=k_res, omega=C * k_res, branch_n=band,
            residual=residual, kappa=kap))
        prev_k = k_res
    return solutions
