"""Transmission through the wedged mirror-membrane gap, plus flexure geometry.

The micron-scale gap between the input mirror and the membrane is itself a
low-finesse Fabry-Perot. When the two surfaces are not parallel the gap
length varies across the beam, x(y) = x0 + theta y, and the transmitted
power is the plane-wave Airy transmission averaged over the beam's
Gaussian intensity profile along the tilt axis. The second-order expansion
in k theta sigma is carried analytically; an adaptive quadrature of the
exact per-ray transmission serves as its reference.

The transverse axis without tilt integrates out to unity and never
appears; the weight is the 1D normalized Gaussian sqrt(2/pi sigma^2)
exp(-2 y^2 / sigma^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.integrate import quad

from .core import MembraneSpec, Mirror, membrane_amplitudes
from .errors import DegenerateConfigurationError

# expansion parameter k*theta*sigma beyond which the second-order form
# is no longer trusted
TILT_VALIDITY_LIMIT = 0.3

# Gaussian weight is negligible past this many beam radii
QUAD_SPAN_SIGMAS = 6.0
QUAD_ABS_TOL = 1e-8


class TiltTransmission(NamedTuple):
    """Fractional transmitted power with the expansion-validity verdict."""

    power: float | np.ndarray
    within_validity: bool


@dataclass(frozen=True)
class TiltedCavity:
    """Wedged two-surface cavity: input mirror and membrane, gap x0 at
    the beam center, surface slope theta, beam radius sigma.

    phi overrides the summed reflection phase of the two surfaces; left
    at None it is derived from the stored mirror phase and the membrane
    coefficients at each evaluation wavenumber, which keeps a slab
    membrane's phase dispersion in the model.
    """

    x0: float
    theta: float
    sigma: float
    mirror1: Mirror
    membrane: MembraneSpec
    phi: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.x0) and self.x0 > 0.0):
            raise ValueError(f"x0 must be positive, got {self.x0!r}")
        if not (math.isfinite(self.sigma) and self.sigma > 0.0):
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")
        if not math.isfinite(self.theta):
            raise ValueError("theta must be finite")


def airy_transmission(x0, k, mirror1: Mirror, membrane: MembraneSpec):
    """Plane-wave power transmission of the parallel two-surface gap.

        |t1 t_m e^{ikx0} / (1 - r1 r_m e^{2ikx0})|^2

    Vectorized over x0 or k (one of them an array).
    """
    x0 = np.asarray(x0, dtype=float)
    k = np.asarray(k, dtype=float)
    if np.any(x0 <= 0.0):
        raise ValueError("x0 must be positive")
    r_m, t_m = membrane_amplitudes(membrane, k)
    r_prod = mirror1.r * r_m
    t_num = np.abs(mirror1.t * t_m) ** 2
    den = np.abs(1.0 - r_prod * np.exp(2j * k * x0)) ** 2
    # a denominator this small only arises within float dust of unit
    # combined reflectivity exactly on resonance, where the ratio is 0/0
    if np.any(den < 1e-30):
        raise DegenerateConfigurationError(
            "unit-reflectivity surfaces exactly on resonance")
    out = t_num / den
    return float(out) if out.ndim == 0 else out


def _airy_terms(cavity: TiltedCavity, k):
    """(|t1 t_m|^2, |r1 r_m|, 2 k x0 + phi) at the evaluation wavenumber."""
    k = np.asarray(k, dtype=float)
    r_m, t_m = membrane_amplitudes(cavity.membrane, k)
    t_num = np.abs(cavity.mirror1.t * t_m) ** 2
    big_r = cavity.mirror1.r_mag * np.abs(r_m)
    if cavity.phi is not None:
        phase = 2.0 * k * cavity.x0 + cavity.phi
    else:
        phase = 2.0 * k * cavity.x0 + cavity.mirror1.r_phase \
            + np.angle(r_m)
    return t_num, big_r, phase


def tilted_transmission_analytic(cavity: TiltedCavity, k) -> TiltTransmission:
    """Beam-averaged transmission, second order in the tilt.

    The Gaussian average of the per-ray Airy transmission over
    x(y) = x0 + theta y, expanded to second order in k theta sigma:
    the first-order term integrates to zero by symmetry and the
    second-order term carries the mean square k^2 theta^2 sigma^2 / 4
    times the curvature of the Airy denominator. within_validity goes
    False when k theta sigma reaches the trusted limit.
    """
    k = np.asarray(k, dtype=float)
    t_num, big_r, phase = _airy_terms(cavity, k)
    expansion = np.abs(k * cavity.theta * cavity.sigma)
    within = bool(np.max(expansion) < TILT_VALIDITY_LIMIT)

    cos1 = np.cos(phase)
    cos2 = np.cos(2.0 * phase)
    den = 1.0 + big_r**2 - 2.0 * big_r * cos1
    if np.any(den < 1e-30):
        raise DegenerateConfigurationError(
            "unit-reflectivity surfaces exactly on resonance")
    correction = (big_r * ((1.0 + big_r**2) * cos1
                           + big_r * (cos2 - 3.0)) / den**2)
    power = t_num / den * (1.0 - expansion**2 * correction)
    power = float(power) if power.ndim == 0 else power
    return TiltTransmission(power=power, within_validity=within)


def tilted_transmission_quadrature(cavity: TiltedCavity, k: float,
                                   epsabs: float = QUAD_ABS_TOL) -> float:
    """Beam-averaged transmission by adaptive quadrature, exact in theta.

    Integrates the per-ray Airy transmission against the normalized 1D
    Gaussian weight over |y| <= 6 sigma (tail weight < 1e-15). Raises
    RuntimeError if the achieved absolute tolerance misses epsabs.
    Tightening epsabs well below the default lets this serve as the
    reference for the expansion's quartic error scaling.
    """
    k = float(k)
    t_num, big_r, phase0 = _airy_terms(cavity, k)
    t_num, big_r, phase0 = float(t_num), float(big_r), float(phase0)
    if 1.0 - big_r < 1e-12:
        raise DegenerateConfigurationError(
            "combined reflectivity at unity: the per-ray transmission has "
            "non-integrable poles across the beam")
    sigma = cavity.sigma
    norm = math.sqrt(2.0 / (math.pi * sigma**2))
    two_k_theta = 2.0 * k * cavity.theta

    def per_ray(y):
        den = (1.0 + big_r**2
               - 2.0 * big_r * math.cos(phase0 + two_k_theta * y))
        return t_num / den * norm * math.exp(-2.0 * y**2 / sigma**2)

    span = QUAD_SPAN_SIGMAS * sigma
    value, abserr = quad(per_ray, -span, span, epsabs=epsabs,
                         epsrel=min(1e-10, epsabs), limit=400)
    if abserr > epsabs:
        raise RuntimeError(
            f"adaptive quadrature achieved only {abserr:.2e} absolute "
            f"error (target {epsabs:.0e})")
    return value


def wavelength_spectrum(cavity: TiltedCavity, lambda_grid) -> np.ndarray:
    """Transmitted power across a wavelength sweep.

    Peaks sit where 2 k x0 + phi crosses a multiple of 2 pi; a smaller
    gap widens them and tilt lowers them. Mirror coefficients are taken
    constant over the sweep; the membrane's slab dispersion is kept.
    """
    lam = np.asarray(lambda_grid, dtype=float)
    if lam.size == 0:
        raise ValueError("wavelength grid is empty")
    if np.any(lam <= 0.0):
        raise ValueError("wavelengths must be positive")
    k = 2.0 * math.pi / lam
    power = tilted_transmission_analytic(cavity, k).power
    return np.asarray(power, dtype=float)


def flexure_sagitta(roc: float, lateral_offset) -> float | np.ndarray:
    """Sagitta of a circular arc: displacement offset^2 / (2 roc).

    Simplest chord model of the flexed frame; treats the pusher point as
    lying on a circle of the given radius of curvature.
    """
    if not (math.isfinite(roc) and roc > 0.0):
        raise ValueError(f"roc must be positive, got {roc!r}")
    offset = np.asarray(lateral_offset, dtype=float)
    out = offset**2 / (2.0 * roc)
    return float(out) if out.ndim == 0 else out
