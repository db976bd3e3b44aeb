"""Domain types for the mirror-membrane cavity and the membrane coefficient models.

All lengths are in meters, angles in radians, and rates in rad/s. Types are
immutable; every operation here is a pure function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constants import C, HBAR

_LOSSLESS_TOL = 1e-12


def _require_finite(**values):
    for name, v in values.items():
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class Mirror:
    """One cavity end mirror.

    Parameters
    ----------
    r_mag : float
        Amplitude reflectivity magnitude |r|, in [0, 1].
    t_mag : float
        Amplitude transmission magnitude |t|, in [0, 1].
    r_phase : float
        Reflection phase (rad). The amplitude coefficients used by the
        scattering model are r = r_mag*exp(i*r_phase) and
        t = i*t_mag*exp(i*r_phase), which is unitary for any phase and
        reduces to the (-|r|, i|t|) convention at r_phase = pi.
    loss_s : float
        Single-pass internal power attenuation exponent S (power factor
        e^{-S} per intracavity pass), applied at the inner interface.
    """

    r_mag: float
    t_mag: float
    r_phase: float = math.pi
    loss_s: float = 0.0

    def __post_init__(self):
        _require_finite(r_mag=self.r_mag, t_mag=self.t_mag,
                        r_phase=self.r_phase, loss_s=self.loss_s)
        if not 0.0 <= self.r_mag <= 1.0:
            raise ValueError(f"r_mag must be in [0, 1], got {self.r_mag}")
        if not 0.0 <= self.t_mag <= 1.0:
            raise ValueError(f"t_mag must be in [0, 1], got {self.t_mag}")
        if self.r_mag**2 + self.t_mag**2 > 1.0 + 1e-9:
            raise ValueError("r_mag^2 + t_mag^2 exceeds 1")
        if self.loss_s < 0.0:
            raise ValueError("loss_s must be non-negative")

    @property
    def r(self) -> complex:
        return self.r_mag * np.exp(1j * self.r_phase)

    @property
    def t(self) -> complex:
        return 1j * self.t_mag * np.exp(1j * self.r_phase)


@dataclass(frozen=True)
class MembraneCoefficients:
    """Resolved membrane scattering amplitudes at one wavenumber.

    A symmetric lossless scatterer: r_mag^2 + t_mag^2 = 1 and
    exp(2i(t_phase - r_phase)) = -1.
    """

    r_mag: float
    r_phase: float
    t_mag: float
    t_phase: float

    @property
    def r(self) -> complex:
        return self.r_mag * np.exp(1j * self.r_phase)

    @property
    def t(self) -> complex:
        return self.t_mag * np.exp(1j * self.t_phase)


@dataclass(frozen=True)
class MembraneSpec:
    """Membrane description: a dielectric slab or explicit coefficients.

    Use the factory methods:

    >>> MembraneSpec.slab(n=2.0, d=88e-9)
    >>> MembraneSpec.coefficients(r_mag=0.6, r_phase=np.pi, t_mag=0.8)

    A slab spec computes wavenumber-dependent coefficients on demand; a
    coefficient spec is wavenumber-independent. Explicit coefficients must be
    lossless: r_mag^2 + t_mag^2 = 1 and exp(2i(t_phase - r_phase)) = -1,
    both within 1e-12.
    """

    kind: str  # "slab" or "coeffs"
    n: float = 0.0
    d: float = 0.0
    coeffs: MembraneCoefficients | None = field(default=None)

    @staticmethod
    def slab(n: float, d: float) -> "MembraneSpec":
        _require_finite(n=n, d=d)
        if n < 1.0:
            raise ValueError(f"refractive index must be >= 1, got {n}")
        if d < 0.0:
            raise ValueError(f"thickness must be >= 0, got {d}")
        return MembraneSpec(kind="slab", n=n, d=d)

    @staticmethod
    def coefficients(r_mag: float, r_phase: float, t_mag: float,
                     t_phase: float | None = None) -> "MembraneSpec":
        """Explicit lossless coefficients.

        If t_phase is omitted it is set to r_phase - pi/2, the unitary choice.
        """
        _require_finite(r_mag=r_mag, r_phase=r_phase, t_mag=t_mag)
        if t_phase is None:
            t_phase = r_phase - math.pi / 2
        _require_finite(t_phase=t_phase)
        if not 0.0 <= r_mag <= 1.0:
            raise ValueError(f"r_mag must be in [0, 1], got {r_mag}")
        if abs(r_mag**2 + t_mag**2 - 1.0) > _LOSSLESS_TOL:
            raise ValueError(
                "lossless membrane requires r_mag^2 + t_mag^2 = 1 "
                f"(deviation {r_mag ** 2 + t_mag ** 2 - 1.0:.3e})")
        # exp(2i(phi_t - phi_r)) = -1  <=>  cos(2(phi_t - phi_r)) = -1
        if abs(math.cos(2.0 * (t_phase - r_phase)) + 1.0) > 1e-10:
            raise ValueError("membrane phases violate exp(2i(phi_t - phi_r)) = -1")
        return MembraneSpec(
            kind="coeffs",
            coeffs=MembraneCoefficients(r_mag, r_phase, t_mag, t_phase))

    def coefficients_at(self, k: float) -> MembraneCoefficients:
        """Scattering amplitudes at vacuum wavenumber k (rad/m)."""
        if self.kind == "coeffs":
            return self.coeffs
        return slab_coefficients(self.n, self.d, k).coeffs


@dataclass(frozen=True)
class CavityGeometry:
    """End mirror spacing, membrane position, and operating point.

    length_l : m, mirror-to-mirror spacing L.
    membrane_x : m, membrane position x measured from mirror 1, 0 < x < L.
    mode_index_n : longitudinal index N of the target resonance (k_N = pi N / L).
    wavenumber_k : rad/m, nominal operating wavenumber (e.g. 2 pi / 1550 nm).
    """

    length_l: float
    membrane_x: float
    mode_index_n: int
    wavenumber_k: float

    def __post_init__(self):
        _require_finite(length_l=self.length_l, membrane_x=self.membrane_x,
                        wavenumber_k=self.wavenumber_k)
        if self.length_l <= 0.0:
            raise ValueError("length_l must be positive")
        if not 0.0 < self.membrane_x < self.length_l:
            raise ValueError("membrane_x must satisfy 0 < x < L")
        if self.mode_index_n < 1:
            raise ValueError("mode_index_n must be >= 1")
        if self.wavenumber_k <= 0.0:
            raise ValueError("wavenumber_k must be positive")

    @property
    def wavelength(self) -> float:
        return 2.0 * math.pi / self.wavenumber_k


@dataclass(frozen=True)
class MechanicalMode:
    """Mechanical oscillator parameters of the membrane mode.

    x_zpf is derived on construction as sqrt(hbar / (2 m Omega)).
    """

    mass_m: float
    omega_mech: float

    def __post_init__(self):
        if not (math.isfinite(self.mass_m) and self.mass_m > 0.0):
            raise ValueError("mass_m must be positive and finite")
        if not (math.isfinite(self.omega_mech) and self.omega_mech > 0.0):
            raise ValueError("omega_mech must be positive and finite")

    @property
    def x_zpf(self) -> float:
        return zero_point_motion(self.mass_m, self.omega_mech)


# ---------------------------------------------------------------------------
# operations


def slab_coefficients(n: float, d: float, k) -> MembraneSpec:
    """Amplitude coefficients of a lossless dielectric slab in vacuum.

    Two-interface composition at normal incidence. With the single-interface
    reflection rho = (1 - n)/(1 + n) and internal phase beta = n k d:

        r = rho (1 - e^{2 i beta}) / (1 - rho^2 e^{2 i beta})
        t = (1 - rho^2) e^{i beta} / (1 - rho^2 e^{2 i beta})

    The result is symmetric (same from both sides) and unitary:
    |r|^2 + |t|^2 = 1 with exp(2i(phi_t - phi_r)) = -1.

    Parameters
    ----------
    n : refractive index (>= 1)
    d : thickness (m)
    k : vacuum wavenumber (rad/m), scalar

    Returns
    -------
    MembraneSpec (coefficient variant)
    """
    _require_finite(n=n, d=d, k=float(k))
    if n < 1.0 or d < 0.0 or k <= 0.0:
        raise ValueError("slab requires n >= 1, d >= 0, k > 0")
    r, t = slab_amplitudes(n, d, k)
    return MembraneSpec(
        kind="coeffs",
        coeffs=MembraneCoefficients(
            r_mag=float(abs(r)), r_phase=float(np.angle(r)),
            t_mag=float(abs(t)), t_phase=float(np.angle(t))))


def slab_amplitudes(n: float, d: float, k):
    """Complex (r, t) of a lossless slab; vectorized over wavenumber k."""
    rho = (1.0 - n) / (1.0 + n)
    beta = n * np.asarray(k, dtype=float) * d
    e2 = np.exp(2j * beta)
    denom = 1.0 - rho**2 * e2
    r = rho * (1.0 - e2) / denom
    t = (1.0 - rho**2) * np.exp(1j * beta) / denom
    return r, t


def membrane_amplitudes(membrane: MembraneSpec, k):
    """Complex (r, t) of a membrane spec; vectorized over wavenumber k."""
    if membrane.kind == "coeffs":
        shape = np.shape(k)
        c = membrane.coeffs
        return (np.broadcast_to(c.r, shape).copy() if shape else c.r,
                np.broadcast_to(c.t, shape).copy() if shape else c.t)
    return slab_amplitudes(membrane.n, membrane.d, k)


def thin_membrane_coefficients(n: float, d: float, k: float) -> MembraneSpec:
    """Delta-sheet membrane convention: the slab collapsed to zero thickness.

    r = i zeta / (1 - i zeta),  t = 1 / (1 - i zeta),  zeta = k d (n^2 - 1) / 2.

    Agrees with slab_coefficients to first order in the optical thickness and
    is the convention used by resonance-map fits in the membrane-cavity
    literature; at finite thickness it overestimates |r| for the same d, which
    is why such fits systematically underestimate thickness.
    """
    _require_finite(n=n, d=d, k=k)
    if n < 1.0 or d < 0.0 or k <= 0.0:
        raise ValueError("thin membrane requires n >= 1, d >= 0, k > 0")
    zeta = 0.5 * k * d * (n**2 - 1.0)
    denom = 1.0 - 1j * zeta
    r = 1j * zeta / denom
    t = 1.0 / denom
    return MembraneSpec(
        kind="coeffs",
        coeffs=MembraneCoefficients(
            r_mag=float(abs(r)), r_phase=float(np.angle(r)),
            t_mag=float(abs(t)), t_phase=float(np.angle(t))))


def fsr(length_l: float) -> float:
    """Empty-cavity free spectral range omega_FSR = pi c / L (rad/s)."""
    if not (math.isfinite(length_l) and length_l > 0.0):
        raise ValueError(f"length_l must be positive, got {length_l!r}")
    return math.pi * C / length_l


def zero_point_motion(mass_m: float, omega_mech: float) -> float:
    """Zero-point motion sqrt(hbar / (2 m Omega)) in meters."""
    if not (math.isfinite(mass_m) and mass_m > 0.0):
        raise ValueError("mass_m must be positive")
    if not (math.isfinite(omega_mech) and omega_mech > 0.0):
        raise ValueError("omega_mech must be positive")
    return math.sqrt(HBAR / (2.0 * mass_m * omega_mech))
