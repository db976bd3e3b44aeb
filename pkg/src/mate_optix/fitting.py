"""Parameter extraction: a damped least-squares engine and the measurement
pipelines built on it.

The engine (least_squares_solve) is a Levenberg-style damped Gauss-Newton
iteration with central-difference Jacobians, written against FitProblem so
each pipeline stays thin: a forward model assembled from the other modules
plus data, packaged as a weighted residual closure.

Pipelines
---------
fit_resonance_map
    Shared membrane parameters plus one quartic actuator-calibration
    polynomial per axis, fit simultaneously to several longitudinal modes'
    resonance ridges.
fit_loss_budget
    Mode matching, input-coupler transmission and internal loss, and the
    far-mirror effective transmission, fit jointly to decay-rate and
    resonant-reflection sweeps versus membrane position.
fit_transmission_global
    Tilted mirror-membrane transmission spectra tied together by a linear
    tilt-versus-gap law, with the absolute interference order selected by
    an exhaustive integer scan.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from scipy.optimize import brentq

from .constants import C
from .core import (
    CavityGeometry,
    MembraneSpec,
    Mirror,
    fsr,
    slab_coefficients,
    thin_membrane_coefficients,
)
from .errors import FitFailedError, RootNotFoundError
from .resonance import kappa as decay_rate
from .resonance import mate_detuning, solve_resonant_k
from .spectra import CavityModel, stack_response
from .tilt import TiltedCavity, wavelength_spectrum

GRADIENT_TOL = 1e-8
JACOBIAN_RELATIVE_STEP = 1e-6
DEGENERACY_CONDITION_LIMIT = 1e8


# ---------------------------------------------------------------------------
# problem statement and result types


@dataclass(frozen=True)
class FitProblem:
    """A weighted residual closure plus the parameter vector it runs over.

    residual maps the full parameter vector (fixed entries included) to the
    weighted residual vector, model minus data over sigma. Bounds default
    to unbounded; fixed entries are held at their initial values.
    sigma_scaled declares that the residuals are already in units of the
    per-point standard deviation, so parameter covariance at the optimum
    needs no reduced-chi-square rescaling.
    """

    residual: Callable[[np.ndarray], np.ndarray]
    names: tuple[str, ...]
    initial: tuple[float, ...]
    lower: tuple[float, ...] = ()
    upper: tuple[float, ...] = ()
    fixed: tuple[bool, ...] = ()
    data: Any = None
    sigma_scaled: bool = False

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        initial = tuple(float(v) for v in self.initial)
        n = len(names)
        if n == 0:
            raise ValueError("parameter vector is empty")
        if len(set(names)) != n:
            raise ValueError("parameter names must be unique")
        lower = (tuple(float(v) for v in self.lower)
                 if len(self.lower) else (-math.inf,) * n)
        upper = (tuple(float(v) for v in self.upper)
                 if len(self.upper) else (math.inf,) * n)
        fixed = (tuple(bool(v) for v in self.fixed)
                 if len(self.fixed) else (False,) * n)
        if not (len(initial) == len(lower) == len(upper) == len(fixed) == n):
            raise ValueError("names, initial, bounds and fixed flags must "
                             "have matching lengths")
        for name, lo, hi, value in zip(names, lower, upper, initial):
            if not math.isfinite(value):
                raise ValueError(f"initial value of {name} is not finite")
            if not lo <= value <= hi:
                raise ValueError(
                    f"initial value of {name} ({value!r}) lies outside "
                    f"[{lo!r}, {hi!r}]")
        if all(fixed):
            raise ValueError("at least one parameter must be free")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "fixed", fixed)


@dataclass(frozen=True)
class PolyStretch:
    """Quartic actuator calibration u -> c0 + c1 u + c2 u^2 + c3 u^3 + c4 u^4.

    Meant to act on an axis normalized to [-1, 1]; the physical scale lives
    in a separate multiplier so the linear coefficient can stay pinned at 1
    during fits. Monotonicity is a property of the fitted map over the data
    range and is checked numerically with monotone_on, not enforced at
    construction.
    """

    c0: float = 0.0
    c1: float = 1.0
    c2: float = 0.0
    c3: float = 0.0
    c4: float = 0.0

    def __post_init__(self):
        for label in ("c0", "c1", "c2", "c3", "c4"):
            if not math.isfinite(getattr(self, label)):
                raise ValueError(f"{label} must be finite")

    def coefficients(self) -> tuple[float, float, float, float, float]:
        return (self.c0, self.c1, self.c2, self.c3, self.c4)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        out = self.c0 + u * (self.c1 + u * (self.c2 + u * (self.c3 + u * self.c4)))
        return float(out) if out.ndim == 0 else out

    def derivative(self, u):
        u = np.asarray(u, dtype=float)
        out = self.c1 + u * (2.0 * self.c2 + u * (3.0 * self.c3 + u * 4.0 * self.c4))
        return float(out) if out.ndim == 0 else out

    def monotone_on(self, lo: float = -1.0, hi: float = 1.0,
                    samples: int = 801) -> bool:
        """True when the map is strictly monotone over [lo, hi] (sampled)."""
        d = self.derivative(np.linspace(lo, hi, samples))
        return bool(d.min() > 0.0 or d.max() < 0.0)

    def invert(self, value, lo: float = -1.0, hi: float = 1.0):
        """Solve self(u) = value for u in [lo, hi]; map must be monotone."""
        if not self.monotone_on(lo, hi):
            raise ValueError("stretch is not monotone over the bracket")
        values = np.atleast_1d(np.asarray(value, dtype=float))
        f_lo, f_hi = self(lo), self(hi)
        low, high = min(f_lo, f_hi), max(f_lo, f_hi)
        out = np.empty_like(values)
        for i, v in enumerate(values):
            if not low <= v <= high:
                raise ValueError(
                    f"value {v!r} outside the mapped range [{low!r}, {high!r}]")
            out[i] = brentq(lambda u: self(u) - v, lo, hi, xtol=1e-15)
        return float(out[0]) if np.isscalar(value) else out


@dataclass(frozen=True)
class FitResult:
    """Optimum report of a damped least-squares solve.

    uncertainties are one-sigma half-widths from the quadratic expansion of
    chi-square at the optimum: zero for fixed parameters, infinite along
    numerically null directions. gradient_norm is the scaled measure used
    by the convergence test (see least_squares_solve); converged guarantees
    it finished below gradient_tol.
    """

    names: tuple[str, ...]
    params: tuple[float, ...]
    uncertainties: tuple[float, ...]
    chi2: float
    chi2_reduced: float
    residuals: np.ndarray
    converged: bool
    iterations: int
    gradient_norm: float
    gradient_tol: float = GRADIENT_TOL
    flags: tuple[str, ...] = ()
    extras: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.params) != len(self.names):
            raise ValueError("params must match names")
        if len(self.uncertainties) != len(self.names):
            raise ValueError("uncertainties must match names")
        if not self.chi2 >= 0.0:
            raise ValueError(f"chi2 must be non-negative, got {self.chi2!r}")
        if not all(u >= 0.0 for u in self.uncertainties):
            raise ValueError("uncertainties must be non-negative")
        if (self.converged and "step-converged" not in self.flags
                and not self.gradient_norm < self.gradient_tol):
            raise ValueError("converged requires the gradient measure below "
                             "its tolerance (or the step-converged flag)")

    def value(self, name: str) -> float:
        return self.params[self.names.index(name)]

    def sigma(self, name: str) -> float:
        return self.uncertainties[self.names.index(name)]

    def as_dict(self) -> dict:
        """JSON-ready summary; non-finite numbers become None."""
        return {
            "names": list(self.names),
            "params": [_jsonable(v) for v in self.params],
            "uncertainties": [_jsonable(v) for v in self.uncertainties],
            "chi2": _jsonable(self.chi2),
            "chi2_reduced": _jsonable(self.chi2_reduced),
            "converged": self.converged,
            "iterations": self.iterations,
            "gradient_norm": _jsonable(self.gradient_norm),
            "flags": list(self.flags),
            "extras": _jsonable(dict(self.extras)),
        }


def _jsonable(obj):
    """Recursively convert to JSON-encodable values (non-finite -> None)."""
    if isinstance(obj, PolyStretch):
        return {"c0": obj.c0, "c1": obj.c1, "c2": obj.c2,
                "c3": obj.c3, "c4": obj.c4}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if obj is None or isinstance(obj, str):
        return obj
    return repr(obj)


# ---------------------------------------------------------------------------
# damped Gauss-Newton engine


def _scaled_gradient(jac: np.ndarray, residual: np.ndarray,
                     projected_g: np.ndarray) -> float:
    """max_j |g_j| / (|J_j| |r|): the cosine between r and the j-th column.

    Dimensionless in both parameter and residual units, zero at an exact
    root, and insensitive to the (arbitrary) overall weighting scale.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        rnorm = float(np.linalg.norm(residual))
        if rnorm == 0.0:
            return 0.0
        colnorm = np.linalg.norm(jac, axis=0)
        ok = colnorm > 0.0
        if not np.any(ok):
            return 0.0
        out = np.max(np.abs(projected_g[ok]) / (colnorm[ok] * rnorm))
    return float(out)


def least_squares_solve(problem: FitProblem, *,
                        max_iterations: int = 200,
                        gradient_tol: float = GRADIENT_TOL,
                        damping_init: float = 1e-3,
                        damping_max: float = 1e12) -> FitResult:
    """Minimize the sum of squared residuals by damped Gauss-Newton steps.

    Jacobians are central differences with per-parameter relative step
    1e-6 (unit absolute fallback for parameters at zero), columns clipped
    into the bounds. Steps solve (J^T J + lam diag(J^T J)) dp = -J^T r;
    a step that raises the cost escalates lam tenfold, an accepted one
    relaxes it. The system is solved in the column-normalized basis so
    parameters of wildly different units keep the normal matrix within
    float64's usable condition range.

    Convergence is declared when the scaled gradient measure (largest
    cosine between the residual vector and a Jacobian column, with
    components pinned at an active bound projected out) drops below
    gradient_tol. On exactly representable data the optimum leaves the
    residual at the evaluation-noise floor, where a cosine stops
    resolving a direction; a stall whose near-undamped step is below 1e-7
    relative parameter precision then counts as converged and carries the
    "step-converged" flag (the threshold sits orders of magnitude below
    the statistical uncertainty of any parameter these pipelines
    produce, while a genuinely wedged stall wants a far larger step). Hitting max_iterations or stalling anywhere else is flagged
    instead of raising.

    Raises
    ------
    FitFailedError
        if a residual evaluation returns non-finite entries (the offending
        parameter vector rides on the exception), or if the normal
        equations stay unsolvable through the full damping escalation.
    """
    lower = np.array(problem.lower, dtype=float)
    upper = np.array(problem.upper, dtype=float)
    fixed = np.array(problem.fixed, dtype=bool)
    free_idx = np.flatnonzero(~fixed)
    p = np.array(problem.initial, dtype=float)
    scale_ref = np.abs(p)

    def evaluate(vec: np.ndarray) -> np.ndarray:
        out = np.asarray(problem.residual(vec), dtype=float).ravel()
        if out.size == 0:
            raise ValueError("residual evaluator returned no points")
        if not np.all(np.isfinite(out)):
            raise FitFailedError(
                "residual vector contains non-finite entries",
                params=np.array(vec))
        return out

    def jacobian(at: np.ndarray, npoints: int) -> np.ndarray:
        jac = np.zeros((npoints, free_idx.size))
        for col, j in enumerate(free_idx):
            scale = max(abs(at[j]), scale_ref[j])
            h = JACOBIAN_RELATIVE_STEP * (scale if scale > 0.0 else 1.0)
            hi_pt = min(at[j] + h, upper[j])
            lo_pt = max(at[j] - h, lower[j])
            span = hi_pt - lo_pt
            if span <= 0.0:
                continue
            forward = at.copy()
            forward[j] = hi_pt
            backward = at.copy()
            backward[j] = lo_pt
            jac[:, col] = (evaluate(forward) - evaluate(backward)) / span
        return jac

    r = evaluate(p)
    with np.errstate(over="ignore"):
        cost = float(r @ r)
    history = [cost]
    lam = damping_init
    converged = False
    stalled = False
    step_converged = False
    iterations = 0
    jac = None

    while iterations < max_iterations:
        iterations += 1
        jac = jacobian(p, r.size)
        with np.errstate(over="ignore", invalid="ignore"):
            g = jac.T @ r
        projected = g.copy()
        projected[(p[free_idx] <= lower[free_idx]) & (g > 0.0)] = 0.0
        projected[(p[free_idx] >= upper[free_idx]) & (g < 0.0)] = 0.0
        if _scaled_gradient(jac, r, projected) < gradient_tol:
            converged = True
            break

        # Marquardt damping in the column-normalized basis: parameters of
        # wildly different units would otherwise push the normal matrix
        # past float64's usable condition range
        with np.errstate(over="ignore", invalid="ignore"):
            colnorm = np.linalg.norm(jac, axis=0)
            col_scale = np.where(colnorm > 0.0, colnorm, 1.0)
            jac_s = jac / col_scale
            g_s = jac_s.T @ r
            normal_s = jac_s.T @ jac_s
        solvable = (np.all(np.isfinite(colnorm))
                    and np.all(np.isfinite(normal_s))
                    and np.all(np.isfinite(g_s)))
        improved = False
        solved_any = False
        while solvable and lam <= damping_max:
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    step_s = np.linalg.solve(
                        normal_s + lam * np.eye(normal_s.shape[0]), -g_s)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(step_s)):
                lam *= 10.0
                continue
            solved_any = True
            trial = p.copy()
            trial[free_idx] = np.clip(p[free_idx] + step_s / col_scale,
                                      lower[free_idx], upper[free_idx])
            r_trial = evaluate(trial)
            with np.errstate(over="ignore"):
                cost_trial = float(r_trial @ r_trial)
            if cost_trial < cost:
                p, r, cost = trial, r_trial, cost_trial
                history.append(cost)
                lam = max(lam * 0.25, 1e-14)
                improved = True
                break
            lam *= 10.0
        if not improved:
            if not solved_any:
                raise FitFailedError(
                    "normal equations stayed singular through the damping "
                    "escalation", params=p.copy())
            lam = min(lam, damping_max)
            # distinguish a rounding-limited fixed point from a true stall:
            # on exactly representable data the optimum leaves the residual
            # at rounding noise where the cosine measure cannot resolve a
            # direction, but the near-undamped step collapses to nothing
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    probe_s = np.linalg.solve(
                        normal_s + 1e-14 * np.eye(normal_s.shape[0]), -g_s)
                    probe = probe_s / col_scale
                    rel_step = np.max(np.abs(probe) / np.maximum(
                        np.maximum(np.abs(p[free_idx]),
                                   scale_ref[free_idx]), 1e-300))
                except np.linalg.LinAlgError:
                    rel_step = math.inf
            if np.isfinite(rel_step) and rel_step < 1e-7:
                step_converged = True
            else:
                stalled = True
            break

    # final curvature at the resting point (fresh when the last loop pass
    # accepted a step before running out of budget)
    jac = jacobian(p, r.size)
    with np.errstate(over="ignore", invalid="ignore"):
        g = jac.T @ r
    projected = g.copy()
    projected[(p[free_idx] <= lower[free_idx]) & (g > 0.0)] = 0.0
    projected[(p[free_idx] >= upper[free_idx]) & (g < 0.0)] = 0.0
    gradient_measure = _scaled_gradient(jac, r, projected)
    converged = converged or gradient_measure < gradient_tol

    flags: list[str] = []
    if step_converged and not converged:
        converged = True
        flags.append("step-converged")
    if not converged:
        flags.append("stalled" if stalled else "max-iterations")

    chi2 = cost
    dof = r.size - free_idx.size
    chi2_reduced = chi2 / dof if dof >= 1 else math.nan
    covariance_scale = 1.0
    if not problem.sigma_scaled and dof >= 1:
        covariance_scale = chi2 / dof

    # curvature analysis in the column-normalized basis: the condition
    # number then measures parameter collinearity, not unit spread
    with np.errstate(over="ignore", invalid="ignore"):
        colnorm = np.linalg.norm(jac, axis=0)
        col_scale = np.where((colnorm > 0.0) & np.isfinite(colnorm),
                             colnorm, 1.0)
        normal_s = (jac / col_scale).T @ (jac / col_scale)
    if np.all(np.isfinite(normal_s)):
        vals, vecs = np.linalg.eigh(normal_s)
    else:
        vals = np.zeros(free_idx.size)
        vecs = np.eye(free_idx.size)
    vmax = float(vals[-1]) if vals.size else 0.0
    good = vals > max(vmax, 0.0) * 1e-14
    condition = math.inf
    if np.all(good) and vals.size:
        condition = vmax / float(vals[0])
    sigma_free = np.full(free_idx.size, math.inf)
    correlation = np.eye(free_idx.size)
    if np.any(good):
        cov_s = ((vecs[:, good] / vals[good]) @ vecs[:, good].T
                 * covariance_scale)
        variance_s = np.diag(cov_s).copy()
        null_weight = (vecs[:, ~good] ** 2).sum(axis=1)
        sigma_free = np.sqrt(np.maximum(variance_s, 0.0)) / col_scale
        sigma_free[null_weight > 1e-10] = math.inf
        denom = np.sqrt(np.outer(np.maximum(variance_s, 0.0),
                                 np.maximum(variance_s, 0.0)))
        with np.errstate(invalid="ignore", divide="ignore"):
            correlation = np.where(denom > 0.0, cov_s / denom, 0.0)
        np.fill_diagonal(correlation, 1.0)
    if condition > DEGENERACY_CONDITION_LIMIT:
        flags.append("degenerate-parameters")

    uncertainties = np.zeros(p.size)
    uncertainties[free_idx] = sigma_free

    extras = {
        "condition_number": condition,
        "correlation": correlation,
        "correlation_names": tuple(problem.names[j] for j in free_idx),
        "cost_history": tuple(history),
        "damping_final": lam,
        "n_points": int(r.size),
    }
    return FitResult(
        names=problem.names,
        params=tuple(float(v) for v in p),
        uncertainties=tuple(float(v) for v in uncertainties),
        chi2=chi2,
        chi2_reduced=chi2_reduced,
        residuals=r.copy(),
        converged=converged,
        iterations=iterations,
        gradient_norm=gradient_measure,
        gradient_tol=gradient_tol,
        flags=tuple(flags),
        extras=extras,
    )


# ---------------------------------------------------------------------------
# measurement data carriers


def _as_sorted_1d(values, reference_order=None):
    arr = np.array(values, dtype=float).ravel()
    if reference_order is not None:
        arr = arr[reference_order]
    return arr


@dataclass(frozen=True)
class ModeTrace:
    """One longitudinal mode's resonance ridge in raw actuator units.

    raw_x and raw_detuning are parallel samples of the two piezo axes along
    the ridge; branch_n is the longitudinal index. sigma, when given, is
    the one-sigma uncertainty of the physical detuning in rad/s (scalar or
    per point). Samples are stored sorted by raw_x because the map model
    unwraps its phase along that ordering.
    """

    raw_x: np.ndarray
    raw_detuning: np.ndarray
    branch_n: int
    sigma: float | np.ndarray | None = None

    def __post_init__(self):
        raw_x = np.array(self.raw_x, dtype=float).ravel()
        raw_det = np.array(self.raw_detuning, dtype=float).ravel()
        if raw_x.size != raw_det.size:
            raise ValueError("raw_x and raw_detuning must have equal length")
        if raw_x.size < 9:
            raise ValueError("a trace needs at least 9 samples")
        if not (np.all(np.isfinite(raw_x)) and np.all(np.isfinite(raw_det))):
            raise ValueError("trace samples must be finite")
        if self.branch_n < 1:
            raise ValueError("branch_n must be >= 1")
        order = np.argsort(raw_x, kind="stable")
        sigma = self.sigma
        if sigma is not None:
            sigma_arr = np.array(sigma, dtype=float).ravel()
            if sigma_arr.size == 1:
                sigma_arr = np.full(raw_x.size, float(sigma_arr[0]))
            elif sigma_arr.size != raw_x.size:
                raise ValueError("sigma must be scalar or match the samples")
            if not np.all(sigma_arr > 0.0):
                raise ValueError("sigma must be positive")
            sigma = sigma_arr[order]
        object.__setattr__(self, "raw_x", raw_x[order])
        object.__setattr__(self, "raw_detuning", raw_det[order])
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True)
class SweepData:
    """Samples of one observable versus membrane position."""

    x: np.ndarray
    y: np.ndarray
    sigma: float | np.ndarray | None = None

    def __post_init__(self):
        x = np.array(self.x, dtype=float).ravel()
        y = np.array(self.y, dtype=float).ravel()
        if x.size != y.size:
            raise ValueError("x and y must have equal length")
        if x.size < 2:
            raise ValueError("a sweep needs at least 2 samples")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("sweep samples must be finite")
        sigma = self.sigma
        if sigma is not None:
            sigma_arr = np.array(sigma, dtype=float).ravel()
            if sigma_arr.size == 1:
                sigma_arr = np.full(x.size, float(sigma_arr[0]))
            elif sigma_arr.size != x.size:
                raise ValueError("sigma must be scalar or match the samples")
            if not np.all(sigma_arr > 0.0):
                raise ValueError("sigma must be positive")
            sigma = sigma_arr
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True)
class TransmissionSweep:
    """Transmitted power versus wavelength at one fixed mirror-membrane gap.

    mode_offset is the interference order of this sweep relative to the
    reference sweep (offset 0); the scanned integer sets the reference's
    absolute order, so this sweep's order is the sum of the two.
    """

    mode_offset: int
    wavelengths: np.ndarray
    power: np.ndarray
    sigma: float | np.ndarray | None = None

    def __post_init__(self):
        lam = np.array(self.wavelengths, dtype=float).ravel()
        power = np.array(self.power, dtype=float).ravel()
        if lam.size != power.size:
            raise ValueError("wavelengths and power must have equal length")
        if lam.size < 9:
            raise ValueError("a sweep needs at least 9 samples")
        if not np.all(lam > 0.0):
            raise ValueError("wavelengths must be positive")
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(power))):
            raise ValueError("sweep samples must be finite")
        order = np.argsort(lam, kind="stable")
        sigma = self.sigma
        if sigma is not None:
            sigma_arr = np.array(sigma, dtype=float).ravel()
            if sigma_arr.size == 1:
                sigma_arr = np.full(lam.size, float(sigma_arr[0]))
            elif sigma_arr.size != lam.size:
                raise ValueError("sigma must be scalar or match the samples")
            if not np.all(sigma_arr > 0.0):
                raise ValueError("sigma must be positive")
            sigma = sigma_arr[order]
        object.__setattr__(self, "wavelengths", lam[order])
        object.__setattr__(self, "power", power[order])
        object.__setattr__(self, "sigma", sigma)


# ---------------------------------------------------------------------------
# resonance-map pipeline


def map_model_detuning(x_positions, branch_n: int, membrane: MembraneSpec,
                       length_l: float) -> np.ndarray:
    """Closed-form branch detuning unwrapped along ordered positions.

    The folded closed form jumps by one free spectral range at the sawtooth
    edge; the physical ridge is continuous, so the model for fitting is the
    unwrapped curve (plus a per-mode constant that the fit carries
    separately).
    """
    det = np.atleast_1d(mate_detuning(x_positions, branch_n, membrane,
                                      length_l))
    return np.unwrap(det, period=fsr(length_l))


def _axis_normalization(values: np.ndarray) -> tuple[float, float]:
    center = 0.5 * (float(values.max()) + float(values.min()))
    half = 0.5 * (float(values.max()) - float(values.min()))
    if half <= 0.0:
        raise ValueError("axis has zero span; cannot normalize")
    return center, half


_MAP_MODELS = ("thin", "slab", "coeffs")


def fit_resonance_map(mode_traces: Sequence[ModeTrace],
                      init: Mapping[str, float], *,
                      length_l: float,
                      membrane_model: str = "thin",
                      refractive_index: float = 2.0,
                      max_iterations: int = 300) -> FitResult:
    """Simultaneous multi-mode resonance-map fit with piezo calibration.

    For trace m with longitudinal index N_m the model is

        det_scale * Pv(v) = offset_m + closed-form detuning at
                            x = x_scale * Px(u)

    where u and v are the raw axes normalized to [-1, 1] over the pooled
    data and Px, Pv are quartic stretch polynomials. Px keeps its linear
    coefficient at 1 (x_scale carries the physical slope) and a free
    constant; Pv additionally pins its constant to 0 because the per-mode
    offsets already carry that freedom.

    membrane_model selects the shared membrane parameterization: "thin"
    (delta-sheet of index refractive_index, parameter thickness_d), "slab"
    (finite slab, parameter thickness_d) or "coeffs" (parameters r_mag and
    r_phase, wavenumber independent).

    init must provide x_scale (m per normalized unit), x_c0 and det_scale
    (rad/s per normalized unit), plus thickness_d or r_mag/r_phase per the
    model. Stretch coefficients default to 0 and per-mode offsets to a
    data-derived estimate. The position-map constant is bounded within a
    quarter interference period of its initial value, so coarse ambiguity
    must be resolved before fitting.

    The fitted stretches are checked for strict monotonicity over the data
    range; failure adds the "non-monotone-stretch" flag. If the fitted
    oscillation amplitude is indistinguishable from the residual scatter
    the membrane parameters are reported as unconstrained via the
    "membrane-unconstrained" flag.
    """
    traces = tuple(mode_traces)
    if len(traces) < 3:
        raise ValueError("at least 3 mode traces are required")
    if membrane_model not in _MAP_MODELS:
        raise ValueError(f"membrane_model must be one of {_MAP_MODELS}")
    if length_l <= 0.0:
        raise ValueError("length_l must be positive")

    w_fsr = fsr(length_l)
    wavelength = 2.0 * length_l / min(t.branch_n for t in traces)

    x_scale_init = float(init["x_scale"])
    x_c0_init = float(init["x_c0"])
    det_scale_init = float(init["det_scale"])
    if x_scale_init == 0.0 or det_scale_init == 0.0:
        raise ValueError("x_scale and det_scale initial values must be "
                         "nonzero")
    # the pooled normalized x axis spans 2 units; the physical span must
    # cover at least half a wavelength for the membrane phase to wind once
    if abs(x_scale_init) * 2.0 < 0.5 * wavelength:
        raise ValueError("traces must span at least half a wavelength of "
                         "membrane travel (judged from the initial x_scale)")

    all_x = np.concatenate([t.raw_x for t in traces])
    all_v = np.concatenate([t.raw_detuning for t in traces])
    x_center, x_half = _axis_normalization(all_x)
    v_center, v_half = _axis_normalization(all_v)
    u_norm = [(t.raw_x - x_center) / x_half for t in traces]
    v_norm = [(t.raw_detuning - v_center) / v_half for t in traces]

    sigmas = [t.sigma for t in traces]
    sigma_scaled = all(s is not None for s in sigmas)
    weights = [s if s is not None else 1.0 for s in sigmas]

    if membrane_model == "coeffs":
        membrane_names = ("r_mag", "r_phase")
        membrane_init = (float(init["r_mag"]), float(init["r_phase"]))
        membrane_lower = (0.0, -4.0 * math.pi)
        membrane_upper = (0.999, 4.0 * math.pi)
    else:
        membrane_names = ("thickness_d",)
        membrane_init = (float(init["thickness_d"]),)
        membrane_lower = (0.0,)
        membrane_upper = (1e-6,)

    def build_membranes(mem_params) -> list[MembraneSpec]:
        if membrane_model == "coeffs":
            r_mag, r_phase = mem_params
            spec = MembraneSpec.coefficients(
                r_mag, r_phase, math.sqrt(max(1.0 - r_mag**2, 0.0)))
            return [spec] * len(traces)
        if membrane_model == "slab":
            spec = MembraneSpec.slab(refractive_index, mem_params[0])
            return [spec] * len(traces)
        return [thin_membrane_coefficients(
            refractive_index, mem_params[0],
            math.pi * t.branch_n / length_l) for t in traces]

    n_mem = len(membrane_names)
    quarter_period = 0.25 * wavelength / abs(x_scale_init)

    stretch_names = ("x_scale", "x_c0", "x_c2", "x_c3", "x_c4",
                     "det_scale", "det_c2", "det_c3", "det_c4")
    offset_names = tuple(f"offset_{i}" for i in range(len(traces)))
    names = membrane_names + stretch_names + offset_names

    def unpack(p):
        mem = p[:n_mem]
        x_scale, x_c0, x_c2, x_c3, x_c4 = p[n_mem:n_mem + 5]
        det_scale, det_c2, det_c3, det_c4 = p[n_mem + 5:n_mem + 9]
        offsets = p[n_mem + 9:]
        return (mem, PolyStretch(x_c0, 1.0, x_c2, x_c3, x_c4), x_scale,
                PolyStretch(0.0, 1.0, det_c2, det_c3, det_c4), det_scale,
                offsets)

    def residual(p):
        mem, x_poly, x_scale, v_poly, det_scale, offsets = unpack(p)
        membranes = build_membranes(mem)
        parts = []
        for u, v, trace, spec, offset, weight in zip(
                u_norm, v_norm, traces, membranes, offsets, weights):
            x_phys = x_scale * x_poly(u)
            model = map_model_detuning(x_phys, trace.branch_n, spec,
                                       length_l) + offset
            data = det_scale * v_poly(v)
            parts.append((model - data) / weight)
        return np.concatenate(parts)

    seed_membranes = build_membranes(membrane_init)
    v_poly_init = PolyStretch(0.0, 1.0,
                              float(init.get("det_c2", 0.0)),
                              float(init.get("det_c3", 0.0)),
                              float(init.get("det_c4", 0.0)))

    # coarse phase scan before the solve: the cost is oscillatory in the
    # position-map constant, and a phase error of a few percent of the
    # interference period already feeds the amplitude-collapse valley.
    # Each candidate eliminates a per-trace affine map (gain and offset,
    # closed form) so an imperfect initial det_scale or membrane strength
    # cannot outvote the phase; only the right phase nulls the residual
    # with any gain at all.
    def _phase_scan(c0: float) -> tuple[float, float]:
        x_poly = PolyStretch(c0, 1.0,
                             float(init.get("x_c2", 0.0)),
                             float(init.get("x_c3", 0.0)),
                             float(init.get("x_c4", 0.0)))
        total = 0.0
        gains = []
        for u, v, trace, spec, weight in zip(u_norm, v_norm, traces,
                                             seed_membranes, weights):
            model = map_model_detuning(x_scale_init * x_poly(u),
                                       trace.branch_n, spec, length_l)
            data = det_scale_init * v_poly_init(v)
            inv_w2 = np.broadcast_to(
                1.0 / np.asarray(weight, dtype=float) ** 2, model.shape)
            s_w = float(np.sum(inv_w2))
            s_m = float(np.sum(inv_w2 * model))
            s_y = float(np.sum(inv_w2 * data))
            s_mm = float(np.sum(inv_w2 * model * model))
            s_my = float(np.sum(inv_w2 * model * data))
            den = s_w * s_mm - s_m * s_m
            if den > 0.0:
                gain = (s_w * s_my - s_m * s_y) / den
            else:
                gain = 0.0
            base = (s_y - gain * s_m) / s_w
            total += float(np.sum(
                inv_w2 * (gain * model + base - data) ** 2))
            gains.append(gain)
        return total, float(np.mean(gains))

    candidates = np.linspace(x_c0_init - quarter_period,
                             x_c0_init + quarter_period, 41)
    candidates = np.append(candidates, x_c0_init)
    scan = [(c0,) + _phase_scan(float(c0)) for c0 in candidates]
    best_c0, _, best_gain = min(scan, key=lambda row: row[1])
    x_c0_init = float(best_c0)
    # det_scale absorbs the winning gain: the scan fitted gain * model to
    # det_scale_init * stretch(v), so the physical scale is init / gain
    if 0.2 < best_gain < 5.0:
        det_scale_init /= best_gain

    # data-derived offset seeds: align each trace's mean model and data
    offsets_init = []
    x_poly_init = PolyStretch(x_c0_init, 1.0,
                              float(init.get("x_c2", 0.0)),
                              float(init.get("x_c3", 0.0)),
                              float(init.get("x_c4", 0.0)))
    for u, v, trace, spec in zip(u_norm, v_norm, traces, seed_membranes):
        key = f"offset_{len(offsets_init)}"
        if key in init:
            offsets_init.append(float(init[key]))
            continue
        model = map_model_detuning(x_scale_init * x_poly_init(u),
                                   trace.branch_n, spec, length_l)
        data = det_scale_init * v_poly_init(v)
        offsets_init.append(float(np.mean(data) - np.mean(model)))

    initial = membrane_init + (
        x_scale_init, x_c0_init,
        float(init.get("x_c2", 0.0)), float(init.get("x_c3", 0.0)),
        float(init.get("x_c4", 0.0)),
        det_scale_init,
        float(init.get("det_c2", 0.0)), float(init.get("det_c3", 0.0)),
        float(init.get("det_c4", 0.0))) + tuple(offsets_init)

    def ordered(a, b):
        return (a, b) if a <= b else (b, a)

    x_scale_lo, x_scale_hi = ordered(0.2 * x_scale_init, 5.0 * x_scale_init)
    det_scale_lo, det_scale_hi = ordered(0.2 * det_scale_init,
                                         5.0 * det_scale_init)
    lower = membrane_lower + (
        x_scale_lo, x_c0_init - quarter_period, -2.0, -2.0, -2.0,
        det_scale_lo, -2.0, -2.0, -2.0) + (-math.inf,) * len(traces)
    upper = membrane_upper + (
        x_scale_hi, x_c0_init + quarter_period, 2.0, 2.0, 2.0,
        det_scale_hi, 2.0, 2.0, 2.0) + (math.inf,) * len(traces)

    problem = FitProblem(residual=residual, names=names, initial=initial,
                         lower=lower, upper=upper, data=traces,
                         sigma_scaled=sigma_scaled)
    result = least_squares_solve(problem, max_iterations=max_iterations)

    mem, x_poly, x_scale, v_poly, det_scale, _ = unpack(
        np.array(result.params))
    flags = list(result.flags)
    if not (x_poly.monotone_on() and v_poly.monotone_on()):
        flags.append("non-monotone-stretch")

    if membrane_model == "coeffs":
        r_mag_fit = float(mem[0])
    else:
        k_mean = math.pi * float(np.mean([t.branch_n for t in traces])) / length_l
        r_mag_fit = build_membranes(mem)[0].coefficients_at(k_mean).r_mag
    # unweighted residual scatter in rad/s, for the visibility heuristic
    if sigma_scaled:
        mean_sigma = float(np.mean(np.concatenate(
            [np.broadcast_to(np.asarray(w, dtype=float), u.shape)
             for w, u in zip(weights, u_norm)])))
    else:
        mean_sigma = 1.0
    scatter = float(np.sqrt(np.mean(result.residuals**2))) * mean_sigma
    oscillation = r_mag_fit * w_fsr
    if oscillation <= max(3.0 * scatter, 1e-9 * w_fsr):
        flags.append("membrane-unconstrained")

    extras = dict(result.extras)
    extras.update({
        "membrane_model": membrane_model,
        "x_stretch": x_poly,
        "detuning_stretch": v_poly,
        "x_normalization": (x_center, x_half),
        "detuning_normalization": (v_center, v_half),
        "branch_indices": tuple(t.branch_n for t in traces),
        "oscillation_scale": oscillation,
        "residual_scatter": scatter,
    })
    return replace(result, flags=tuple(flags), extras=extras)


# ---------------------------------------------------------------------------
# loss-budget pipeline


def _resonant_wavenumber(length_l: float, x: float, branch_n: int,
                         membrane: MembraneSpec) -> float:
    """Resonant k for the band, falling back to the adjacent bands.

    A strongly reflective membrane at a generic position can push a band's
    only root into a neighbor; the sweep must not die there, so the nearest
    surviving root is used.
    """
    geometry = CavityGeometry(length_l=length_l, membrane_x=x,
                              mode_index_n=branch_n,
                              wavenumber_k=math.pi * branch_n / length_l)
    for candidate in (branch_n, branch_n - 1, branch_n + 1):
        if candidate < 1:
            continue
        try:
            return solve_resonant_k(geometry, membrane,
                                    branch_n=candidate).wavenumber_k
        except RootNotFoundError:
            continue
    raise RootNotFoundError(
        f"no resonance found in band {branch_n} or its neighbors at "
        f"x = {x:.6e} m", bracket=None)


_LOSS_NAMES = ("mode_match_eps", "t1_sq", "loss_s1", "t2_sq")


def loss_budget_model(x_positions, resonant_k, params,
                      membrane: MembraneSpec,
                      length_l: float) -> tuple[np.ndarray, np.ndarray]:
    """(kappa, resonant reflection) for a loss-budget parameter vector.

    params holds (mode_match_eps, t1_sq, loss_s1, t2_sq). The decay rate
    uses the closed form with the input coupler's internal loss folded
    into an effective transmission (exact: both channels remove power at
    the same interface with the same intensity weight); the reflection is
    the full stack response at the solved resonant wavenumber.
    """
    eps, t1_sq, loss_s1, t2_sq = (float(v) for v in params)
    x_arr = np.asarray(x_positions, dtype=float)
    k_arr = np.asarray(resonant_k, dtype=float)
    mirror1 = Mirror(math.sqrt(1.0 - t1_sq), math.sqrt(t1_sq),
                     loss_s=loss_s1)
    mirror2 = Mirror(math.sqrt(1.0 - t2_sq), math.sqrt(t2_sq))
    mirror1_eff = Mirror(math.sqrt(max(1.0 - t1_sq - loss_s1, 0.0)),
                         math.sqrt(t1_sq + loss_s1))
    kappa_model = np.atleast_1d(decay_rate(x_arr, k_arr, membrane,
                                           mirror1_eff, mirror2, length_l))
    model = CavityModel(mirror1=mirror1, mirror2=mirror2, membrane=membrane,
                        length_l=length_l, mode_match_eps=eps)
    reflection = np.empty(x_arr.size)
    for i, (x, k) in enumerate(zip(np.ravel(x_arr), np.ravel(k_arr))):
        r_amp, _ = stack_response(model, k, float(x))
        reflection[i] = (1.0 - eps) + eps * abs(r_amp) ** 2
    return kappa_model, reflection


def fit_loss_budget(kappa_data: SweepData, reflection_data: SweepData,
                    init: Mapping[str, float], *,
                    membrane: MembraneSpec, length_l: float, branch_n: int,
                    max_iterations: int = 200) -> FitResult:
    """Joint decay-rate and resonant-reflection fit of the power budget.

    Free parameters: mode_match_eps, t1_sq (input coupler power
    transmission), loss_s1 (input coupler single-pass internal power loss)
    and t2_sq (far mirror transmission plus its internal loss). Both
    sweeps must share the membrane-position axis; the membrane and cavity
    length are held fixed. Resonant wavenumbers are solved once up front
    (they do not depend on the loss parameters).

    Per-point sigmas are taken from the SweepData when present (then chi2
    is in sigma units and the covariance needs no rescaling); otherwise
    each block is weighted by its own root-mean-square so the two
    observables enter the joint chi2 at comparable magnitude.

    The result's extras report the finesse ceiling 2 pi / loss_s1 implied
    by the fitted internal loss, and the correlation matrix; a curvature
    condition number above 1e8 adds the "degenerate-parameters" flag.
    """
    if kappa_data.x.size != reflection_data.x.size or not np.allclose(
            kappa_data.x, reflection_data.x, rtol=1e-12, atol=0.0):
        raise ValueError("kappa and reflection sweeps must share the same "
                         "membrane-position axis")
    for name in _LOSS_NAMES:
        if name not in init:
            raise ValueError(f"init must provide {name}")
    x_arr = kappa_data.x
    resonant_k = np.array([
        _resonant_wavenumber(length_l, float(x), branch_n, membrane)
        for x in x_arr])

    sigma_kappa = kappa_data.sigma
    sigma_reflection = reflection_data.sigma
    sigma_scaled = sigma_kappa is not None and sigma_reflection is not None
    weight_kappa = (sigma_kappa if sigma_kappa is not None
                    else float(np.sqrt(np.mean(kappa_data.y**2))))
    weight_reflection = (sigma_reflection if sigma_reflection is not None
                         else float(np.sqrt(np.mean(reflection_data.y**2))))

    def residual(p):
        kappa_model, reflection_model = loss_budget_model(
            x_arr, resonant_k, p, membrane, length_l)
        return np.concatenate([
            (kappa_model - kappa_data.y) / weight_kappa,
            (reflection_model - reflection_data.y) / weight_reflection])

    initial = tuple(float(init[name]) for name in _LOSS_NAMES)
    problem = FitProblem(
        residual=residual, names=_LOSS_NAMES, initial=initial,
        lower=(0.0, 1e-8, 0.0, 1e-8), upper=(1.0, 0.2, 0.1, 0.2),
        data=(kappa_data, reflection_data), sigma_scaled=sigma_scaled)
    result = least_squares_solve(problem, max_iterations=max_iterations)

    loss_s1 = result.value("loss_s1")
    extras = dict(result.extras)
    extras["finesse_bound"] = (2.0 * math.pi / loss_s1 if loss_s1 > 0.0
                               else math.inf)
    extras["resonant_wavenumbers"] = resonant_k
    return replace(result, extras=extras)


# ---------------------------------------------------------------------------
# global transmission pipeline


def _slab_reflection_phase(refractive_index: float, thickness_d: float,
                           k: float) -> float:
    return slab_coefficients(refractive_index, thickness_d, k).coeffs.r_phase


def _transmission_candidate(sweeps, init, l0: int, *, thickness_d: float,
                            refractive_index: float, beam_sigma: float,
                            mirror_phase: float, max_iterations: int,
                            gradient_tol: float) -> FitResult | None:
    """One least-squares solve at a fixed absolute interference order."""
    offsets = [s.mode_offset for s in sweeps]
    orders = [l0 + off for off in offsets]
    if min(orders) < 1:
        return None

    membrane = MembraneSpec.slab(refractive_index, thickness_d)
    ref_index = offsets.index(0)
    weights = [s.sigma if s.sigma is not None
               else float(np.sqrt(np.mean(s.power**2))) for s in sweeps]
    sigma_scaled = all(s.sigma is not None for s in sweeps)

    names = ["mode_order_l0", "r1_sq", "theta_0", "tilt_slope_a"]
    initial = [float(l0), float(init["r1_sq"]), float(init["theta_0"]),
               float(init["tilt_slope_a"])]
    lower = [float(l0), 0.5, -0.05, -1e6]
    upper = [float(l0), 1.0 - 1e-6, 0.05, 1e6]
    fixed = [True, False, False, False]
    for j, sweep in enumerate(sweeps):
        names.append(f"peak_lambda_{sweep.mode_offset}")
        key = f"peak_lambda_{sweep.mode_offset}"
        seed = (float(init[key]) if key in init else
                float(sweep.wavelengths[int(np.argmax(sweep.power))]))
        initial.append(seed)
        lower.append(float(sweep.wavelengths[0]))
        upper.append(float(sweep.wavelengths[-1]))
        fixed.append(False)

    def gap_positions(peak_lambdas):
        gaps = []
        for order, lam_pk in zip(orders, peak_lambdas):
            k_pk = 2.0 * math.pi / lam_pk
            phase = mirror_phase + _slab_reflection_phase(
                refractive_index, thickness_d, k_pk)
            gaps.append((2.0 * math.pi * order - phase) / (2.0 * k_pk))
        return gaps

    def residual(p):
        _, r1_sq, theta_0, slope_a = p[:4]
        gaps = gap_positions(p[4:])
        if min(gaps) <= 0.0:
            raise FitFailedError(
                "candidate order drives the gap non-positive",
                params=np.array(p))
        mirror1 = Mirror(math.sqrt(r1_sq), math.sqrt(1.0 - r1_sq),
                         r_phase=mirror_phase)
        gap_ref = gaps[ref_index]
        parts = []
        for sweep, gap, weight in zip(sweeps, gaps, weights):
            theta = theta_0 - slope_a * (gap - gap_ref)
            cavity = TiltedCavity(x0=gap, theta=theta, sigma=beam_sigma,
                                  mirror1=mirror1, membrane=membrane)
            model = wavelength_spectrum(cavity, sweep.wavelengths)
            parts.append((model - sweep.power) / weight)
        return np.concatenate(parts)

    problem = FitProblem(
        residual=residual, names=tuple(names), initial=tuple(initial),
        lower=tuple(lower), upper=tuple(upper), fixed=tuple(fixed),
        data=tuple(sweeps), sigma_scaled=sigma_scaled)
    return least_squares_solve(problem, max_iterations=max_iterations,
                               gradient_tol=gradient_tol)


def fit_transmission_global(sweeps: Sequence[TransmissionSweep],
                            init: Mapping[str, float], *,
                            l0_range: Sequence[int],
                            thickness_d: float,
                            refractive_index: float,
                            beam_sigma: float,
                            threads: int = 1,
                            max_iterations: int = 150,
                            gradient_tol: float = GRADIENT_TOL) -> FitResult:
    """Global tilted-transmission fit with an exhaustive integer-order scan.

    The membrane (thickness_d, refractive_index), the input mirror's
    reflection phase (pi) and the beam radius are held fixed. Shared free
    parameters: r1_sq (input mirror power reflectivity), theta_0 (tilt at
    the reference sweep) and tilt_slope_a (tilt change per meter of gap
    travel, through theta = theta_0 - tilt_slope_a * (gap - reference
    gap)); each sweep also frees its own peak wavelength, which pins its
    gap through the interference condition at its absolute order.

    Every candidate absolute order l0 in l0_range gets an independent
    solve (run concurrently when threads > 1); the returned result is the
    chi2 minimizer, with the full scan table in extras["l0_scan"].
    Candidates whose chi2 lies within 1 unit of the winner add the
    "ambiguous-l0" flag and are listed in extras["l0_near_ties"]. The
    near-tie rule is a likelihood-ratio test, so it is only meaningful
    when the sweeps carry per-point sigmas; without them the residuals
    are scaled by each sweep's rms and the flag fires conservatively. A
    best fit whose largest |k theta sigma| breaches the
    quadratic-expansion validity limit is flagged
    "outside-tilt-validity".

    init must provide r1_sq, theta_0 and tilt_slope_a; per-sweep peak
    wavelengths seed from each sweep's maximum unless given as
    peak_lambda_<mode_offset> entries.
    """
    sweeps = tuple(sweeps)
    if len(sweeps) < 3:
        raise ValueError("at least 3 transmission sweeps are required")
    offsets = [s.mode_offset for s in sweeps]
    if len(set(offsets)) != len(offsets):
        raise ValueError("mode offsets must be unique")
    if offsets.count(0) != 1:
        raise ValueError("exactly one sweep must carry mode_offset 0 (the "
                         "reference)")
    candidates = sorted(set(int(v) for v in l0_range))
    if not candidates:
        raise ValueError("l0_range is empty")
    for name in ("r1_sq", "theta_0", "tilt_slope_a"):
        if name not in init:
            raise ValueError(f"init must provide {name}")

    def run(l0: int) -> tuple[int, FitResult | None]:
        try:
            fit = _transmission_candidate(
                sweeps, init, l0, thickness_d=thickness_d,
                refractive_index=refractive_index, beam_sigma=beam_sigma,
                mirror_phase=math.pi, max_iterations=max_iterations,
                gradient_tol=gradient_tol)
        except FitFailedError:
            fit = None
        return l0, fit

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run, candidates))
    else:
        outcomes = [run(l0) for l0 in candidates]

    scan = []
    best: FitResult | None = None
    best_l0 = None
    for l0, fit in outcomes:
        if fit is None:
            scan.append({"l0": l0, "chi2": math.inf, "converged": False})
            continue
        scan.append({"l0": l0, "chi2": fit.chi2, "converged": fit.converged})
        if best is None or fit.chi2 < best.chi2:
            best, best_l0 = fit, l0
    if best is None:
        raise FitFailedError(
            "no candidate order produced a feasible fit", params=None)

    near_ties = tuple(row["l0"] for row in scan
                      if row["l0"] != best_l0
                      and row["chi2"] - best.chi2 < 1.0)
    flags = list(best.flags)
    if near_ties:
        flags.append("ambiguous-l0")

    # validity of the quadratic tilt expansion at the accepted optimum
    r1_sq = best.value("r1_sq")
    theta_0 = best.value("theta_0")
    slope_a = best.value("tilt_slope_a")
    membrane = MembraneSpec.slab(refractive_index, thickness_d)
    mirror1 = Mirror(math.sqrt(r1_sq), math.sqrt(1.0 - r1_sq))
    orders = [best_l0 + off for off in offsets]
    gaps = []
    for order, sweep in zip(orders, sweeps):
        lam_pk = best.value(f"peak_lambda_{sweep.mode_offset}")
        k_pk = 2.0 * math.pi / lam_pk
        phase = math.pi + _slab_reflection_phase(refractive_index,
                                                 thickness_d, k_pk)
        gaps.append((2.0 * math.pi * order - phase) / (2.0 * k_pk))
    gap_ref = gaps[offsets.index(0)]
    worst = 0.0
    for sweep, gap in zip(sweeps, gaps):
        theta = theta_0 - slope_a * (gap - gap_ref)
        k_max = 2.0 * math.pi / float(sweep.wavelengths[0])
        worst = max(worst, abs(k_max * theta * beam_sigma))
    cavity_probe = TiltedCavity(x0=gap_ref, theta=0.0, sigma=beam_sigma,
                                mirror1=mirror1, membrane=membrane)
    del cavity_probe  # construction validates the geometry
    if worst >= 0.3:
        flags.append("outside-tilt-validity")

    extras = dict(best.extras)
    extras.update({
        "l0_scan": tuple(scan),
        "l0_near_ties": near_ties,
        "mode_order_l0": int(best_l0),
        "gap_positions": tuple(gaps),
        "max_tilt_expansion": worst,
    })
    return replace(best, flags=tuple(flags), extras=extras)
