"""Engine and pipeline fits against closed-form references and frozen runs.

The damped-step engine is checked against weighted-regression formulas
(parameters, covariance, correlation), a curved valley, bound-pinned
optima and engineered failure modes. The pipeline tests run on the
synthetic datasets from synthdata, generated through the package's own
forward models with distortions applied in raw coordinates; numeric
expectations were frozen from those generating truths.
"""

import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

import synthdata
from mate_optix.core import MembraneSpec, fsr, thin_membrane_coefficients
from mate_optix.errors import FitFailedError
from mate_optix.fitting import (
    FitProblem,
    FitResult,
    ModeTrace,
    PolyStretch,
    SweepData,
    TransmissionSweep,
    fit_loss_budget,
    fit_resonance_map,
    fit_transmission_global,
    least_squares_solve,
    loss_budget_model,
    map_model_detuning,
)
from mate_optix.resonance import mate_detuning

T_GRID = np.linspace(0.0, 1.0, 40)
LINE_Y = 2.5 * T_GRID - 0.7


def line_problem(**kwargs):
    return FitProblem(residual=lambda p: p[0] * T_GRID + p[1] - LINE_Y,
                      names=("slope", "intercept"), initial=(0.0, 0.0),
                      **kwargs)


class TestFitProblem:
    def test_defaults_fill_in(self):
        prob = line_problem()
        assert prob.lower == (-math.inf, -math.inf)
        assert prob.upper == (math.inf, math.inf)
        assert prob.fixed == (False, False)

    @pytest.mark.parametrize("kwargs", [
        dict(names=("a", "a"), initial=(0.0, 0.0)),
        dict(names=("a",), initial=(math.nan,)),
        dict(names=("a",), initial=(2.0,), lower=(0.0,), upper=(1.0,)),
        dict(names=("a",), initial=(0.0,), fixed=(True,)),
        dict(names=("a", "b"), initial=(0.0,)),
        dict(names=(), initial=()),
    ])
    def test_rejects_inconsistent_input(self, kwargs):
        with pytest.raises(ValueError):
            FitProblem(residual=lambda p: p, **kwargs)


class TestPolyStretch:
    COEFFS = (0.1, 1.0, 0.05, -0.02, 0.01)

    def test_identity_default(self):
        assert PolyStretch()(0.5) == 0.5
        assert PolyStretch().derivative(0.37) == 1.0

    def test_matches_polyval(self):
        ps = PolyStretch(*self.COEFFS)
        u = np.linspace(-1.0, 1.0, 17)
        assert_allclose(ps(u), np.polyval(self.COEFFS[::-1], u), rtol=1e-14)
        dcoeffs = [4 * self.COEFFS[4], 3 * self.COEFFS[3],
                   2 * self.COEFFS[2], self.COEFFS[1]]
        assert_allclose(ps.derivative(u), np.polyval(dcoeffs, u), rtol=1e-14)

    def test_monotone_detection(self):
        assert PolyStretch(*self.COEFFS).monotone_on()
        assert PolyStretch(0.0, -1.0).monotone_on()      # decreasing is fine
        assert not PolyStretch(0.0, 1.0, 0.0, 0.0, -2.0).monotone_on()

    def test_invert_round_trip(self):
        ps = PolyStretch(*self.COEFFS)
        assert abs(ps.invert(ps(0.3)) - 0.3) < 1e-12
        u = np.linspace(-0.9, 0.9, 7)
        assert_allclose(ps.invert(ps(u)), u, atol=1e-12)

    def test_invert_rejects_bad_input(self):
        with pytest.raises(ValueError):
            PolyStretch(0.0, 1.0, 0.0, 0.0, -2.0).invert(0.1)
        with pytest.raises(ValueError):
            PolyStretch().invert(5.0)       # outside the mapped range
        with pytest.raises(ValueError):
            PolyStretch(math.inf)


class TestFitResult:
    @staticmethod
    def make(**over):
        base = dict(names=("a",), params=(1.0,), uncertainties=(0.1,),
                    chi2=1.0, chi2_reduced=1.0, residuals=np.zeros(3),
                    converged=False, iterations=4, gradient_norm=1.0)
        base.update(over)
        return FitResult(**base)

    def test_converged_requires_gradient_or_step_flag(self):
        with pytest.raises(ValueError):
            self.make(converged=True)
        assert self.make(converged=True, gradient_norm=1e-9).converged
        assert self.make(converged=True,
                         flags=("step-converged",)).converged

    def test_rejects_inconsistent_vectors(self):
        with pytest.raises(ValueError):
            self.make(params=(1.0, 2.0))
        with pytest.raises(ValueError):
            self.make(uncertainties=(-0.1,))
        with pytest.raises(ValueError):
            self.make(chi2=-1.0)

    def test_as_dict_is_json_ready(self):
        res = self.make(uncertainties=(math.inf,),
                        extras={"stretch": PolyStretch(0.1),
                                "arr": np.arange(3.0)})
        back = json.loads(json.dumps(res.as_dict()))
        assert back["uncertainties"][0] is None
        assert back["extras"]["stretch"] == {"c0": 0.1, "c1": 1.0, "c2": 0.0,
                                             "c3": 0.0, "c4": 0.0}
        assert back["extras"]["arr"] == [0.0, 1.0, 2.0]


class TestEngine:
    def test_exact_line(self):
        res = least_squares_solve(line_problem())
        assert res.converged
        assert abs(res.value("slope") - 2.5) < 1e-10
        assert abs(res.value("intercept") + 0.7) < 1e-10
        assert res.extras["n_points"] == T_GRID.size

    def test_weighted_regression_matches_closed_form(self):
        noise = 0.05
        rng = np.random.default_rng(1)
        y = LINE_Y + noise * rng.standard_normal(T_GRID.size)
        prob = FitProblem(
            residual=lambda p: (p[0] * T_GRID + p[1] - y) / noise,
            names=("slope", "intercept"), initial=(1.0, 0.0),
            sigma_scaled=True)
        res = least_squares_solve(prob)
        design = np.column_stack([T_GRID, np.ones_like(T_GRID)]) / noise
        ref, *_ = np.linalg.lstsq(design, y / noise, rcond=None)
        cov = np.linalg.inv(design.T @ design)
        assert res.converged
        assert_allclose(res.params, ref, rtol=1e-7)
        assert_allclose(res.uncertainties, np.sqrt(np.diag(cov)), rtol=1e-6)
        corr = res.extras["correlation"]
        assert_allclose(corr[0, 1], cov[0, 1] / math.sqrt(cov[0, 0] * cov[1, 1]),
                        rtol=1e-5)
        assert res.extras["correlation_names"] == ("slope", "intercept")
        history = res.extras["cost_history"]
        assert len(history) >= 2 and np.all(np.diff(history) < 0.0)

    def test_unweighted_covariance_rescaled(self):
        # without sigmas the covariance picks up the reduced chi-square
        rng = np.random.default_rng(2)
        y = LINE_Y + 0.08 * rng.standard_normal(T_GRID.size)
        prob = FitProblem(residual=lambda p: p[0] * T_GRID + p[1] - y,
                          names=("slope", "intercept"), initial=(0.0, 0.0))
        res = least_squares_solve(prob)
        design = np.column_stack([T_GRID, np.ones_like(T_GRID)])
        cov = np.linalg.inv(design.T @ design) * res.chi2_reduced
        assert_allclose(res.uncertainties, np.sqrt(np.diag(cov)), rtol=1e-6)
        assert_allclose(res.chi2_reduced, res.chi2 / (T_GRID.size - 2),
                        rtol=1e-12)

    def test_curved_valley(self):
        prob = FitProblem(
            residual=lambda p: np.array([10.0 * (p[1] - p[0] ** 2),
                                         1.0 - p[0]]),
            names=("x", "y"), initial=(-1.2, 1.0))
        res = least_squares_solve(prob)
        assert res.converged
        assert abs(res.value("x") - 1.0) < 1e-6
        assert abs(res.value("y") - 1.0) < 1e-6

    def test_mixed_scale_parameters(self):
        # twenty decades between parameter magnitudes; the normalized-basis
        # solve must keep both exact and report the collinearity, not the
        # unit spread, as the condition number
        t = np.linspace(0.1, 1.0, 30)
        y = 2e10 * (1e-10 * t) + 3e-10 * (1e10 * t * t)
        prob = FitProblem(
            residual=lambda p: p[0] * (1e-10 * t) + p[1] * (1e10 * t * t) - y,
            names=("huge", "tiny"), initial=(5e9, 1e-10))
        res = least_squares_solve(prob)
        assert res.converged
        assert_allclose(res.value("huge"), 2e10, rtol=1e-8)
        assert_allclose(res.value("tiny"), 3e-10, rtol=1e-8)
        assert res.extras["condition_number"] < 100.0

    def test_nan_residual_raises_with_snapshot(self):
        def bad(p):
            out = p[0] * T_GRID - LINE_Y
            if p[0] > 1.0:
                out = out.copy()
                out[3] = math.nan
            return out
        with pytest.raises(FitFailedError) as err:
            least_squares_solve(FitProblem(residual=bad, names=("a",),
                                           initial=(3.0,)))
        assert_allclose(err.value.params, [3.0])

    def test_unsolvable_normal_equations_raise(self):
        def insane(p):
            return np.array([1e200 * (p[0] - 1.0) ** 2 + 1e200,
                             1e200 * p[1]])
        with pytest.raises(FitFailedError):
            least_squares_solve(FitProblem(residual=insane, names=("a", "b"),
                                           initial=(0.0, 5.0)))

    def test_bound_pinned_convergence(self):
        # optimum outside the box: the pinned coordinate's gradient is
        # projected out, the free one still has to converge
        prob = FitProblem(
            residual=lambda p: np.array([p[0] - 5.0, 0.3 * (p[1] - 0.5)]),
            names=("a", "b"), initial=(1.0, 0.2),
            lower=(0.0, 0.0), upper=(2.0, 1.0))
        res = least_squares_solve(prob)
        assert res.converged
        assert res.value("a") == 2.0
        assert abs(res.value("b") - 0.5) < 1e-6

    def test_fixed_parameter_held(self):
        prob = FitProblem(residual=lambda p: p[1] * T_GRID + p[0] - LINE_Y,
                          names=("intercept", "slope"), initial=(-0.7, 1.0),
                          fixed=(True, False))
        res = least_squares_solve(prob)
        assert res.converged
        assert res.value("intercept") == -0.7
        assert res.sigma("intercept") == 0.0
        assert abs(res.value("slope") - 2.5) < 1e-9

    def test_collinear_parameters_flagged(self):
        prob = FitProblem(residual=lambda p: (p[0] + p[1]) * T_GRID - LINE_Y,
                          names=("a", "b"), initial=(0.5, 0.5))
        res = least_squares_solve(prob)
        assert "degenerate-parameters" in res.flags
        assert all(math.isinf(u) for u in res.uncertainties)
        best_sum = float(T_GRID @ LINE_Y) / float(T_GRID @ T_GRID)
        assert abs(res.value("a") + res.value("b") - best_sum) < 1e-6

    def test_iteration_budget_flag(self):
        prob = FitProblem(
            residual=lambda p: np.array([10.0 * (p[1] - p[0] ** 2),
                                         1.0 - p[0]]),
            names=("x", "y"), initial=(-1.2, 1.0))
        res = least_squares_solve(prob, max_iterations=3)
        assert not res.converged
        assert "max-iterations" in res.flags
        assert res.iterations == 3

    def test_zero_dof_reduced_chi2_is_nan(self):
        prob = FitProblem(
            residual=lambda p: np.array([p[0] - 1.0, p[1] - 2.0]),
            names=("a", "b"), initial=(0.0, 0.0))
        res = least_squares_solve(prob)
        assert math.isnan(res.chi2_reduced)
        assert res.converged

    def test_uncertainty_calibration(self):
        # 68 percent of noise draws must land within one reported sigma
        t = np.linspace(0.0, 2.0, 25)
        truth = (2.0, 1.3)
        sigma = 0.05
        rng = np.random.default_rng(909)
        trials = 250
        hits = np.zeros(2)
        for _ in range(trials):
            y = truth[0] * np.exp(-truth[1] * t) \
                + sigma * rng.standard_normal(t.size)
            prob = FitProblem(
                residual=lambda p, y=y: (p[0] * np.exp(-p[1] * t) - y) / sigma,
                names=("amp", "rate"), initial=(1.5, 1.0), sigma_scaled=True)
            res = least_squares_solve(prob)
            assert res.converged
            hits[0] += abs(res.value("amp") - truth[0]) <= res.sigma("amp")
            hits[1] += abs(res.value("rate") - truth[1]) <= res.sigma("rate")
        coverage = hits / trials
        assert np.all(coverage > 0.58) and np.all(coverage < 0.78)


class TestTraceContainers:
    def test_mode_trace_sorts_and_aligns_sigma(self):
        x = np.array([5.0, 1.0, 4.0, 2.0, 9.0, 3.0, 7.0, 6.0, 8.0])
        trace = ModeTrace(raw_x=x, raw_detuning=2.0 * x, branch_n=10,
                          sigma=0.1 * x)
        assert np.all(np.diff(trace.raw_x) > 0)
        assert_allclose(trace.raw_detuning, 2.0 * trace.raw_x)
        assert_allclose(trace.sigma, 0.1 * trace.raw_x)

    def test_mode_trace_scalar_sigma_broadcast(self):
        trace = ModeTrace(raw_x=np.arange(9.0), raw_detuning=np.zeros(9),
                          branch_n=1, sigma=0.5)
        assert trace.sigma.shape == (9,)
        assert np.all(trace.sigma == 0.5)

    @pytest.mark.parametrize("kwargs", [
        dict(raw_x=np.arange(5.0), raw_detuning=np.zeros(5), branch_n=1),
        dict(raw_x=np.arange(9.0), raw_detuning=np.zeros(8), branch_n=1),
        dict(raw_x=np.arange(9.0), raw_detuning=np.zeros(9), branch_n=0),
        dict(raw_x=np.arange(9.0), raw_detuning=np.zeros(9), branch_n=1,
             sigma=-1.0),
    ])
    def test_mode_trace_rejects(self, kwargs):
        with pytest.raises(ValueError):
            ModeTrace(**kwargs)

    def test_sweep_data_rejects(self):
        with pytest.raises(ValueError):
            SweepData(x=np.array([1.0]), y=np.array([2.0]))
        with pytest.raises(ValueError):
            SweepData(x=np.arange(4.0), y=np.zeros(4), sigma=np.ones(3))

    def test_transmission_sweep_sorts(self):
        lam = np.linspace(1.6e-6, 1.5e-6, 11)
        sweep = TransmissionSweep(mode_offset=0, wavelengths=lam,
                                  power=np.arange(11.0))
        assert np.all(np.diff(sweep.wavelengths) > 0)
        assert sweep.power[0] == 10.0


# --- resonance-map pipeline -----------------------------------------------


@pytest.fixture(scope="module")
def thin_traces():
    return synthdata.make_map_traces(synthdata.thin_map_membrane())


@pytest.fixture(scope="module")
def thin_fit(thin_traces):
    return fit_resonance_map(thin_traces,
                             synthdata.map_init(thickness_d=75e-9),
                             length_l=synthdata.MAP_L)


@pytest.fixture(scope="module")
def noisy_thin_fit(thin_traces):
    sig_det = 0.003 * 9.42e9
    noisy = synthdata.make_map_traces(synthdata.thin_map_membrane(),
                                      noise=sig_det, seed=77)
    all_v = np.concatenate([t.raw_detuning for t in thin_traces])
    init = dict(thickness_d=75e-9, x_scale=1.15e-6, x_c0=0.10,
                det_scale=1.03 * synthdata.MAP_DET_SCALE
                * (all_v.max() - all_v.min()) / 2.0 / 3.5)
    return fit_resonance_map(noisy, init, length_l=synthdata.MAP_L)


@pytest.fixture(scope="module")
def slab_data_thin_fit():
    traces = synthdata.make_map_traces(synthdata.slab_map_membrane(88e-9))
    return fit_resonance_map(traces, synthdata.map_init(thickness_d=85e-9),
                             length_l=synthdata.MAP_L)


class TestResonanceMap:
    def test_model_detuning_is_unwrapped(self):
        membrane = thin_membrane_coefficients(2.0, 80e-9,
                                              math.pi * 129033 / 0.1)
        x = np.linspace(0.0, 2.4e-6, 400)
        det = map_model_detuning(x, 129033, membrane, 0.1)
        raw = np.atleast_1d(mate_detuning(x, 129033, membrane, 0.1))
        cycles = (det - raw) / fsr(0.1)
        assert_allclose(cycles, np.round(cycles), atol=1e-9)
        assert np.max(np.abs(np.diff(det))) < 0.5 * fsr(0.1)

    def test_round_trip_recovers_membrane_and_actuator(self, thin_fit):
        res = thin_fit
        assert res.converged
        assert "step-converged" in res.flags
        d = res.value("thickness_d")
        assert abs(d - synthdata.MAP_THICKNESS) / synthdata.MAP_THICKNESS < 1e-9
        assert abs(res.value("x_scale") - synthdata.MAP_X_SCALE) \
            / synthdata.MAP_X_SCALE < 1e-6
        px = synthdata.MAP_PX
        assert_allclose(
            [res.value("x_c0"), res.value("x_c2"),
             res.value("x_c3"), res.value("x_c4")],
            [px.c0, px.c2, px.c3, px.c4], atol=1e-5)
        assert res.extras["condition_number"] < 1e6

    def test_normalization_and_extras(self, thin_fit):
        res = thin_fit
        assert_allclose(res.extras["x_normalization"], (2.2, 7.3), atol=1e-12)
        assert res.extras["branch_indices"] == synthdata.MAP_BRANCHES
        assert res.extras["membrane_model"] == "thin"
        assert res.extras["n_points"] == sum(g.size for g in synthdata.MAP_GRIDS)
        assert isinstance(res.extras["x_stretch"], PolyStretch)
        assert res.extras["x_stretch"].monotone_on()
        assert res.extras["detuning_stretch"].monotone_on()
        assert res.extras["oscillation_scale"] > 100.0 * res.extras["residual_scatter"]

    def test_noisy_fit_is_calibrated(self, noisy_thin_fit):
        res = noisy_thin_fit
        assert res.converged
        dof = res.extras["n_points"] - 13
        assert dof == 152
        assert 120.0 < res.chi2 < 190.0      # frozen run: 147.9
        d = res.value("thickness_d")
        sigma_d = res.sigma("thickness_d")
        assert 5e-10 < sigma_d < 2e-9
        assert abs(d - synthdata.MAP_THICKNESS) < 3.0 * sigma_d

    def test_slab_data_thin_model_underestimates_thickness(
            self, slab_data_thin_fit):
        res = slab_data_thin_fit
        assert res.converged
        d = res.value("thickness_d")
        assert 60e-9 < d < 88e-9
        assert_allclose(d, 8.0722e-8, rtol=2e-3)   # frozen run
        rms = math.sqrt(float(np.mean(res.residuals ** 2)))
        assert rms < 1e-3 * fsr(synthdata.MAP_L)

    def test_flat_membrane_flagged_unconstrained(self):
        jitter = 1e-5 * fsr(synthdata.MAP_L)
        traces = synthdata.make_map_traces(synthdata.thin_map_membrane(0.0),
                                           noise=jitter, seed=3)
        res = fit_resonance_map(traces, synthdata.map_init(thickness_d=40e-9),
                                length_l=synthdata.MAP_L)
        assert "membrane-unconstrained" in res.flags

    def test_folded_actuator_flagged_non_monotone(self):
        folded = PolyStretch(0.10, 1.0, 1.2, 0.0, 0.0)
        traces = synthdata.make_map_traces(synthdata.thin_map_membrane(),
                                           px=folded)
        init = dict(x_scale=synthdata.MAP_X_SCALE, x_c0=0.10,
                    det_scale=synthdata.MAP_DET_SCALE * 0.57,
                    thickness_d=synthdata.MAP_THICKNESS, x_c2=1.2)
        res = fit_resonance_map(traces, init, length_l=synthdata.MAP_L)
        assert "non-monotone-stretch" in res.flags
        assert not res.extras["x_stretch"].monotone_on()
        assert abs(res.value("x_c2") - 1.2) < 0.05

    def test_validation(self, thin_traces):
        init = synthdata.map_init(thickness_d=75e-9)
        with pytest.raises(ValueError):
            fit_resonance_map(thin_traces[:2], init, length_l=synthdata.MAP_L)
        with pytest.raises(ValueError):
            fit_resonance_map(thin_traces, init, length_l=synthdata.MAP_L,
                              membrane_model="bogus")
        with pytest.raises(ValueError):
            tiny = dict(init, x_scale=1e-8)    # span below half a wavelength
            fit_resonance_map(thin_traces, tiny, length_l=synthdata.MAP_L)
        with pytest.raises(KeyError):
            fit_resonance_map(thin_traces, synthdata.map_init(),
                              length_l=synthdata.MAP_L)


# --- loss-budget pipeline --------------------------------------------------


@pytest.fixture(scope="module")
def loss_curves():
    return synthdata.loss_curves()


@pytest.fixture(scope="module")
def noisy_loss_fit(loss_curves):
    x_grid, _, kap, refl = loss_curves
    rng = np.random.default_rng(20260822)
    sig_k = 0.01 * kap
    sig_r = 0.01 * refl
    kap_n = kap + sig_k * rng.standard_normal(kap.size)
    refl_n = refl + sig_r * rng.standard_normal(refl.size)
    return fit_loss_budget(SweepData(x_grid, kap_n, sigma=sig_k),
                           SweepData(x_grid, refl_n, sigma=sig_r),
                           synthdata.LOSS_INIT,
                           membrane=synthdata.LOSS_MEMBRANE,
                           length_l=synthdata.LOSS_L,
                           branch_n=synthdata.LOSS_BRANCH)


class TestLossBudget:
    def test_forward_model_ranges(self, loss_curves):
        _, k_res, kap, refl = loss_curves
        # the resonant k oscillates boundedly inside its branch band
        band_lo = math.pi * synthdata.LOSS_BRANCH / synthdata.LOSS_L
        assert np.all((k_res >= band_lo) & (k_res < band_lo + math.pi / synthdata.LOSS_L))
        assert k_res.max() - k_res.min() < math.pi / synthdata.LOSS_L
        assert_allclose(kap.min(), 5.7894e6, rtol=1e-3)
        assert_allclose(kap.max(), 3.0563e7, rtol=1e-3)
        assert_allclose(refl.min(), 0.4589, atol=2e-4)
        assert_allclose(refl.max(), 0.6773, atol=2e-4)
        assert np.all((refl > 0.0) & (refl < 1.0))

    def test_noiseless_round_trip(self, loss_curves):
        x_grid, k_res, kap, refl = loss_curves
        res = fit_loss_budget(SweepData(x_grid, kap), SweepData(x_grid, refl),
                              synthdata.LOSS_INIT,
                              membrane=synthdata.LOSS_MEMBRANE,
                              length_l=synthdata.LOSS_L,
                              branch_n=synthdata.LOSS_BRANCH)
        assert res.converged
        for name, truth in synthdata.LOSS_TRUTH.items():
            assert abs(res.value(name) - truth) / truth < 1e-8, name
        assert_allclose(res.extras["finesse_bound"],
                        2.0 * math.pi / res.value("loss_s1"), rtol=1e-12)
        assert_allclose(res.extras["resonant_wavenumbers"], k_res, rtol=1e-12)
        assert res.extras["condition_number"] < 1e4
        assert "degenerate-parameters" not in res.flags

    def test_noisy_recovery_frozen(self, noisy_loss_fit):
        res = noisy_loss_fit
        assert res.converged
        frozen = dict(mode_match_eps=7.51741e-1, t1_sq=7.53362e-3,
                      loss_s1=8.11288e-4, t2_sq=5.94121e-4)
        for name, value in frozen.items():
            assert_allclose(res.value(name), value, rtol=1e-3)
        assert 57.0 < res.chi2 < 61.0          # frozen run: 59.11, dof 46
        assert_allclose(res.extras["finesse_bound"], 7744.7, atol=10.0)
        for name, truth in synthdata.LOSS_TRUTH.items():
            assert abs(res.value(name) - truth) < 3.0 * res.sigma(name), name

    def test_noisy_sigmas_match_monte_carlo(self, noisy_loss_fit):
        for name, mc in synthdata.LOSS_MC_SIGMA.items():
            ratio = noisy_loss_fit.sigma(name) / mc
            assert 0.8 < ratio < 1.25, name

    def test_correlation_structure(self, noisy_loss_fit):
        corr = np.asarray(noisy_loss_fit.extras["correlation"])
        names = noisy_loss_fit.extras["correlation_names"]
        assert names == ("mode_match_eps", "t1_sq", "loss_s1", "t2_sq")
        assert_allclose(corr, corr.T, atol=1e-12)
        assert_allclose(np.diag(corr), 1.0, atol=1e-12)
        i_eps, i_t1, i_t2 = 0, 1, 3
        assert corr[i_eps, i_t1] > 0.9         # budget shares one scale
        assert corr[i_eps, i_t2] < -0.85

    def test_validation(self, loss_curves):
        x_grid, _, kap, refl = loss_curves
        with pytest.raises(ValueError):
            fit_loss_budget(SweepData(x_grid, kap),
                            SweepData(x_grid + 1e-9, refl),
                            synthdata.LOSS_INIT,
                            membrane=synthdata.LOSS_MEMBRANE,
                            length_l=synthdata.LOSS_L,
                            branch_n=synthdata.LOSS_BRANCH)
        incomplete = dict(synthdata.LOSS_INIT)
        del incomplete["loss_s1"]
        with pytest.raises(ValueError):
            fit_loss_budget(SweepData(x_grid, kap), SweepData(x_grid, refl),
                            incomplete, membrane=synthdata.LOSS_MEMBRANE,
                            length_l=synthdata.LOSS_L,
                            branch_n=synthdata.LOSS_BRANCH)

    @pytest.mark.slow
    def test_monte_carlo_coverage(self, loss_curves):
        x_grid, _, kap, refl = loss_curves
        sig_k = 0.01 * kap
        sig_r = 0.01 * refl
        rng = np.random.default_rng(5150)
        trials = 200
        params, sigmas, converged = [], [], 0
        for _ in range(trials):
            kn = kap + sig_k * rng.standard_normal(kap.size)
            rn = refl + sig_r * rng.standard_normal(refl.size)
            res = fit_loss_budget(SweepData(x_grid, kn, sigma=sig_k),
                                  SweepData(x_grid, rn, sigma=sig_r),
                                  synthdata.LOSS_INIT,
                                  membrane=synthdata.LOSS_MEMBRANE,
                                  length_l=synthdata.LOSS_L,
                                  branch_n=synthdata.LOSS_BRANCH)
            params.append(res.params)
            sigmas.append(res.uncertainties)
            converged += res.converged
        assert converged >= 0.95 * trials
        params = np.array(params)
        sigmas = np.array(sigmas)
        truth = np.array(list(synthdata.LOSS_TRUTH.values()))
        coverage = np.mean(np.abs(params - truth) <= sigmas, axis=0)
        assert np.all(coverage > 0.58) and np.all(coverage < 0.78), coverage


# --- tilted-transmission pipeline ------------------------------------------


@pytest.fixture(scope="module")
def clean_sweeps():
    return synthdata.make_transmission_sweeps()


@pytest.fixture(scope="module")
def clean_transmission_fit(clean_sweeps):
    return fit_transmission_global(
        clean_sweeps, synthdata.TRANS_INIT, l0_range=range(21, 28),
        thickness_d=synthdata.TRANS_THICKNESS,
        refractive_index=synthdata.TRANS_INDEX,
        beam_sigma=synthdata.TRANS_SIGMA_BEAM)


class TestTransmissionGlobal:
    def test_order_scan_unique_minimum(self, clean_transmission_fit):
        res = clean_transmission_fit
        assert res.extras["mode_order_l0"] == synthdata.TRANS_ORDER
        assert "ambiguous-l0" not in res.flags
        scan = {row["l0"]: row["chi2"] for row in res.extras["l0_scan"]}
        assert set(scan) == set(range(21, 28))
        runner_up = min(v for k, v in scan.items()
                        if k != synthdata.TRANS_ORDER)
        assert runner_up - res.chi2 > 100.0    # frozen run: gap 366
        assert res.value("mode_order_l0") == synthdata.TRANS_ORDER
        assert res.sigma("mode_order_l0") == 0.0

    def test_noiseless_parameter_recovery(self, clean_transmission_fit):
        res = clean_transmission_fit
        assert res.converged
        assert abs(res.value("r1_sq") - synthdata.TRANS_R1_SQ) < 1e-5
        assert abs(res.value("theta_0") - synthdata.TRANS_THETA0) \
            / synthdata.TRANS_THETA0 < 0.01
        assert abs(res.value("tilt_slope_a") - synthdata.TRANS_SLOPE) \
            / synthdata.TRANS_SLOPE < 0.01

    def test_gap_jitters_recovered(self, clean_transmission_fit):
        res = clean_transmission_fit
        gaps = np.asarray(res.extras["gap_positions"])
        expected = np.array([synthdata.transmission_gap(synthdata.TRANS_ORDER
                                                        + off) + jit
                             for off, jit in zip(synthdata.TRANS_OFFSETS,
                                                 synthdata.TRANS_JITTERS)])
        assert_allclose(gaps, expected, atol=1e-10)
        assert 0.1 < res.extras["max_tilt_expansion"] < 0.3
        assert "outside-tilt-validity" not in res.flags

    def test_noisy_fit_threaded(self):
        sweeps = synthdata.make_transmission_sweeps(noise=1.0, seed=42)
        res = fit_transmission_global(
            sweeps, synthdata.TRANS_INIT, l0_range=range(21, 28),
            thickness_d=synthdata.TRANS_THICKNESS,
            refractive_index=synthdata.TRANS_INDEX,
            beam_sigma=synthdata.TRANS_SIGMA_BEAM, threads=2)
        assert res.extras["mode_order_l0"] == synthdata.TRANS_ORDER
        assert res.converged
        dof = 6 * 141 - 9
        assert 0.7 * dof < res.chi2 < 1.3 * dof    # frozen run: 816.7
        for name, truth in (("r1_sq", synthdata.TRANS_R1_SQ),
                            ("theta_0", synthdata.TRANS_THETA0),
                            ("tilt_slope_a", synthdata.TRANS_SLOPE)):
            pull = (res.value(name) - truth) / res.sigma(name)
            assert abs(pull) < 3.5, name

    def test_weak_data_flags_ambiguous_order(self, clean_sweeps):
        inflated = [TransmissionSweep(s.mode_offset, s.wavelengths, s.power,
                                      sigma=40.0 * s.sigma[0])
                    for s in clean_sweeps]
        res = fit_transmission_global(
            inflated, synthdata.TRANS_INIT, l0_range=range(21, 28),
            thickness_d=synthdata.TRANS_THICKNESS,
            refractive_index=synthdata.TRANS_INDEX,
            beam_sigma=synthdata.TRANS_SIGMA_BEAM)
        assert "ambiguous-l0" in res.flags
        ties = res.extras["l0_near_ties"]
        assert 23 in ties
        assert synthdata.TRANS_ORDER not in ties

    def test_zero_tilt_recovered_as_negligible(self):
        sweeps = synthdata.make_transmission_sweeps(theta0=0.0, slope=0.0)
        res = fit_transmission_global(
            sweeps, dict(r1_sq=0.99, theta_0=5e-5, tilt_slope_a=5.0),
            l0_range=range(22, 27), thickness_d=synthdata.TRANS_THICKNESS,
            refractive_index=synthdata.TRANS_INDEX,
            beam_sigma=synthdata.TRANS_SIGMA_BEAM)
        assert res.extras["mode_order_l0"] == synthdata.TRANS_ORDER
        expansion = abs(res.value("theta_0")) * synthdata.TRANS_K0 \
            * synthdata.TRANS_SIGMA_BEAM
        assert expansion < 0.02

    def test_stable_without_low_order_sweeps(self, clean_sweeps,
                                             clean_transmission_fit):
        # the broadest (lowest-order) sweeps constrain the gap least, so
        # dropping them must not move the shared parameters beyond their
        # uncertainties
        kept = clean_sweeps[:4]
        res = fit_transmission_global(
            kept, synthdata.TRANS_INIT, l0_range=range(21, 28),
            thickness_d=synthdata.TRANS_THICKNESS,
            refractive_index=synthdata.TRANS_INDEX,
            beam_sigma=synthdata.TRANS_SIGMA_BEAM)
        full = clean_transmission_fit
        assert res.extras["mode_order_l0"] == synthdata.TRANS_ORDER
        for name in ("r1_sq", "theta_0", "tilt_slope_a"):
            budget = math.hypot(res.sigma(name), full.sigma(name))
            assert abs(res.value(name) - full.value(name)) <= budget, name

    def test_unphysical_orders_skipped(self, clean_sweeps):
        res = fit_transmission_global(
            clean_sweeps, synthdata.TRANS_INIT, l0_range=range(14, 26),
            thickness_d=synthdata.TRANS_THICKNESS,
            refractive_index=synthdata.TRANS_INDEX,
            beam_sigma=synthdata.TRANS_SIGMA_BEAM)
        assert res.extras["mode_order_l0"] == synthdata.TRANS_ORDER
        skipped = {row["l0"] for row in res.extras["l0_scan"]
                   if not math.isfinite(row["chi2"])}
        assert skipped == {14, 15}    # lowest sweep would sit below order 1

    def test_validation(self, clean_sweeps):
        kwargs = dict(thickness_d=synthdata.TRANS_THICKNESS,
                      refractive_index=synthdata.TRANS_INDEX,
                      beam_sigma=synthdata.TRANS_SIGMA_BEAM)
        with pytest.raises(ValueError):
            fit_transmission_global(clean_sweeps[:2], synthdata.TRANS_INIT,
                                    l0_range=range(21, 28), **kwargs)
        doubled = list(clean_sweeps) + [clean_sweeps[-1]]
        with pytest.raises(ValueError):
            fit_transmission_global(doubled, synthdata.TRANS_INIT,
                                    l0_range=range(21, 28), **kwargs)
        no_reference = clean_sweeps[1:]
        with pytest.raises(ValueError):
            fit_transmission_global(no_reference, synthdata.TRANS_INIT,
                                    l0_range=range(21, 28), **kwargs)
        with pytest.raises(ValueError):
            fit_transmission_global(clean_sweeps, synthdata.TRANS_INIT,
                                    l0_range=(), **kwargs)
        with pytest.raises(ValueError):
            fit_transmission_global(clean_sweeps, dict(r1_sq=0.99),
                                    l0_range=range(21, 28), **kwargs)
