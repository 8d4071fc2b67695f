import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtr

from semirep.avar import PluginVariance, plug_in_variance
from semirep.backfit import FitConfig, fit
from semirep.core_model import ModelParams
from semirep.errors import ExtrapolationError, SeparationError, ValidationError
from semirep.simlab import KenyaDesign, MissingnessMechanism, generate_kenya_like, kenya_kappa0
from semirep.smoother import ThetaEstimate
from semirep.summaries import (POPULATION_VARIANCE, DeltaRule, PiModel, SummaryEstimate,
                               constant_functional, constant_pi, covariate_functional,
                               fit_logistic, get_functional, indicator_response, kappa_gen,
                               kappa_imputed, kappa_ipw, kappa_semi, mean_functional,
                               mean_response, month_mask, registered, second_moment_functional,
                               survival_curve, survival_functional)

from conftest import truth_fit


def _probe(p=2, m=2, R=3, n=9, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.uniform(size=(n, m * R, p)), rng.uniform(size=(n, m)),
            rng.normal(size=(n, m)), ModelParams(rng.normal(size=p), 1.3, 0.3))


class TestFunctionals:
    @pytest.mark.parametrize("make", [lambda: survival_functional(0.8),
                                      lambda: survival_functional(1.2, {0: 0.5}),
                                      mean_functional, second_moment_functional])
    def test_derivatives(self, make):
        for seed in range(5):
            make().check_derivatives(*_probe(seed=seed), rtol=1e-6)

    def test_survival_formula(self):
        x, z, th, par = _probe()
        f = survival_functional(0.4, {1: 0.25})
        xf = x.copy()
        xf[:, :, 1] = 0.25
        mu = xf @ par.beta + np.repeat(th, 3, axis=1)
        ref = ndtr((mu - 0.4) / np.sqrt(par.sigma2)).mean(1)
        assert np.allclose(f.evaluate(x, z, th, par), ref, atol=1e-15)

    def test_registry(self):
        assert registered() == ["indicator-above-c", "mean", "second-moment", "survival"]
        assert get_functional("survival", c=1.0).name
        with pytest.raises(ValidationError):
            get_functional("median")

    def test_fixed_column_range(self):
        x, z, th, par = _probe()
        with pytest.raises(ValidationError):
            survival_functional(0.0, {5: 1.0}).evaluate(x, z, th, par)

    def test_month_mask(self):
        assert month_mask(6, 2, 3) == {2: 6.0, 3: 2.0}
        assert month_mask(3, 2, 3) == {2: 3.0, 3: 0.0}


class TestKappaSemi:
    def test_constant_functional_exact(self, small_dataset, small_fit):
        assert kappa_semi(small_dataset, small_fit, constant_functional(1.0)).kappa == 1.0

    def test_covariate_functional(self, small_dataset, small_fit):
        est = kappa_semi(small_dataset, small_fit, covariate_functional(0))
        assert est.kappa == pytest.approx(small_dataset.x[:, :, 0].mean(), abs=1e-15)

    def test_order_invariance(self, small_dataset, small_fit):
        perm = np.random.default_rng(0).permutation(small_dataset.n)
        fn = survival_functional(1.0, {0: 0.5})
        a = kappa_semi(small_dataset, small_fit, fn).terms
        b = kappa_semi(small_dataset.take(perm), small_fit, fn).terms
        assert np.array_equal(a[perm], b)

    def test_extrapolation_error(self, small_dataset):
        th = ThetaEstimate(np.linspace(0.2, 0.8, 11), np.zeros(11), np.zeros(11), 0.1)
        f = truth_fit(small_dataset, ModelParams([1.0, 1.0], 1.0, 0.4), lambda z: 0 * z)
        f = type(f)(f.params, th, 0.1, 0, True, 0.0, 0.0, ())
        with pytest.raises(ExtrapolationError) as exc:
            kappa_semi(small_dataset, f, mean_functional())
        assert exc.value.clusters

    def test_survival_curve_left_tail(self, small_dataset, small_fit):
        c = np.nanmin(small_dataset.y) - 10 * np.sqrt(small_fit.params.sigma2)
        assert survival_curve(small_dataset, small_fit, [c])[0].kappa >= 0.999

    @settings(max_examples=30, deadline=None)
    @given(cs=st.lists(st.floats(-3, 5), min_size=2, max_size=12))
    def test_survival_curve_monotone(self, small_dataset, small_fit, cs):
        cs = np.sort(cs)
        vals = np.array([e.kappa for e in survival_curve(small_dataset, small_fit, cs, {0: .5})])
        assert np.all(np.diff(vals) <= 0)
        assert np.all((vals >= 0) & (vals <= 1))


class TestDelta:
    def _est(self, k, v):
        return SummaryEstimate(k, "semi", 100, v, "plugin")

    def test_projection(self):
        e1, e2 = self._est(0.3, 0.7), self._est(1.1, 2.0)
        out = kappa_gen(DeltaRule(lambda a, b: a, lambda a, b: (1.0, 0.0)), e1, e2, 0.4)
        assert out.kappa == e1.kappa and out.variance == e1.variance

    def test_linear(self):
        e1, e2 = self._est(0.3, 0.7), self._est(1.1, 2.0)
        out = kappa_gen(DeltaRule(lambda a, b: a + b), e1, e2, 0.4)
        assert out.kappa == pytest.approx(1.4)
        assert out.variance == pytest.approx(0.7 + 2.0 + 0.8, rel=1e-9)

    def test_population_variance_matches_direct(self, small_dataset, small_fit):
        pv = PluginVariance(small_dataset, small_fit)
        pm, ps = pv.pieces(mean_functional()), pv.pieces(second_moment_functional())
        e1 = kappa_semi(small_dataset, small_fit, mean_functional())
        e2 = kappa_semi(small_dataset, small_fit, second_moment_functional())
        e1 = e1.with_variance(plug_in_variance(pm, small_dataset), "plugin")
        e2 = e2.with_variance(plug_in_variance(ps, small_dataset), "plugin")
        out = kappa_gen(POPULATION_VARIANCE, e1, e2, 0.0)
        f = small_fit
        mu = small_dataset.x @ f.params.beta + np.repeat(f.theta.on_dataset(small_dataset), 3, 1)
        direct = (mu ** 2).mean() + f.params.sigma2 - mu.mean() ** 2
        assert out.kappa == pytest.approx(direct, rel=1e-12)


class TestLogistic:
    def test_intercept_only(self):
        d = np.r_[np.ones(70), np.zeros(30)]
        lf = fit_logistic(np.ones((100, 1)), d)
        assert lf.zeta[0] == pytest.approx(np.log(0.7 / 0.3), abs=1e-10)
        assert lf.zeta[0] == pytest.approx(0.8473, abs=1e-4)

    def test_one_class(self):
        with pytest.raises(SeparationError):
            fit_logistic(np.ones((50, 1)), np.ones(50))

    @pytest.mark.parametrize("seed", range(5))
    def test_stationarity(self, seed):
        rng = np.random.default_rng(seed)
        F = np.column_stack([rng.normal(size=(400, 3)), np.ones(400)])
        d = (rng.uniform(size=400) < 1 / (1 + np.exp(-F @ [0.5, -1, 0.3, 0.2]))).astype(float)
        lf = fit_logistic(F, d)
        p = 1 / (1 + np.exp(-F @ lf.zeta))
        assert np.abs(F.T @ (d - p)).max() < 1e-8


class TestMissingEstimators:
    def test_all_observed_imputed_is_mean(self, small_dataset):
        est = kappa_imputed(small_dataset, None, mean_response())
        assert est.kappa == pytest.approx(small_dataset.y.mean(), abs=1e-14)

    def test_all_missing_imputed_is_semi(self, small_dataset, small_fit):
        ds = small_dataset.replace(delta=np.zeros(small_dataset.n, dtype=int))
        a = kappa_imputed(ds, small_fit, mean_response()).kappa
        b = kappa_semi(ds, small_fit, mean_functional()).kappa
        assert a == b

    def test_degenerate_weights(self, small_dataset, small_fit):
        rf = mean_response()
        k1 = kappa_imputed(small_dataset, small_fit, rf).kappa
        k2 = kappa_ipw(small_dataset, small_fit, rf, constant_pi(1.0)).kappa
        assert k1 == k2
        assert k2 == pytest.approx(small_dataset.y.mean(), abs=1e-14)

    def test_clip_warning(self, small_dataset, small_fit):
        pm = PiModel(lambda x, z: np.ones((x.shape[0], 1)), np.array([40.0]))
        est = kappa_ipw(small_dataset, small_fit, mean_response(), pm)
        assert est.diagnostics["warnings"]

    def test_indicator_response_matches_survival(self, small_dataset, small_fit):
        rf = indicator_response(1.0)
        a = kappa_semi(small_dataset, small_fit, rf).kappa
        b = kappa_semi(small_dataset, small_fit, survival_functional(1.0)).kappa
        assert a == b


def test_ipw_variance_vs_monte_carlo(mar_runs):
    """Sample-variance plug-in for the doubly robust estimator against 500 replicates."""
    k2 = mar_runs.column("k2")
    mc = 100 * k2.var(ddof=1)
    v = mar_runs.column("V_k2").mean()
    print(f"plug-in {v:.4f} vs Monte Carlo {mc:.4f}")
    assert abs(v / mc - 1) <= 0.25


def test_kenya_curves_ordered(kenya_runs):
    kd = KenyaDesign()
    for c in (8.0, 9.0, 10.0):
        a3 = kenya_runs.column(f"a3.0_c{c}").mean()
        a6 = kenya_runs.column(f"a6.0_c{c}").mean()
        assert a3 >= a6
        assert kenya_kappa0(kd, 3.0, c) > kenya_kappa0(kd, 6.0, c)


def test_kenya_summary_pipeline():
    kd = KenyaDesign()
    ds = generate_kenya_like(kd, 5)
    f = fit(ds, FitConfig())
    cs = np.linspace(6, 14, 17)
    curve = [e.kappa for e in survival_curve(ds, f, cs, month_mask(6, 2, 3))]
    assert np.all(np.diff(curve) <= 0)
    assert MissingnessMechanism("none").kind == "none"
