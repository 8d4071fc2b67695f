import numpy as np
import pytest

from semirep.errors import DegenerateMissingnessError, ExperimentUnstableError, NumericalError
from semirep.simlab import (KenyaDesign, MissingnessMechanism, SimDesign, apply_missingness,
                            exchangeable_noise, generate_kenya_like, generate_sim_dataset,
                            kenya_kappa0, run_experiment, theta_rule, true_kappa_oracle)
from semirep.summaries import default_features, fit_logistic


class TestGenerators:
    def test_same_seed_same_dataset(self, design):
        a, b = generate_sim_dataset(design, 99), generate_sim_dataset(design, 99)
        for f in ("y", "x", "z", "delta"):
            assert np.array_equal(getattr(a, f), getattr(b, f))
        assert not np.array_equal(a.y, generate_sim_dataset(design, 100).y)

    def test_within_cluster_correlation(self):
        rng = np.random.default_rng(1)
        e = exchangeable_noise(rng, 10_000, 6, 1.0, 0.4)
        c = np.corrcoef(e.T)
        off = c[~np.eye(6, dtype=bool)]
        assert np.abs(off.mean() - 0.4) <= 0.01

    def test_noise_covariance(self):
        rng = np.random.default_rng(2)
        e = exchangeable_noise(rng, 100_000, 6, 2.0, 0.3)
        ref = 2.0 * (0.7 * np.eye(6) + 0.3)
        assert np.abs(np.cov(e.T) - ref).max() <= 0.02 * 2.0

    def test_zero_truth_has_zero_mean(self):
        d = SimDesign(n=2000, beta=(0.0, 0.0), theta="constant:0")
        y = generate_sim_dataset(d, 3).y
        cm = y.mean(1)
        assert abs(cm.mean()) <= 4 * cm.std(ddof=1) / np.sqrt(cm.size)

    def test_theta_rules(self):
        z = np.linspace(0, 1, 5)
        assert np.allclose(theta_rule("sin8")(z), np.sin(8 * z - 1))
        assert np.allclose(theta_rule("linear:1,2")(z), 1 + 2 * z)
        assert np.allclose(theta_rule({"z": [0, 1], "theta": [0, 2]})(z), 2 * z)


class TestKenya:
    def test_structure(self):
        kd = KenyaDesign()
        ds = generate_kenya_like(kd, 11)
        month, knee = ds.x[:, :, 2], ds.x[:, :, 3]
        assert np.array_equal(knee, np.maximum(month - 4.0, 0.0))
        assert np.all(ds.z[:, 1] > ds.z[:, 0])
        sex = ds.x[:, :, 0].reshape(ds.n, 2, 4)
        assert np.all(sex == sex[:, :, :1])
        dens = ds.x[:, :, 1]
        assert np.all(dens == dens[:, :1])

    def test_oracle_ordered(self, oracles):
        kd = KenyaDesign()
        a3, a6 = kenya_kappa0(kd, 3.0, 9.0), kenya_kappa0(kd, 6.0, 9.0)
        assert a3 > a6
        assert a3 == pytest.approx(oracles["kenya_survival"]["a=3.0,c=9.0"], abs=1e-8)
        assert a6 == pytest.approx(oracles["kenya_survival"]["a=6.0,c=9.0"], abs=1e-8)


class TestMissingness:
    def test_none_keeps_everything(self, small_dataset):
        ds = apply_missingness(small_dataset, MissingnessMechanism("none"), 0)
        assert ds.delta.all()

    def test_mcar_rate(self):
        d = SimDesign(n=10_000, missingness=MissingnessMechanism("mcar", 0.7))
        assert abs(generate_sim_dataset(d, 4).delta.mean() - 0.7) <= 0.02

    def test_mar_recovers_zeta(self):
        zeta = np.array([10.0, 0.0, 2.0, -5.15])
        d = SimDesign(n=5000, missingness=MissingnessMechanism("mar-logistic", zeta=tuple(zeta)))
        ds = generate_sim_dataset(d, 5)
        lf = fit_logistic(default_features(ds.x, ds.z), ds.delta)
        se = np.sqrt(np.diag(np.linalg.inv(lf.information)) / ds.n)
        assert np.all(np.abs(lf.zeta - zeta) <= 3 * se)

    def test_all_missing_raises(self, small_dataset):
        mech = MissingnessMechanism("mar-logistic", zeta=(0.0, 0.0, 0.0, -60.0))
        with pytest.raises(DegenerateMissingnessError):
            apply_missingness(small_dataset, mech, 0)


class TestOracle:
    def test_tails(self, design):
        lo = true_kappa_oracle(design, ("survival", {"c": -10.0, "fixed": {0: 0.5}})).value
        hi = true_kappa_oracle(design, ("survival", {"c": 10.0, "fixed": {0: 0.5}})).value
        assert lo >= 1 - 1e-6 and hi <= 1e-6

    def test_matches_fixture(self, design, oracles):
        for c, ref in oracles["survival_x1_fixed_0.5"].items():
            got = true_kappa_oracle(design, ("survival", {"c": float(c), "fixed": {0: 0.5}}))
            assert got.value == pytest.approx(ref, abs=1e-10)
        assert true_kappa_oracle(design, ("mean", {})).value == pytest.approx(
            oracles["mean_Y"], abs=1e-10)
        assert true_kappa_oracle(design, ("variance", {})).value == pytest.approx(
            oracles["var_Y"], abs=1e-10)

    def test_monte_carlo_agrees(self, design):
        spec = ("survival", {"c": 1.0, "fixed": {0: 0.5}})
        q = true_kappa_oracle(design, spec)
        mc = true_kappa_oracle(design, spec, "monte-carlo", draws=200_000)
        assert abs(q.value - mc.value) <= 4 * mc.se


class TestRunExperiment:
    @staticmethod
    def _gen(ss):
        return generate_sim_dataset(SimDesign(n=30), ss)

    @staticmethod
    def _pipe(ds, ss):
        u = np.random.default_rng(ss).uniform()
        return {"ybar": float(np.nanmean(ds.y)), "u": (u, u - 1, u + 1)}

    def test_single_replicate(self):
        rep = run_experiment(self._gen, self._pipe, 1, 8)
        data_ss, pipe_ss = np.random.SeedSequence(8).spawn(1)[0].spawn(2)
        ref = self._pipe(self._gen(data_ss), pipe_ss)
        assert rep.column("ybar")[0] == ref["ybar"]
        assert rep.column("u")[0] == ref["u"][0]

    def test_threads_identical(self):
        a = run_experiment(self._gen, self._pipe, 12, 9)
        b = run_experiment(self._gen, self._pipe, 12, 9, threads=2)
        assert a.to_csv() == b.to_csv()

    def test_oracle_bias_and_coverage(self):
        rep = run_experiment(self._gen, self._pipe, 20, 10, oracle={"u": 0.5})
        k = rep.names.index("u")
        assert rep.coverage[k] == 1.0
        assert rep.bias[k] == pytest.approx(rep.mean[k] - 0.5)
        assert np.isnan(rep.coverage[rep.names.index("ybar")])

    def test_failure_threshold(self):
        def flaky(ds, ss):
            if np.random.default_rng(ss).uniform() < 0.5:
                raise NumericalError("boom")
            return {"a": 1.0}
        rep = run_experiment(self._gen, flaky, 20, 0, max_failure_rate=1.0)
        assert rep.failures
        with pytest.raises(ExperimentUnstableError):
            run_experiment(self._gen, flaky, 20, 0)
