import json

import numpy as np
import pytest

from gcmtest import DataSet
from gcmtest.errors import DataError, DegenerateStatisticError
from gcmtest.nofreelunch import f_a
from gcmtest.regression import RegressionFit, fit_krr
from gcmtest.simlab import (
    ModelSpec,
    TestConfig,
    conditional_means,
    gen_model,
    level_band,
    rejection_rate,
    truth_diagnostics,
)


def never(data, alpha, rng):
    return False


def always(data, alpha, rng):
    return True


class TestModels:
    @pytest.mark.parametrize("name,dims", [
        ("a", (1, 1, 1)), ("b", (1, 1, 1)), ("c", (1, 1, 2)), ("d", (2, 2, 1)),
        ("e", (1, 1, 1)), ("example1", (1, 1, 1)), ("nfl", (1, 1, 1)),
    ])
    def test_shapes(self, name, dims):
        d = gen_model(ModelSpec(name), np.random.default_rng(0), 30)
        assert (d.d_x, d.d_y, d.d_z) == dims and d.n == 30

    def test_model_e_moments(self):
        d = gen_model(ModelSpec("e"), np.random.default_rng(1), 10_000)
        x, y = d.x_block[:, 0], d.y_block[:, 0]
        assert abs(np.corrcoef(x, y)[0, 1]) < 4 / 100
        assert np.corrcoef(x**2, y**2)[0, 1] > 0.1

    def test_model_a_equations(self):
        spec = ModelSpec("a")
        d = gen_model(spec, np.random.default_rng(2), 20_000)
        z = d.z_block[:, 0]
        resid = d.x_block[:, 0] - f_a(z, 2.0)
        assert resid.std() == pytest.approx(0.3, rel=0.03)
        assert abs(np.corrcoef(resid, z)[0, 1]) < 0.03

    def test_power_variant_adds_x(self):
        rng_a, rng_b = np.random.default_rng(3), np.random.default_rng(3)
        null = gen_model(ModelSpec("a"), rng_a, 50)
        alt = gen_model(ModelSpec("a", power=True), rng_b, 50)
        np.testing.assert_allclose(alt.y_block, null.y_block + 0.2 * null.x_block)

    def test_model_d_power_only_on_y2(self):
        null = gen_model(ModelSpec("d"), np.random.default_rng(4), 50)
        alt = gen_model(ModelSpec("d", power=True), np.random.default_rng(4), 50)
        np.testing.assert_allclose(alt.y_block[:, 0], null.y_block[:, 0])
        np.testing.assert_allclose(alt.y_block[:, 1], null.y_block[:, 1] + 0.2 * null.x_block[:, 1])

    def test_a_parameter(self):
        assert ModelSpec("a").a_value == 2.0
        assert ModelSpec("b").a_value == 4.0
        assert ModelSpec("nfl", a=12).label == "nfl(a=12)"
        with pytest.raises(ValueError):
            ModelSpec("c", a=3)
        with pytest.raises(ValueError):
            ModelSpec("z")
        with pytest.raises(ValueError):
            gen_model(ModelSpec("a"), 0)

    @pytest.mark.parametrize("name", ["a", "c", "d", "nfl"])
    @pytest.mark.parametrize("power", [False, True])
    def test_conditional_means_match_simulation(self, name, power):
        # average many draws of (X, Y) at the same Z to check the closed-form means
        spec = ModelSpec(name, power=power)
        big = gen_model(spec, np.random.default_rng(5), 200_000)
        fx, fy = conditional_means(spec, big.z_block)
        rx = big.x_block - fx
        ry = big.y_block - fy
        # residuals must be mean zero and uncorrelated with the conditional means
        assert np.all(np.abs(rx.mean(axis=0)) < 0.02) and np.all(np.abs(ry.mean(axis=0)) < 0.02)
        for j in range(fx.shape[1]):
            assert abs(np.mean(rx[:, j] * fx[:, j])) < 0.01
        for k in range(fy.shape[1]):
            assert abs(np.mean(ry[:, k] * fy[:, k])) < 0.01


class TestDiagnostics:
    def test_oracle_predictions(self):
        spec = ModelSpec("a")
        d = gen_model(spec, np.random.default_rng(6), 100)
        fx, fy = conditional_means(spec, d.z_block)
        oracle_x = RegressionFit(fx[:, 0], d.x_block[:, 0] - fx[:, 0], "oracle")
        oracle_y = RegressionFit(fy[:, 0], d.y_block[:, 0] - fy[:, 0], "oracle")
        diag = truth_diagnostics(spec, d, oracle_x, oracle_y)
        assert diag.a_f == 0.0 and diag.a_g == 0.0 and diag.product_check == 0.0

    def test_zero_predictions_on_e(self):
        spec = ModelSpec("e")
        d = gen_model(spec, np.random.default_rng(7), 100)
        zero = RegressionFit(np.zeros(100), d.x_block[:, 0], "zero")
        assert truth_diagnostics(spec, d, zero, zero).a_f == 0.0

    def test_user_data_rejected(self):
        d = DataSet([1.0, 2.0], [1.0, 3.0], [0.0, 1.0])
        fit = fit_krr(d.z_block, d.x_block[:, 0])
        with pytest.raises(DataError):
            truth_diagnostics("mine", d, fit, fit)

    def test_krr_product_decreases(self):
        spec = ModelSpec("a")
        products = []
        for n in (100, 400):
            vals = []
            for rep in range(5):
                d = gen_model(spec, np.random.default_rng(1000 * n + rep), n)
                fx = fit_krr(d.z_block, d.x_block[:, 0])
                fy = fit_krr(d.z_block, d.y_block[:, 0])
                vals.append(truth_diagnostics(spec, d, fx, fy).product_check)
            products.append(np.mean(vals))
        assert products[1] < products[0]


class TestRejectionRate:
    def test_degenerate_tests(self):
        spec = ModelSpec("a")
        assert rejection_rate(spec, never, [20, 30], reps=5, workers=1).rates == [0.0, 0.0]
        rep = rejection_rate(spec, always, [20, 30], reps=5, workers=1)
        assert rep.rates == [1.0, 1.0]
        assert rep.mc_stderr == [0.0, 0.0]
        assert rep.band_pass == [False, False]

    def test_band(self):
        assert level_band(100) == pytest.approx(0.11)
        assert 0.05 < level_band(500) < 0.08

    def test_linear_gaussian_null_level(self):
        # example1 with a linear backend is not Gaussian; build a linear-Gaussian null
        def linear_null_test(data, alpha, rng):
            z = data.z_block[:, 0]
            x = z + rng.standard_normal(data.n)
            y = z + rng.standard_normal(data.n)
            return TestConfig(backend="linear").run(DataSet(x, y, z), alpha, rng)

        rep = rejection_rate(ModelSpec("a"), linear_null_test, [200], reps=500, seed=3, workers=1)
        assert 0.03 <= rep.rates[0] <= 0.08

    def test_reproducible_and_parallel_invariant(self):
        cfg = TestConfig(backend="knn")
        a = rejection_rate(ModelSpec("a"), cfg, [40, 60], reps=20, seed=11, workers=1)
        b = rejection_rate(ModelSpec("a"), cfg, [40, 60], reps=20, seed=11, workers=1)
        c = rejection_rate(ModelSpec("a"), cfg, [40, 60], reps=20, seed=11, workers=3)
        assert a.to_json() == b.to_json() == c.to_json()

    def test_errors_counted(self):
        calls = iter(range(10**6))

        def flaky(data, alpha, rng):
            if next(calls) % 2 == 0:
                raise DegenerateStatisticError("forced")
            return True

        rep = rejection_rate(ModelSpec("a"), flaky, [20], reps=10, workers=1)
        assert rep.errors == [5]
        assert rep.rates == [0.5]

    def test_reps_guard(self):
        with pytest.raises(ValueError):
            rejection_rate(ModelSpec("a"), never, [20], reps=0)

    def test_power_beats_null(self):
        cfg = TestConfig(backend="krr")
        null = rejection_rate(ModelSpec("c"), cfg, [200], reps=30, seed=4, workers=1).rates[0]
        alt = rejection_rate(ModelSpec("c", power=True), cfg, [200], reps=30, seed=4, workers=1).rates[0]
        assert alt >= null

    def test_serialisation(self):
        rep = rejection_rate(ModelSpec("b", power=True), never, [20, 30], reps=4, seed=9, workers=1)
        lines = rep.to_csv().splitlines()
        assert lines[0] == "model,test,n,reps,rate,stderr,band,pass"
        assert lines[1].startswith("b+power,never,20,4,0,0,")
        assert len(lines) == 3
        doc = json.loads(rep.to_json())
        assert doc["rates"] == [0.0, 0.0] and doc["seed"] == 9 and doc["n_values"] == [20, 30]


class TestConfigKinds:
    def test_multi_dispatch(self):
        d = gen_model(ModelSpec("d"), np.random.default_rng(8), 60)
        assert isinstance(TestConfig(backend="linear", B=1000).run(d, 0.05, np.random.default_rng(0)), bool)

    def test_unknown_kind(self):
        d = gen_model(ModelSpec("a"), np.random.default_rng(8), 30)
        with pytest.raises(ValueError):
            TestConfig(kind="magic").run(d, 0.05, np.random.default_rng(0))

    def test_tag(self):
        assert TestConfig(backend="linear").tag == "gcm:linear"
