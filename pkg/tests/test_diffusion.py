import numpy as np
import pytest

from jsqgap import diffusion as df
from jsqgap.interpolation import GridFunction


class TestStep:
    def test_deterministic_drift(self):
        y1, y2, u, du, clamp = df.step(5.0, 0.0, 0.0, beta=1.0, dt=0.01, g=0.0)
        assert y1 == pytest.approx(4.96)
        assert y2 == 0.0 and du == 0.0 and u == 0.0

    def test_deep_negative_reflects_and_feeds_second_coordinate(self):
        y1, y2, u, du, clamp = df.step(0.1, 0.5, 0.0, beta=1.0, dt=0.01, g=-10.0)
        assert y1 == 0.0
        assert du > 0.0
        assert y2 == pytest.approx(0.5 + du - 0.5 * 0.01)
        assert u == du

    def test_regulator_only_fires_on_boundary(self):
        rng = np.random.default_rng(0)
        y1 = rng.uniform(0, 2, 500)
        y2 = rng.uniform(0, 1, 500)
        new_y1, _, _, du, _ = df.step(y1, y2, np.zeros(500), 1.0, 1e-3, rng.normal(size=500))
        fired = du > 0
        assert np.all(new_y1[fired] == 0.0)

    def test_nonfinite_rejected(self):
        with pytest.raises(FloatingPointError):
            df.step(np.nan, 0.0, 0.0, 1.0, 0.01, 0.0)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            df.SimConfig(dt=0.0)
        with pytest.raises(ValueError):
            df.SimConfig(thinning=0)


class TestStationarySample:
    def test_nonnegative_and_reproducible(self):
        cfg = df.SimConfig(dt=2e-3, burn_in=10, horizon=10, thinning=20, seed=5, paths=64)
        s1, d1 = df.stationary_sample(1.0, cfg)
        s2, d2 = df.stationary_sample(1.0, cfg)
        assert np.array_equal(s1, s2)
        assert s1.min() >= 0.0
        assert len(s1) == 64 * (10 / 2e-3 // 20)
        assert np.all(d1["u_final"] >= 0.0)

    def test_ensemble_agreement_across_seeds(self):
        cfg1 = df.SimConfig(dt=2e-3, burn_in=20, horizon=60, thinning=20, seed=1, paths=256)
        cfg2 = df.SimConfig(dt=2e-3, burn_in=20, horizon=60, thinning=20, seed=2, paths=256)
        out1 = df.simulate_paths(1.0, cfg1)
        out2 = df.simulate_paths(1.0, cfg2)
        m1, se1 = df.mean_with_stderr(out1["path_means"])
        m2, se2 = df.mean_with_stderr(out2["path_means"])
        assert np.all(np.abs(m1 - m2) <= 3.5 * (se1 + se2))

    @pytest.mark.parametrize("beta", [0.5, 2.0])
    def test_stationary_drift_balance(self, beta):
        # exact identities of the stationary limit: the second-coordinate
        # balance forces the regulator rate to equal E[y2], and substituting
        # into the first-coordinate balance leaves E[y1] = beta
        cfg = df.SimConfig(
            dt=1e-3, burn_in=40, horizon=80, thinning=50,
            seed=int(beta * 1000), paths=384,
        )
        out = df.simulate_paths(beta, cfg)
        m, se = df.mean_with_stderr(out["path_means"])
        assert abs(m[0] - beta) <= 3 * se[0] + 0.02  # 0.02 covers O(dt) bias
        u_rate = out["u_final"].mean() / 80.0
        assert u_rate == pytest.approx(m[1], abs=3 * se[1] + 0.02)

    def test_regulator_domination_on_unit_windows(self):
        # the regulator over one time unit is bounded by the window's running
        # negative noise supremum plus the integrated second coordinate
        cfg = df.SimConfig(dt=1e-3, burn_in=5, horizon=20, thinning=50, seed=9, paths=128)
        out = df.simulate_paths(1.0, cfg, collect_w=True)
        assert out["domination_gap"].max() <= 1e-6

    def test_streaming_matches_stored_mean(self):
        cfg = df.SimConfig(dt=2e-3, burn_in=10, horizon=30, thinning=20, seed=3, paths=128)
        stored = df.simulate_paths(1.0, cfg)
        mean_stream, se, diag = df.stream_function_mean(
            1.0, cfg, lambda y1, y2: y1 + y2
        )
        mean_stored = stored["samples"].sum(axis=1).mean()
        assert mean_stream == pytest.approx(mean_stored, rel=1e-12)
        assert diag["retained"] == len(stored["samples"])


class TestApplyGy:
    def test_constant_function(self):
        f = GridFunction.from_callable(2, 0.1, (0, 0), (9, 9), lambda k: 4.0)
        assert df.apply_gy(f, (0.3, 0.2), beta=1.0) == pytest.approx(0.0, abs=1e-9)

    def test_linear_function(self):
        f = GridFunction.from_callable(2, 0.1, (0, 0), (9, 9), lambda k: 0.1 * k[0])
        x = (0.31, 0.17)
        assert df.apply_gy(f, x, beta=1.0) == pytest.approx(
            1.0 - x[0] - x[1], abs=1e-8
        )

    def test_quadratic_function(self):
        f = GridFunction.from_callable(
            2, 0.1, (0, 0), (9, 9), lambda k: (0.1 * k[0]) ** 2
        )
        x = (0.31, 0.17)
        expect = 2 * x[0] * (1.0 - x[0] - x[1]) + 2.0
        assert df.apply_gy(f, x, beta=1.0) == pytest.approx(expect, abs=1e-8)


class TestExpectedInterp:
    def test_constant_test_function(self):
        samples = np.random.default_rng(1).uniform(0, 1, (500, 2))
        mean, se = df.expected_interp(
            lambda k1, k2: np.full_like(np.asarray(k1, float), 3.0), 0.1, 1, samples
        )
        assert mean == pytest.approx(3.0, abs=1e-12)

    def test_first_coordinate_reproduced(self):
        samples = np.random.default_rng(2).uniform(0, 1, (2000, 2))
        mean, se = df.expected_interp(
            lambda k1, k2: 0.1 * np.asarray(k1, float), 0.1, 1, samples
        )
        assert mean == pytest.approx(samples[:, 0].mean(), abs=1e-10)

    def test_stderr_scales_with_sample_count(self):
        rng = np.random.default_rng(3)
        small = rng.uniform(0, 1, (400, 2))
        large = rng.uniform(0, 1, (40000, 2))
        h = lambda k1, k2: 0.1 * np.asarray(k1, float)  # noqa: E731
        _, se_small = df.expected_interp(h, 0.1, 1, small)
        _, se_large = df.expected_interp(h, 0.1, 1, large)
        assert se_large == pytest.approx(se_small / 10.0, rel=0.35)
