import math

import numpy as np
import pytest
from scipy.stats import kstest

from jsqgap import coupling as cp
from jsqgap.chain import ModelParams


class TestJointState:
    def test_shadow_reconstruction(self):
        js = cp.JointState((5, 2, 0), 2)
        assert js.shadow() == (5, 3, 0)
        assert not js.coupled
        assert cp.JointState((5, 2, 0), 0).shadow() == (5, 2, 0)

    def test_invalid_starts_rejected(self):
        params = ModelParams(5, 1, 1.0)
        with pytest.raises(ValueError):
            cp.simulate_coupled(params, (5, 0), 1, 0)  # level saturated
        with pytest.raises(ValueError):
            cp.simulate_coupled(params, (3, 3), 2, 0)  # shadow not monotone
        with pytest.raises(ValueError):
            cp.simulate_coupled(params, (2, 3), 1, 0)  # not monotone
        with pytest.raises(ValueError):
            cp.simulate_coupled(params, (3, 0), 3, 0)  # class out of range


class TestSimulateCoupled:
    def test_deterministic_replay(self):
        params = ModelParams(8, 2, 1.0)
        a = cp.simulate_coupled(params, (6, 2, 0), 2, seed=99, record_classes=True)
        b = cp.simulate_coupled(params, (6, 2, 0), 2, seed=99, record_classes=True)
        assert a == b

    def test_class_moves_are_adjacent(self):
        params = ModelParams(6, 2, 1.0)
        for seed in range(30):
            tr = cp.simulate_coupled(params, (5, 2, 0), 2, seed, record_classes=True)
            path = tr.class_path
            assert path[-1] == 0
            for prev, nxt in zip(path, path[1:]):
                if nxt == 0:
                    assert prev == 1 or prev == params.levels
                else:
                    assert abs(nxt - prev) <= 1

    def test_joint_chain_stays_valid(self):
        # at every event the base state is monotone, the class level is
        # unsaturated, and the reconstructed shadow state is itself a valid
        # level-count vector
        params = ModelParams(7, 2, 1.0)
        n = params.n
        for seed in range(25):
            tr = cp.simulate_coupled(params, (6, 3, 1), 2, seed, record_classes=True)
            for q, cls in zip(tr.state_path, tr.class_path):
                assert all(a >= b for a, b in zip(q, q[1:])) and 0 <= q[-1]
                assert q[0] <= n
                if cls == 0:
                    continue
                assert q[cls - 1] < n
                shadow = list(q)
                shadow[cls - 1] += 1
                assert all(a >= b for a, b in zip(shadow, shadow[1:]))
                assert shadow[0] <= n

    def test_cause_labels(self):
        params = ModelParams(4, 1, 1.0)
        causes = {
            cp.simulate_coupled(params, (3, 1), 2, seed).cause for seed in range(40)
        }
        assert causes <= {cp.CAUSE_SERVICE, cp.CAUSE_BLOCKING}

    def test_clock_component_dominated_by_unit_exponential(self):
        # the extra customer's cumulative in-service time is capped pathwise
        # by its mean-1 exponential clock, whatever the coalescence cause
        params = ModelParams(1, 1, 0.5)
        trs = [cp.simulate_coupled(params, (0, 0), 1, s) for s in range(2000)]
        clock = np.array([t.theta1_time for t in trs])
        assert clock.mean() <= 1.0 + 3 * clock.std() / math.sqrt(len(clock))

    def test_single_server_joint_chain_exact_mean(self):
        # the joint chain from ((0,0), class 1) has two transient states; the
        # first-step equations give E tau_C = 8/7
        params = ModelParams(1, 1, 0.5)
        taus = np.array(
            [cp.simulate_coupled(params, (0, 0), 1, s).tau_c for s in range(4000)]
        )
        se = taus.std() / math.sqrt(len(taus))
        assert abs(taus.mean() - 8.0 / 7.0) <= 3 * se

    def test_theta1_occupation_is_unit_exponential(self):
        # service-caused coalescence happens when the class-1 occupation time
        # exhausts an independent mean-1 exponential clock
        params = ModelParams(25, 2, 1.0)
        times = []
        for seed in range(400):
            tr = cp.simulate_coupled(params, (12, 0, 0), 1, seed)
            if tr.cause == cp.CAUSE_SERVICE:
                times.append(tr.theta1_time)
        assert len(times) > 350
        stat = kstest(times, "expon").statistic
        assert stat <= 0.08


class TestBatches:
    def test_batch_matches_scalar_law(self):
        params = ModelParams(10, 1, 1.0)
        tau, cause, events = cp.coupled_batch(params, (8, 2), 2, paths=4000, seed=5)
        scalar = [
            cp.simulate_coupled(params, (8, 2), 2, seed=10_000 + s).tau_c
            for s in range(800)
        ]
        se = np.std(tau) / math.sqrt(len(tau)) + np.std(scalar) / math.sqrt(len(scalar))
        assert abs(tau.mean() - np.mean(scalar)) <= 4 * se

    def test_batch_determinism(self):
        params = ModelParams(10, 1, 1.0)
        a = cp.coupled_batch(params, (8, 2), 2, paths=500, seed=7)
        b = cp.coupled_batch(params, (8, 2), 2, paths=500, seed=7)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_base_batch_determinism(self):
        params = ModelParams(6, 1, 1.0)
        a = cp.base_batch(params, (3, 0), 400, 11, horizon=2.0)
        b = cp.base_batch(params, (3, 0), 400, 11, horizon=2.0)
        assert np.array_equal(a["q"], b["q"]) and np.array_equal(a["t"], b["t"])

    def test_invalid_hit_levels(self):
        params = ModelParams(6, 1, 1.0)
        with pytest.raises(ValueError):
            cp.base_batch(params, (3, 0), 10, 0, hit_level1=7)


class TestMarginalConsistency:
    def test_zero_horizon_is_exact(self):
        params = ModelParams(10, 1, 1.0)
        ks = cp.marginal_consistency(params, (5, 0), 1, t=0.0, paths=2000, seed=0)
        assert np.all(ks <= 1e-12)

    def test_small_statistic_at_unit_horizon(self):
        params = ModelParams(10, 1, 1.0)
        ks = cp.marginal_consistency(params, (5, 0), 1, t=1.0, paths=5000, seed=2)
        assert np.all(ks <= 0.06)

    def test_two_buffer_instance(self):
        params = ModelParams(25, 2, 1.0)
        ks = cp.marginal_consistency(params, (20, 3, 0), 2, t=2.0, paths=10_000, seed=6)
        assert np.all(ks <= 0.05)


class TestHittingTimeUp:
    def test_first_arrival_case(self):
        params = ModelParams(9, 1, 1.0)
        assert cp.hitting_time_up(params, 0) == pytest.approx(
            1.0 / (params.n * params.lam)
        )

    def test_single_server_case(self):
        assert cp.hitting_time_up(ModelParams(1, 1, 0.5), 0) == pytest.approx(2.0)

    def test_matches_birth_death_recursion(self):
        params = ModelParams(14, 1, 1.0)
        nlam = params.n * params.lam
        T = 0.0
        for i in range(9):
            T = (1.0 + i * T) / nlam
        assert cp.hitting_time_up(params, 8) == pytest.approx(T, rel=1e-12)

    def test_saturated_start_rejected(self):
        with pytest.raises(ValueError):
            cp.hitting_time_up(ModelParams(5, 1, 1.0), 5)

    def test_monte_carlo_agreement(self):
        params = ModelParams(10, 1, 1.0)
        q1 = math.floor(params.n * params.lam)
        mean, se = cp.hitting_time_up_mc(params, q1, paths=20000, seed=21)
        assert abs(mean - cp.hitting_time_up(params, q1)) <= 3 * se

    def test_exact_linear_system_oracle(self):
        # mean hitting times from the full rate matrix: solve
        # (-G restricted to non-target states) T = 1
        import scipy.sparse as sp
        import scipy.sparse.linalg as spla

        from jsqgap import chain as ch

        params = ModelParams(6, 1, 1.0)
        space = ch.enumerate_states(params)
        G = ch.build_generator(params, space)
        for q1 in range(0, params.n):
            target = space.id_of((q1 + 1,) + (0,) * params.b)
            keep = np.array([i for i in range(space.size) if i != target])
            A = G[keep][:, keep]
            T = spla.spsolve((-A).tocsc(), np.ones(len(keep)))
            start = space.id_of((q1,) + (0,) * params.b)
            value = T[np.searchsorted(keep, start)]
            assert value == pytest.approx(cp.hitting_time_up(params, q1), rel=1e-10)


class TestRuin:
    def test_params_validation(self):
        with pytest.raises(ValueError):
            cp.RuinParams(p=0.5, q=0.5, z=4, a=4, r=1.0)
        with pytest.raises(ValueError):
            cp.RuinParams(p=0.7, q=0.2, z=1, a=4, r=1.0)

    def test_symmetric_ruin_probability(self):
        assert cp.ruin_probability(0.5, 0.5, 3, 12) == pytest.approx(1 - 3 / 12)

    def test_monotone_in_win_probability(self):
        probs = [cp.ruin_probability(p, 1 - p, 3, 10) for p in (0.4, 0.5, 0.6, 0.7)]
        assert all(a > b for a, b in zip(probs, probs[1:]))

    def test_ruin_probability_mc(self):
        rp = cp.RuinParams(p=0.6, q=0.4, z=3, a=10, r=1.0)
        mc = cp.ruin_duration_mc(rp, games=200_000, seed=31)
        est, se = mc["ruin_prob"]
        assert abs(est - cp.ruin_probability(0.6, 0.4, 3, 10)) <= 3 * se

    def test_mgf_near_one_limit(self):
        rp = cp.RuinParams(p=0.55, q=0.45, z=2, a=6, r=1.0)
        assert cp.ruin_duration_mgf(rp, 1.0 - 1e-9) == pytest.approx(1.0, abs=1e-6)
        with pytest.raises(ValueError):
            cp.ruin_duration_mgf(rp, 1.5)

    def test_mgf_against_mc(self):
        rp = cp.RuinParams(p=0.5, q=0.5, z=2, a=4, r=1.0)
        mc = cp.ruin_duration_mc(rp, games=200_000, seed=37, s=0.9)
        est, se = mc["mgf"]
        assert abs(est - cp.ruin_duration_mgf(rp, 0.9)) <= 3 * se

    def test_extreme_stakes_stay_finite(self):
        rp = cp.RuinParams(p=0.5001, q=0.4999, z=500, a=750, r=2000.0)
        val = cp.ruin_duration_laplace(rp)
        assert 0.0 < val < 1.0

    @pytest.mark.parametrize(
        "p,z,a,s",
        [(0.5, 2, 4, 0.9), (0.6, 3, 10, 0.8), (0.45, 5, 12, 0.95), (0.7, 1, 3, 0.5)],
    )
    def test_mgf_against_recursion_oracle(self, p, z, a, s):
        # phi(w) = s * (p*phi(w+1) + q*phi(w-1)), phi(0) = phi(a) = 1:
        # solve the tridiagonal system directly
        q = 1 - p
        size = a - 1
        A = np.zeros((size, size))
        rhs = np.zeros(size)
        for i, w in enumerate(range(1, a)):
            A[i, i] = 1.0
            if w + 1 <= a - 1:
                A[i, i + 1] = -s * p
            else:
                rhs[i] += s * p
            if w - 1 >= 1:
                A[i, i - 1] = -s * q
            else:
                rhs[i] += s * q
        phi = np.linalg.solve(A, rhs)
        rp = cp.RuinParams(p=p, q=q, z=z, a=a, r=1.0)
        assert cp.ruin_duration_mgf(rp, s) == pytest.approx(phi[z - 1], rel=1e-12)

    def test_hw_sequence_bounded_away_from_one(self):
        for n in (10**2, 10**4, 10**6):
            val = cp.hw_game_laplace(n, 1, 1.0, q2=0, extra_level=1)
            assert val <= 0.999

    def test_hw_params_validation(self):
        with pytest.raises(ValueError):
            cp.hw_ruin_params(100, 1, 1.0, q2=99, extra_level=1)


class TestHittingProbe:
    def test_start_at_target_gives_zero(self):
        params = ModelParams(10, 1, 1.0)
        out = cp.base_batch(params, (10, 3), 200, 41, hit_level2=3)
        assert np.all(out["t"] == 0.0)

    def test_probe_reports_all_quantities(self):
        params = ModelParams(16, 1, 1.0)
        est = cp.hitting_probe(
            params, (16, 4), 2, level1=12, level2=8, paths=2000, seed=43
        )
        for key in ("tau2_mean", "race_mean", "race_prob", "coupling_loss_prob"):
            value, err = est[key]
            assert np.isfinite(value) and np.isfinite(err)
        assert 0.0 <= est["race_prob"][0] <= 1.0

    def test_wilson_interval(self):
        centre, half = cp.wilson_halfwidth(50, 100)
        assert centre == pytest.approx(0.5, abs=0.01)
        assert 0.0 < half < 0.2

    def test_backlog_drain_time_n_stable(self):
        # mean time for the backlog to drain to sqrt(n), started from twice
        # that, normalized by 1 + delta*q2: one constant across n
        vals = []
        for n in (25, 100):
            params = ModelParams(n, 1, 1.0)
            s = int(math.isqrt(n))
            out = cp.base_batch(
                params, (n, 2 * s), 4000, 1000 + n, hit_level2=s
            )
            vals.append(out["t"].mean() / (1.0 + params.delta * 2 * s))
        assert max(vals) / min(vals) <= 2.0

    def test_race_probability_bounded_away_from_zero(self):
        # the busy count reaches its slack target before the backlog doubles
        # with probability bounded away from zero, uniformly in n
        probs = []
        for n in (25, 100, 400):
            params = ModelParams(n, 1, 1.0)
            s = int(math.isqrt(n))
            idle_target = n - math.floor(math.sqrt(n) / 2.0)
            out = cp.base_batch(
                params, (n, s), 3000, 2000 + n,
                hit_level1=idle_target, hit_level2=2 * s,
            )
            probs.append(float((out["which"] == 1).mean()))
        assert min(probs) >= 0.05
