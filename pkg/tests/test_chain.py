import math

import numpy as np
import pytest

from jsqgap import chain as ch
from jsqgap import coupling as cp


@pytest.fixture(scope="module")
def small():
    params = ch.ModelParams(1, 1, 0.5)
    space = ch.enumerate_states(params)
    G = ch.build_generator(params, space)
    pi = ch.stationary(G, space)
    return params, space, G, pi


class TestParams:
    def test_derived_quantities(self):
        p = ch.ModelParams(25, 1, 1.0)
        assert p.lam == pytest.approx(0.8)
        assert p.delta == pytest.approx(0.2)

    def test_rejects_unstable_load(self):
        with pytest.raises(ValueError):
            ch.ModelParams(4, 1, 2.0)
        with pytest.raises(ValueError):
            ch.ModelParams(4, 0, 1.0)


class TestStateSpace:
    def test_smallest_instance(self, small):
        _, space, _, _ = small
        assert space.states.tolist() == [[0, 0], [1, 0], [1, 1]]

    def test_counts_match_binomial(self):
        for n, b in ((2, 1), (5, 2), (12, 1), (7, 3), (20, 1)):
            params = ch.ModelParams(n, b, 0.5)
            space = ch.enumerate_states(params)
            assert space.size == math.comb(n + b + 1, b + 1)

    def test_index_round_trip(self):
        space = ch.enumerate_states(ch.ModelParams(6, 2, 1.0))
        for sid, q in enumerate(space.states):
            assert space.id_of(q) == sid

    def test_memory_budget(self, monkeypatch):
        monkeypatch.setattr(ch, "MAX_STATES", 10)
        with pytest.raises(MemoryError):
            ch.enumerate_states(ch.ModelParams(100, 2, 1.0))


class TestGenerator:
    def test_single_server_rates(self, small):
        params, space, G, _ = small
        dense = G.toarray()
        i00, i10, i11 = (space.id_of(q) for q in ((0, 0), (1, 0), (1, 1)))
        assert dense[i00, i10] == pytest.approx(0.5)  # arrival at rate n*lam
        assert dense[i11, i10] == pytest.approx(1.0)  # level-2 departure
        assert dense[i11].sum() == pytest.approx(0.0)
        # full system blocks arrivals: only the departure leaves (1,1)
        assert np.count_nonzero(dense[i11]) == 2

    def test_rows_sum_to_zero_and_outflow_bound(self):
        params = ch.ModelParams(7, 2, 1.2)
        space = ch.enumerate_states(params)
        G = ch.build_generator(params, space)
        rowsum = np.asarray(G.sum(axis=1)).ravel()
        assert np.abs(rowsum).max() < 1e-12
        off_diag = G.copy()
        off_diag.setdiag(0.0)
        assert off_diag.min() >= 0.0
        outflow = -G.diagonal()
        assert outflow.max() <= params.n * params.lam + params.n + 1e-12

    def test_apply_generator_constant(self, small):
        _, space, G, _ = small
        f = np.full(space.size, 3.3)
        for sid in range(space.size):
            assert ch.apply_generator(G, f, sid) == pytest.approx(0.0, abs=1e-12)

    def test_apply_generator_indicator(self, small):
        params, space, G, _ = small
        f = np.zeros(space.size)
        f[space.id_of((1, 0))] = 1.0
        assert ch.apply_generator(G, f, space.id_of((0, 0))) == pytest.approx(
            params.n * params.lam
        )

    def test_scaled_gen_matches_rate_matrix(self):
        params = ch.ModelParams(8, 1, 1.0)
        solution = ch.solve_named(params, "sum")
        scale = params.n * np.abs(solution.f).max()
        for q1 in range(params.n + 1):
            for q2 in range(q1 + 1):
                sid = solution.space.id_of((q1, q2))
                direct = ch.apply_generator(solution.G, solution.f, sid)
                regrouped = ch.scaled_gen_apply(params, solution, q1, q2)
                assert abs(direct - regrouped) <= 1e-12 * scale


class TestStationary:
    def test_birth_death_oracle(self, small):
        _, space, _, pi = small
        expect = np.array([4 / 7, 2 / 7, 1 / 7])
        assert np.allclose(pi, expect, atol=1e-12)

    def test_normalised_and_positive(self):
        params = ch.ModelParams(12, 2, 0.8)
        space = ch.enumerate_states(params)
        pi = ch.stationary(ch.build_generator(params, space), space)
        assert pi.sum() == pytest.approx(1.0, abs=1e-12)
        assert pi.min() > 0.0

    def test_agrees_with_gillespie(self):
        params = ch.ModelParams(2, 1, 0.5)
        space = ch.enumerate_states(params)
        pi = ch.stationary(ch.build_generator(params, space), space)
        paths = 20000
        out = cp.base_batch(params, (0, 0), paths, seed=1234, horizon=50.0)
        counts = np.zeros(space.size)
        for q in out["q"]:
            counts[space.id_of(q)] += 1
        freq = counts / paths
        se = np.sqrt(np.maximum(pi * (1 - pi), 1e-12) / paths)
        assert np.all(np.abs(freq - pi) <= 3.5 * se + 1e-9)


class TestPoisson:
    def test_constant_h_gives_zero(self, small):
        _, space, G, pi = small
        h = np.full(space.size, 2.0)
        sol = ch.solve_poisson(G, h, pi, space, "const")
        assert np.abs(sol.f).max() <= 1e-12

    def test_hand_oracle_three_states(self, small):
        params, space, G, pi = small
        h = space.states.sum(axis=1).astype(float)  # q1 + q2
        sol = ch.solve_poisson(G, h, pi, space, "hand")
        # 3x3 system solved by hand with f = 0 at the scaled origin (1,0)
        expect = {(0, 0): -8 / 7, (1, 0): 0.0, (1, 1): 10 / 7}
        for q, val in expect.items():
            assert sol.f[space.id_of(q)] == pytest.approx(val, abs=1e-12)

    def test_residuals_across_instances(self):
        for n, b in ((10, 1), (5, 2)):
            params = ch.ModelParams(n, b, 1.0)
            for h_name in ("sum", "x1", "x2"):
                sol = ch.solve_named(params, h_name)
                assert sol.residual <= 1e-9

    def test_fundamental_matrix_oracle(self):
        for n, b in ((10, 1), (5, 2)):
            params = ch.ModelParams(n, b, 1.0)
            sol = ch.solve_named(params, "x1")
            oracle = ch.fundamental_matrix_solution(
                sol.G, sol.h, sol.pi, sol.space
            )
            assert np.abs(sol.f - oracle).max() <= 1e-6

    def test_dist_to_fluid_solves(self):
        sol = ch.solve_named(ch.ModelParams(6, 1, 1.0), "dist_to_fluid")
        assert sol.residual <= 1e-9


class TestScaledState:
    def test_origin_is_busy_empty(self):
        params = ch.ModelParams(9, 1, 1.0)
        assert np.allclose(ch.scaled_state((9, 0), params), (0.0, 0.0))

    def test_one_idle_server(self):
        params = ch.ModelParams(4, 1, 1.0)
        x = ch.scaled_state((3, 0), params)
        assert x[0] == pytest.approx(0.5)

    def test_round_trip(self):
        params = ch.ModelParams(16, 2, 1.0)
        space = ch.enumerate_states(params)
        x = ch.scaled_state(space.states, params)
        q = ch.unscaled_state(x, params)
        assert np.array_equal(q, space.states)


class TestMomentIdentity:
    @pytest.mark.parametrize("n", [25, 100])
    def test_identity_closes(self, n):
        params = ch.ModelParams(n, 1, 1.0)
        sol = ch.solve_named(params, "sum")
        lhs, rhs = ch.moment_identity(params, sol)
        assert abs(lhs - rhs) <= 1e-9

    def test_requires_sum_solution(self):
        params = ch.ModelParams(10, 1, 1.0)
        sol = ch.solve_named(params, "x1")
        with pytest.raises(ValueError):
            ch.moment_identity(params, sol)

    def test_small_n_stencil_error(self):
        params = ch.ModelParams(1, 1, 0.5)  # floor(n*lam) = 0
        sol = ch.solve_named(params, "sum")
        with pytest.raises(ValueError):
            ch.moment_identity(params, sol)


class TestDiffTable:
    def test_zero_order_is_solution(self):
        params = ch.ModelParams(6, 1, 1.0)
        sol = ch.solve_named(params, "sum")
        d, v = ch.diff_table(sol, (0, 0))
        table, valid = ch.plane_table(sol, "f")
        assert np.array_equal(v, valid)
        assert np.allclose(d[valid], table[valid])

    def test_first_difference_matches_manual(self):
        params = ch.ModelParams(6, 1, 1.0)
        sol = ch.solve_named(params, "sum")
        d, v = ch.diff_table(sol, (1, 0))
        table, _ = ch.plane_table(sol, "f")
        assert v[2, 1]
        assert d[2, 1] == pytest.approx(table[3, 1] - table[2, 1], rel=1e-12)

    def test_caps_restrict_shape(self):
        params = ch.ModelParams(6, 1, 1.0)
        sol = ch.solve_named(params, "sum")
        d, v = ch.diff_table(sol, (1, 1), k1_max=2, k2_max=3)
        assert d.shape == (3, 4) and v.shape == (3, 4)
