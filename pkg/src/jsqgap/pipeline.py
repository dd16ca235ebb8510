"""End-to-end comparison of the JSQ chain with its diffusion limit.

The chain's Poisson-equation solution is interpolated to the continuum on the
plane where the trailing level counts vanish.  There the generator applied to
the solution, interpolated, can be rewritten as a three-term drift expression
in the interpolated clipped extension plus a computable remainder; Taylor
expansion of that drift produces the diffusion generator.  The pipeline
assembles these pieces, certifies the normalized-difference bounds that
control the remainder, and runs the rate experiment comparing exact chain
expectations with Monte Carlo diffusion expectations across a server grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import chain as ch
from . import diffusion as df
from .interpolation import (
    GridFunction,
    Interpolant,
    clipped_extension,
    finite_diff,
    interp_eval,
    interp_eval_lattice_fn,
    weight_eval,
)
from .reporting import derive_seed

__all__ = [
    "poisson_plane",
    "gx_plane",
    "fhat_plane",
    "interp_poisson_lhs",
    "interchange_rhs",
    "epsilon_term",
    "error_term",
    "error_template",
    "gy_gap",
    "reflection_derivative_bound",
    "RateRow",
    "rate_experiment",
    "certify_bounds",
    "smooth_distance_estimate",
    "SMOOTH_FAMILY",
    "lattice_test_function",
]


def poisson_plane(solution: ch.PoissonSolution) -> GridFunction:
    """Poisson solution on the plane lattice, zero off the simplex.

    The zero extension matches the convention used when clipping: values at
    indices with ``k1 + k2 > n`` do not influence any admissible evaluation.
    """
    table, _ = ch.plane_table(solution, "f")
    n = solution.params.n
    return GridFunction(
        2,
        solution.params.delta,
        (0, 0),
        table,
        np.ones((n + 1, n + 1), dtype=bool),
    )


def gx_plane(solution: ch.PoissonSolution) -> GridFunction:
    """Generator applied to the Poisson solution, tabulated on the simplex plane."""
    table, valid = ch.plane_table(solution, "Gf")
    return GridFunction(2, solution.params.delta, (0, 0), table, valid)


def fhat_plane(solution: ch.PoissonSolution, depth: int = 1) -> GridFunction:
    """Clipped extension of the plane Poisson table to negative indices."""
    return clipped_extension(poisson_plane(solution), depth=depth)


def _check_wedge(params: ch.ModelParams, x):
    x1, x2 = float(x[0]), float(x[1])
    if x1 < 0 or x2 < 0 or x1 + x2 > params.delta * (params.n - 8):
        raise ValueError("point outside the admissible wedge")
    return x1, x2


def interp_poisson_lhs(solution: ch.PoissonSolution, x, gx: GridFunction | None = None) -> float:
    """Interpolated generator-of-solution at a plane point.

    By the Poisson equation this equals ``E h(X) - A h(x)`` throughout the
    admissible wedge; the implementation interpolates the tabulated generator
    values so the identity stays a genuine cross-check.  Pass a prebuilt
    ``gx`` grid when evaluating many points.
    """
    _check_wedge(solution.params, x)
    if gx is None:
        gx = gx_plane(solution)
    return interp_eval(gx, x)


def interchange_rhs(params: ch.ModelParams, fhat: Interpolant | GridFunction, x) -> float:
    """Three-term drift expression in the interpolated clipped extension:

        n*lam * (A fhat(x - delta*e1) - A fhat(x))
        + (delta*n - x1 - x2)/delta * (A fhat(x + delta*e1) - A fhat(x))
        + x2/delta * (A fhat(x1, x2 - delta) - A fhat(x))
    """
    if isinstance(fhat, GridFunction):
        fhat = Interpolant(fhat)
    x1, x2 = _check_wedge(params, x)
    delta = params.delta
    nlam = params.n * params.lam
    centre = fhat.value((x1, x2))
    out = nlam * (fhat.value((x1 - delta, x2)) - centre)
    out += (delta * params.n - x1 - x2) / delta * (
        fhat.value((x1 + delta, x2)) - centre
    )
    out += x2 / delta * (fhat.value((x1, x2 - delta)) - centre)
    return out


def error_term(
    solution: ch.PoissonSolution,
    x,
    fhat: Interpolant | GridFunction | None = None,
    gx: GridFunction | None = None,
) -> float:
    """Exact interchange remainder: interpolated lhs minus the drift expression."""
    if fhat is None:
        fhat = fhat_plane(solution)
    return interp_poisson_lhs(solution, x, gx) - interchange_rhs(
        solution.params, fhat, x
    )


def epsilon_term(solution: ch.PoissonSolution, x, ftable=None) -> float:
    """Independent evaluation of the interior interchange remainder.

    Away from the boundary layer the remainder reduces to a covariance-style
    double sum pairing rate fluctuations across the stencil against solution
    increments:

        sum_l sum_i w_i(x) (beta_l(kk+i) - Abeta_l(x))
              * [f(kk+i+l) - f(kk+i) - (f(kk+l) - f(kk))]

    with ``kk = max(k(x), 1)``.  Only the two state-dependent jump rates
    (level-1 departures and level-2 departures) contribute.
    """
    params = solution.params
    x1, x2 = _check_wedge(params, x)
    delta = params.delta
    n = params.n
    if ftable is None:
        ftable = ch.plane_table(solution, "f")[0]
    table = ftable

    def f(k1, k2):
        if 0 <= k1 <= n and 0 <= k2 <= n:
            return table[k1, k2]
        return 0.0

    k1 = max(math.floor(x1 / delta), 1)
    k2 = max(math.floor(x2 / delta), 1)
    t1 = x1 / delta - math.floor(x1 / delta)
    t2 = x2 / delta - math.floor(x2 / delta)
    w1 = [weight_eval(i, t1) for i in range(5)]
    w2 = [weight_eval(i, t2) for i in range(5)]

    # (jump, lattice rate, interpolated rate at x)
    jumps = (
        ((1, 0), lambda m1, m2: float(n - m1 - m2), (delta * n - x1 - x2) / delta),
        ((0, -1), lambda m1, m2: float(m2), x2 / delta),
    )
    out = 0.0
    for (l1, l2), beta_fn, beta_interp in jumps:
        base_inc = f(k1 + l1, k2 + l2) - f(k1, k2)
        for i1 in range(5):
            for i2 in range(5):
                m1, m2 = k1 + i1, k2 + i2
                rate_gap = beta_fn(m1, m2) - beta_interp
                inc = f(m1 + l1, m2 + l2) - f(m1, m2) - base_inc
                out += w1[i1] * w2[i2] * rate_gap * inc
    return out


def error_template(
    solution: ch.PoissonSolution,
    x,
    fhat_grid: GridFunction | None = None,
    h_plane: GridFunction | None = None,
) -> float:
    """Unit-constant value of the interchange remainder envelope.

    Sum of the mixed-second-difference supremum of the clipped extension near
    ``max(k, 1)`` plus, inside the boundary layer of either axis, the scaled
    fourth-difference suprema of the test function and the clipped extension.
    """
    params = solution.params
    x1, x2 = _check_wedge(params, x)
    delta = params.delta
    if fhat_grid is None:
        fhat_grid = fhat_plane(solution)
    k1 = math.floor(x1 / delta)
    k2 = math.floor(x2 / delta)
    kk1, kk2 = max(k1, 1), max(k2, 1)

    def fhat(i, j):
        return fhat_grid.value((i, j))

    sup2 = 0.0
    for a1, a2 in ((2, 0), (1, 1), (0, 2)):
        for i1 in range(0, 5):
            for i2 in range(-1, 5):
                base1, base2 = kk1 + i1, kk2 + i2
                acc = 0.0
                for m1 in range(a1 + 1):
                    for m2 in range(a2 + 1):
                        sign = (-1.0) ** ((a1 - m1) + (a2 - m2))
                        coef = math.comb(a1, m1) * math.comb(a2, m2)
                        acc += sign * coef * fhat(base1 + m1, base2 + m2)
                sup2 = max(sup2, abs(acc))
    out = sup2

    layer = (1 if x1 <= delta else 0) + (1 if x2 <= delta else 0)
    if layer:
        sup4f = 0.0
        for i1 in range(-1, 7):
            for i2 in range(-1, 7):
                for axis in (0, 1):
                    acc = 0.0
                    for m in range(5):
                        sign = (-1.0) ** (4 - m)
                        step = (m, 0) if axis == 0 else (0, m)
                        acc += sign * math.comb(4, m) * fhat(
                            k1 + i1 + step[0], k2 + i2 + step[1]
                        )
                    sup4f = max(sup4f, abs(acc))
        out += layer * params.n * sup4f
        if h_plane is not None:
            sup4h = 0.0
            for i1 in range(0, 6):
                for i2 in range(0, 6):
                    for axis in (0, 1):
                        a = (4, 0) if axis == 0 else (0, 4)
                        base = (k1 + i1, k2 + i2)
                        if h_plane.block_ok(base, a):
                            sup4h = max(
                                sup4h, abs(finite_diff(h_plane, a, base))
                            )
            out += layer * sup4h
    return out


def gy_gap(
    solution: ch.PoissonSolution,
    x,
    fhat: Interpolant | GridFunction | None = None,
    gx: GridFunction | None = None,
) -> float:
    """Interpolated chain generator minus diffusion generator at one point.

    Restricted to the bulk set ``x1 + x2 <= delta*n/2`` where the comparison
    drives the rate bound.
    """
    params = solution.params
    x1, x2 = float(x[0]), float(x[1])
    if x1 < 0 or x2 < 0 or x1 + x2 > params.delta * params.n / 2.0:
        raise ValueError("point outside the bulk comparison set")
    if fhat is None:
        fhat = Interpolant(fhat_plane(solution))
    elif isinstance(fhat, GridFunction):
        fhat = Interpolant(fhat)
    lhs = interp_poisson_lhs(solution, (x1, x2), gx)
    return lhs - df.apply_gy(fhat, (x1, x2), params.beta)


def reflection_derivative_bound(solution: ch.PoissonSolution) -> float:
    """Normalized boundary derivative combination driving the reflection term.

    At boundary knots ``(0, x2)`` the knot-derivative formula expresses the
    partials of the interpolated clipped extension through its differences:

        d_j A fhat(0, x2) = delta^{-1} (D_j - D_j^2/2 + D_j^3/3) fhat

    The reported value is ``sup_{x2} |d1 + d2| / (delta (1 + x2)^2)``, the
    growth envelope under which the regulator term of the comparison stays
    O(delta).
    """
    params = solution.params
    delta = params.delta
    fhat = fhat_plane(solution)
    sup = 0.0
    for k2 in range(0, params.n - 4):
        combo = 0.0
        for direction in ((1, 0), (0, 1)):
            diffs = [
                finite_diff(fhat, tuple(order * v for v in direction), (0, k2))
                for order in (1, 2, 3)
            ]
            combo += (diffs[0] - diffs[1] / 2.0 + diffs[2] / 3.0) / delta
        sup = max(sup, abs(combo) / (delta * (1.0 + delta * k2) ** 2))
    return sup


def lattice_test_function(h_name: str, params: ch.ModelParams):
    """Named test function as a callable on plane lattice indices."""
    delta = params.delta
    if h_name == "const":
        return lambda k1, k2, *rest: np.ones_like(np.asarray(k1, dtype=float))
    if h_name == "sum":
        return lambda k1, k2, *rest: delta * (
            k1 + k2 + sum(rest, np.zeros_like(k1))
        )
    if h_name == "x1":
        return lambda k1, k2, *rest: delta * np.asarray(k1, dtype=float)
    if h_name == "x2":
        return lambda k1, k2, *rest: delta * np.asarray(k2, dtype=float)
    if h_name == "dist_to_fluid":
        nlam = params.n * params.lam
        x1_star = params.beta + params.delta * (nlam - math.floor(nlam))

        def fn(k1, k2, *rest):
            out = (delta * np.asarray(k1, dtype=float) - x1_star) ** 2
            out = out + (delta * np.asarray(k2, dtype=float)) ** 2
            for r in rest:
                out = out + (delta * np.asarray(r, dtype=float)) ** 2
            return np.sqrt(out)

        return fn
    raise ValueError(f"unknown test function {h_name!r}")


@dataclass
class RateRow:
    """One line of the rate experiment report."""

    n: int
    b: int
    beta: float
    h: str
    error: float
    stderr: float
    sqrt_n_error: float
    chain_expectation: float
    diffusion_expectation: float
    tail_fraction: float
    retained: int
    inconclusive: bool


def rate_experiment(
    params_list,
    h_name: str,
    sim: df.SimConfig,
    master_seed: int,
) -> list[RateRow]:
    """Gap between exact chain expectations and diffusion Monte Carlo.

    For each instance, ``E h(X)`` comes from the stationary distribution and
    ``E A h(Y1, Y2, 0, ...)`` from interpolating the test function at streamed
    diffusion samples.  The per-instance simulation seed is derived from the
    master seed by instance position.  A row is flagged inconclusive when the
    Monte Carlo error exceeds half the measured gap.
    """
    rows = []
    for task, params in enumerate(params_list):
        solution = ch.solve_named(params, h_name)
        x = ch.scaled_state(solution.space.states, params)
        chain_exp = math.fsum(
            float(p) * float(v)
            for p, v in zip(solution.pi, _named_h_values(h_name, x, params))
        )
        h_fn = lattice_test_function(h_name, params)
        cutoff = params.delta * params.n / 2.0
        seed = derive_seed(master_seed, task)
        cfg = df.SimConfig(
            dt=sim.dt,
            burn_in=sim.burn_in,
            horizon=sim.horizon,
            thinning=sim.thinning,
            seed=seed,
            paths=sim.paths,
        )

        def eval_fn(y1, y2):
            pts = np.stack([y1, y2], axis=1)
            vals = interp_eval_lattice_fn(
                lambda k1, k2: h_fn(k1, k2), params.delta, pts
            )
            return np.stack([vals, (y1 + y2 > cutoff).astype(float)], axis=0)

        (mean, tail), (se, _), diag = _stream_multi(params.beta, cfg, eval_fn)
        error = abs(chain_exp - mean)
        rows.append(
            RateRow(
                n=params.n,
                b=params.b,
                beta=params.beta,
                h=h_name,
                error=error,
                stderr=se,
                sqrt_n_error=math.sqrt(params.n) * error,
                chain_expectation=chain_exp,
                diffusion_expectation=mean,
                tail_fraction=tail,
                retained=diag["retained"],
                inconclusive=bool(se > 0.5 * error),
            )
        )
    return rows


def _named_h_values(h_name, x, params):
    if h_name == "const":
        return np.ones(x.shape[0])
    if h_name == "sum":
        return x.sum(axis=1)
    if h_name == "x1":
        return x[:, 0]
    if h_name == "x2":
        return x[:, 1]
    if h_name == "dist_to_fluid":
        nlam = params.n * params.lam
        star = np.zeros(x.shape[1])
        star[0] = params.beta + params.delta * (nlam - math.floor(nlam))
        return np.linalg.norm(x - star, axis=1)
    raise ValueError(f"unknown test function {h_name!r}")


def _stream_multi(beta, cfg, eval_fn):
    """Stream a two-channel evaluation; returns per-channel (mean, se)."""
    P = cfg.paths
    sums = np.zeros((2, P))
    count = 0

    def sink(y1, y2):
        nonlocal count
        sums[:] += eval_fn(y1, y2)
        count += 1

    diag = df._simulate(beta, cfg, sink=sink)
    if count == 0:
        raise ValueError("no samples retained")
    path_means = sums / count
    means = path_means.mean(axis=1)
    ses = path_means.std(axis=1, ddof=1) / math.sqrt(P)
    diag["retained"] = count * P
    return (float(means[0]), float(means[1])), (float(ses[0]), float(ses[1])), diag


BOUND_FAMILIES = ("order1", "order2", "order3", "d1_plus_d2", "diag_gap")


def certify_bounds(params_list, h_names) -> list[dict]:
    """Normalized difference suprema of the Poisson solution per instance.

    For each instance and test function, reports

    - ``order{1,2,3}``: max over multi-orders of that total order of
      ``|D1^{a1} D2^{a2} f| / (delta^{|a|} (1 + x2)^{|a|})`` over plane states
      whose full stencil stays in the simplex,
    - ``d1_plus_d2``: ``|(D1 + D2) f(0, x2)| / (delta^2 (1 + x2)^2)``,
    - ``diag_gap``: ``|f(0, x2) - f(delta, x2 + delta)| / (delta^2 (1 + x2))``.

    Uniform-in-``n`` boundedness of these is exactly what transfers the chain
    comparison to the diffusion at rate ``1/sqrt(n)``.
    """
    rows = []
    for params in params_list:
        space = ch.enumerate_states(params)
        G = ch.build_generator(params, space)
        pi = ch.stationary(G, space)
        for h_name in h_names:
            h = ch.test_function(h_name, space)
            solution = ch.solve_poisson(G, h, pi, space, h_name)
            delta = params.delta
            n = params.n
            table, valid = ch.plane_table(solution, "f")
            k2_axis = np.arange(n + 1)
            x2_row = delta * k2_axis

            for order in (1, 2, 3):
                sup = 0.0
                for a1 in range(order + 1):
                    a2 = order - a1
                    d, v = ch._plane_diff(table, valid, a1, a2)
                    if not v.any():
                        continue
                    x2 = x2_row[: d.shape[1]][None, :]
                    norm = delta**order * (1.0 + x2) ** order
                    ratio = np.where(v, np.abs(d) / norm, 0.0)
                    sup = max(sup, float(ratio.max()))
                rows.append(
                    _bound_row(params, h_name, f"order{order}", sup, "stencil-in-simplex")
                )

            d1, v1 = ch._plane_diff(table, valid, 1, 0)
            d2, v2 = ch._plane_diff(table, valid, 0, 1)
            m = min(v1.shape[1], v2.shape[1])
            both = v1[0, :m] & v2[0, :m]
            comb = np.abs(d1[0, :m] + d2[0, :m])
            norm = delta**2 * (1.0 + x2_row[:m]) ** 2
            sup = float(np.where(both, comb / norm, 0.0).max())
            rows.append(_bound_row(params, h_name, "d1_plus_d2", sup, "x1=0"))

            k2 = np.arange(n - 1)
            gap = np.abs(table[0, : n - 1] - table[1, 1:n])
            norm = delta**2 * (1.0 + delta * k2)
            sup = float((gap / norm).max())
            rows.append(_bound_row(params, h_name, "diag_gap", sup, "x1=0-diagonal"))
    return rows


def _bound_row(params, h_name, order, sup, region):
    return {
        "n": params.n,
        "b": params.b,
        "beta": params.beta,
        "h": h_name,
        "order": order,
        "normalized_sup": sup,
        "region": region,
    }


# Smooth test family: every member has partial derivatives of orders 1..3
# bounded by one, giving a certified lower bound on the smooth-function
# distance between the chain and the collapsed diffusion.
SMOOTH_FAMILY = {
    "half_sum": lambda x1, x2: 0.5 * (x1 + x2),
    "tanh_half_sum": lambda x1, x2: np.tanh(0.5 * (x1 + x2)),
    "sine_mix": lambda x1, x2: np.sin(0.25 * x1 + 0.5 * x2),
    "soft_decay": lambda x1, x2: np.exp(-(x1 + x2) / 3.0),
}


def smooth_distance_estimate(
    params: ch.ModelParams,
    sim: df.SimConfig,
    family: dict | None = None,
) -> float:
    """Lower bound on the smooth-function distance via a finite family.

    Exact chain expectations against Monte Carlo diffusion expectations,
    maximized over the family; an empty family gives zero.
    """
    if family is None:
        family = SMOOTH_FAMILY
    if not family:
        return 0.0
    space = ch.enumerate_states(params)
    G = ch.build_generator(params, space)
    pi = ch.stationary(G, space)
    x = ch.scaled_state(space.states, params)
    samples, _ = df.stationary_sample(params.beta, sim)
    best = 0.0
    for fn in family.values():
        chain_exp = math.fsum(
            float(p) * float(v) for p, v in zip(pi, fn(x[:, 0], x[:, 1]))
        )
        diff_exp = float(fn(samples[:, 0], samples[:, 1]).mean())
        best = max(best, abs(chain_exp - diff_exp))
    return best


