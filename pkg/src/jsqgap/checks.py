"""Randomized property suite for the lattice interpolation operator.

Each check draws a seeded corpus of grid functions and evaluation points and
reports one row: name, metric, measured value, threshold, pass flag.  The
suite backs the ``interp-check`` command; the acceptance tests rerun the same
properties at their pinned sizes.
"""

from __future__ import annotations

import numpy as np

from . import interpolation as ip

__all__ = ["interpolation_checks"]


def _random_grid(rng, dim, delta, extent=9):
    values = rng.normal(size=(extent + 1,) * dim)
    return ip.GridFunction(
        dim, delta, (0,) * dim, values, np.ones_like(values, dtype=bool)
    )


def _rel(err, scale):
    return err / max(scale, 1e-300)


def interpolation_checks(trials: int = 1000, points: int = 100, seed: int = 0):
    """Run the full property suite; returns a list of result dicts."""
    rng = np.random.default_rng(seed)
    rows = []

    def add(check, metric, value, threshold, passed):
        rows.append(
            {
                "check": check,
                "metric": metric,
                "value": float(value),
                "threshold": float(threshold),
                "passed": bool(passed),
            }
        )

    # weights sum to one on a wide window
    ts = rng.uniform(-1.0, 2.0, 1000)
    total = sum(ip.weight_eval(i, ts) for i in range(ip.NUM_WEIGHTS))
    worst = float(np.abs(total - 1.0).max())
    add("partition_of_unity", "max_abs_dev", worst, 1e-12, worst <= 1e-12)

    # weights at the anchor knot are exactly the Kronecker delta
    dev = max(
        abs(ip.weight_eval(i, 0.0) - (1.0 if i == 0 else 0.0))
        for i in range(ip.NUM_WEIGHTS)
    )
    add("weights_at_knot", "max_abs_dev", dev, 0.0, dev == 0.0)

    # stored values reproduced at lattice points
    worst = 0.0
    for trial in range(trials):
        dim = 1 if trial % 2 == 0 else 2
        delta = 1.0 if trial % 4 < 2 else 0.1
        f = _random_grid(rng, dim, delta, extent=7)
        scale = float(np.abs(f.values).max())
        for k in ([1], [3]) if dim == 1 else ([1, 2], [3, 1]):
            x = delta * np.asarray(k, dtype=float)
            err = abs(ip.interp_eval(f, x) - f.value(k))
            worst = max(worst, _rel(err, scale))
    add("lattice_exactness", "max_rel_err", worst, 1e-12, worst <= 1e-12)

    # exact reproduction of total degree <= 3 polynomials off the lattice
    worst = 0.0
    for dim in (1, 2):
        coeffs = rng.normal(size=(4,) * dim)

        def poly(*xs):
            out = 0.0
            for powers, c in np.ndenumerate(coeffs):
                if sum(powers) > 3:
                    continue
                term = c
                for x, p in zip(xs, powers):
                    term = term * x**p
                out += term
            return out

        delta = 0.1
        f = ip.GridFunction.from_callable(
            dim,
            delta,
            (0,) * dim,
            (9,) * dim,
            lambda k: poly(*(delta * v for v in k)),
        )
        for _ in range(points):
            x = rng.uniform(0.05, 0.55, size=dim)
            err = abs(ip.interp_eval(f, x) - poly(*x))
            worst = max(worst, _rel(err, max(1.0, abs(poly(*x)))))
    add("cubic_reproduction", "max_rel_err", worst, 1e-10, worst <= 1e-10)

    # one-sided cell derivatives agree at knots up to order three
    worst = 0.0
    order4 = []
    for _ in range(50):
        for dim in (1, 2):
            f = _random_grid(rng, dim, 0.1, extent=9)
            scale = float(np.abs(f.values).max())
            knot = (5,) * dim
            for direction in range(dim):
                for order in range(4):
                    gap = ip.smoothness_gap(f, knot, direction, order)
                    worst = max(worst, _rel(abs(gap), scale * 0.1 ** (-order)))
                order4.append(
                    abs(ip.smoothness_gap(f, knot, direction, 4))
                )
    add("knot_continuity", "max_rel_gap", worst, 1e-8, worst <= 1e-8)
    frac_nonzero = float(np.mean(np.asarray(order4) > 1e-6))
    add("order4_gap_nonzero", "fraction_nonzero", frac_nonzero, 0.99, frac_nonzero >= 0.99)

    # translating the grid function and the point leaves values unchanged;
    # dyadic points keep x + 2 exact in floating point, so the match is exact
    worst = 0.0
    f = _random_grid(rng, 1, 1.0, extent=9)
    shifted = ip.GridFunction(1, 1.0, (2,), f.values, f.mask)
    for _ in range(points):
        x = float(rng.integers(64, 4 * 64)) / 64.0
        worst = max(
            worst, abs(ip.interp_eval(f, [x]) - ip.interp_eval(shifted, [x + 2.0]))
        )
    add("translation_invariance", "max_abs_dev", worst, 0.0, worst == 0.0)

    # derivative magnitudes controlled by finite differences of equal order
    worst = 0.0
    for _ in range(trials):
        f = _random_grid(rng, 1, 0.1, extent=9)
        k = int(rng.integers(0, 5))
        x = 0.1 * (k + rng.uniform(0.001, 0.999))
        for order in (1, 2, 3):
            dval = abs(ip.interp_derivative(f, [x], (order,)))
            sup = max(
                abs(ip.finite_diff(f, (order,), (k + i,)))
                for i in range(0, 5 - order)
            )
            if sup > 0:
                worst = max(worst, dval * 0.1**order / sup)
    add("derivative_difference_ratio", "measured_constant", worst, 1e3, worst <= 1e3)

    # derivatives consistent with a central difference of the interpolant;
    # the discrepancy is O(h^2 * f''') and f''' scales like delta^-3 times the
    # third differences, so normalize by that
    worst = 0.0
    delta = 0.1
    h = delta / 100.0
    for _ in range(points):
        f = _random_grid(rng, 1, delta, extent=9)
        x = delta * rng.uniform(1.2, 4.8)
        exact = ip.interp_derivative(f, [x], (1,))
        fd = (ip.interp_eval(f, [x + h]) - ip.interp_eval(f, [x - h])) / (2 * h)
        third = max(
            abs(ip.finite_diff(f, (3,), (i,))) for i in range(0, 7)
        )
        scale = h * h * delta**-3 * max(third, 1e-12)
        worst = max(worst, abs(exact - fd) / scale)
    add("derivative_fd_consistency", "normalized_err", worst, 10.0, worst <= 10.0)

    # clipped-extension differences controlled by interior differences
    worst = 0.0
    for _ in range(200):
        f = _random_grid(rng, 1, 0.1, extent=9)
        fhat = ip.clipped_extension(f, depth=1)
        for order in (1, 2, 3, 4):
            val = abs(ip.finite_diff(fhat, (order,), (-1,)))
            sup = max(
                abs(ip.finite_diff(f, (order,), (i,))) for i in range(0, 5 - order)
            )
            if sup > 0:
                worst = max(worst, val / sup)
    add("clipped_extension_bound", "measured_constant", worst, 1e3, worst <= 1e3)

    return rows
