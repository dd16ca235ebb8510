"""C3 interpolation of lattice functions by forward-difference weight polynomials.

Functions defined on a delta-spaced integer lattice are extended to the
continuum cell by cell.  Within the cell anchored at lattice index ``k``, the
extension is a degree-7 polynomial in ``t = (x - delta*k)/delta`` built from
the forward differences of orders 0..4 at ``k``; the quartic-difference part
is tuned so that values and derivatives up to order three agree where
neighbouring cells meet.  The resulting interpolant

* reproduces the lattice values exactly,
* reproduces polynomials of degree <= 3 exactly,
* is three times continuously differentiable, and
* has derivatives controlled by the corresponding finite differences.

The module also provides the clipped extension of a nonnegative-orthant
lattice function to negative indices, obtained by evaluating the weight sum
anchored at ``max(k, 0)``.

All weight coefficients are stored as exact rationals and converted to floats
once at import; decimal truncation would break the knot-continuity identities
at the 1e-12 level.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction as F

import numpy as np

__all__ = [
    "NUM_WEIGHTS",
    "GridFunction",
    "Interpolant",
    "weight_eval",
    "finite_diff",
    "interp_eval",
    "interp_derivative",
    "smoothness_gap",
    "clipped_extension",
    "save_grid",
    "load_grid",
]

#: Number of weight functions per axis (stencil width).
NUM_WEIGHTS = 5

# Coefficients of the five weight polynomials in t, ascending degree 0..7.
# Row i is the weight multiplying the lattice value at offset i.  Assembled
# from the cell polynomial
#   P(t) = f0 + t*(D - D^2/2 + D^3/3) f + t^2/2*(D^2 - D^3) f + t^3/6 D^3 f
#          + (-23/3 t^4 + 41/2 t^5 - 55/3 t^6 + 11/2 t^7) D^4 f
# by collecting the coefficient of each f(k+i) in the difference operators D^j.
_WEIGHT_COEFFS_EXACT = (
    (F(1), F(-11, 6), F(1), F(-1, 6), F(-23, 3), F(41, 2), F(-55, 3), F(11, 2)),
    (F(0), F(3), F(-5, 2), F(1, 2), F(92, 3), F(-82), F(220, 3), F(-22)),
    (F(0), F(-3, 2), F(2), F(-1, 2), F(-46), F(123), F(-110), F(33)),
    (F(0), F(1, 3), F(-1, 2), F(1, 6), F(92, 3), F(-82), F(220, 3), F(-22)),
    (F(0), F(0), F(0), F(0), F(-23, 3), F(41, 2), F(-55, 3), F(11, 2)),
)

_MAX_DERIV = 7


def _falling(m: int, v: int) -> int:
    out = 1
    for j in range(v):
        out *= m - j
    return out


def _build_weight_tables() -> list[np.ndarray]:
    """Float coefficient tables for the weights and their t-derivatives."""
    tables = []
    for v in range(_MAX_DERIV + 1):
        tab = np.zeros((NUM_WEIGHTS, 8 - v))
        for i, row in enumerate(_WEIGHT_COEFFS_EXACT):
            for m in range(v, 8):
                tab[i, m - v] = float(row[m] * _falling(m, v))
        tables.append(tab)
    return tables


#: _WEIGHT_TABLES[v][i] = ascending coefficients of d^v/dt^v of weight i.
_WEIGHT_TABLES = _build_weight_tables()


def _polyval_ascending(coeffs: np.ndarray, t):
    """Horner evaluation of a polynomial given ascending coefficients.

    Runs in extended precision: the degree-7 weight polynomials cancel heavily
    (their sum is the constant 1), and plain double Horner leaves ~1e-12 noise
    at the edge of the relevant t-range.
    """
    t = np.asarray(t, dtype=np.longdouble)
    out = np.full_like(t, coeffs[-1], dtype=np.longdouble)
    for c in coeffs[-2::-1]:
        out = out * t + np.longdouble(c)
    return out.astype(float)


def weight_eval(i: int, t, order: int = 0):
    """Evaluate weight polynomial ``i`` (or its t-derivative) at ``t``.

    The weights are polynomials in the cell-local coordinate
    ``t = (x - delta*k)/delta`` and do not depend on ``k`` or ``delta``;
    translation invariance of the interpolant follows.

    Parameters
    ----------
    i : int
        Weight index, 0..4.
    t : float or ndarray
        Cell-local coordinate(s).
    order : int
        Derivative order with respect to ``t`` (0..7; higher orders vanish).

    Returns
    -------
    float or ndarray
    """
    if not 0 <= i < NUM_WEIGHTS:
        raise ValueError(f"weight index must be in 0..4, got {i}")
    if order < 0:
        raise ValueError("derivative order must be nonnegative")
    if order > _MAX_DERIV:
        return np.zeros_like(np.asarray(t, dtype=float))[()]
    return _polyval_ascending(_WEIGHT_TABLES[order][i], t)[()]


def _weight_matrix(t_axis: float, order: int) -> np.ndarray:
    """All five weights (derivative ``order``) at one cell coordinate."""
    tab = _WEIGHT_TABLES[order]
    out = np.empty(NUM_WEIGHTS)
    for i in range(NUM_WEIGHTS):
        out[i] = _polyval_ascending(tab[i], t_axis)
    return out


@dataclass(frozen=True)
class GridFunction:
    """Real values on ``K ∩ delta*Z^d`` for a convex index set ``K``.

    The domain is described operationally: a bounding box ``lo..lo+shape-1``
    of integer indices together with a boolean mask selecting the indices that
    belong to the domain.  Convexity of the masked index set is the caller's
    responsibility; every operation only probes the mask locally.

    Attributes
    ----------
    dim : int
        Number of lattice dimensions.
    delta : float
        Lattice spacing.
    lo : tuple of int
        Smallest index of the bounding box along each axis.
    values : ndarray
        Array of shape ``hi - lo + 1``; entries outside the domain are 0.
    mask : ndarray of bool
        True where the index belongs to the domain.
    """

    dim: int
    delta: float
    lo: tuple
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        if self.delta <= 0:
            raise ValueError("spacing must be positive")
        if self.values.ndim != self.dim or self.mask.shape != self.values.shape:
            raise ValueError("values/mask shape inconsistent with dimension")

    @classmethod
    def from_callable(cls, dim, delta, lo, hi, fn, predicate=None):
        """Tabulate ``fn`` over the integer box ``lo..hi`` (inclusive).

        ``fn`` maps a tuple of integer indices to a value; ``predicate``
        restricts the domain inside the box (default: whole box).
        """
        lo = tuple(int(v) for v in lo)
        hi = tuple(int(v) for v in hi)
        shape = tuple(h - l + 1 for l, h in zip(lo, hi))
        values = np.zeros(shape)
        mask = np.ones(shape, dtype=bool)
        for idx in itertools.product(*(range(s) for s in shape)):
            k = tuple(l + i for l, i in zip(lo, idx))
            if predicate is not None and not predicate(k):
                mask[idx] = False
            else:
                values[idx] = fn(k)
        return cls(dim, float(delta), lo, values, mask)

    def _offset(self, k) -> tuple:
        return tuple(int(kj) - lj for kj, lj in zip(k, self.lo))

    def contains(self, k) -> bool:
        """Whether index ``k`` belongs to the domain."""
        off = self._offset(k)
        if any(o < 0 or o >= s for o, s in zip(off, self.values.shape)):
            return False
        return bool(self.mask[off])

    def value(self, k) -> float:
        """Stored value at index ``k``."""
        if not self.contains(k):
            raise ValueError(f"index {tuple(k)} outside grid domain")
        return float(self.values[self._offset(k)])

    def block_ok(self, k, extent) -> bool:
        """Whether the box ``k .. k+extent`` lies inside the domain."""
        off = self._offset(k)
        for o, e, s in zip(off, extent, self.values.shape):
            if o < 0 or o + e >= s:
                return False
        sl = tuple(slice(o, o + e + 1) for o, e in zip(off, extent))
        return bool(self.mask[sl].all())

    def block(self, k, extent) -> np.ndarray:
        off = self._offset(k)
        sl = tuple(slice(o, o + e + 1) for o, e in zip(off, extent))
        return self.values[sl]


def finite_diff(f: GridFunction, a, k) -> float:
    """Iterated forward difference of multi-order ``a`` at index ``k``.

    Computes ``D_1^{a_1} ... D_d^{a_d} f(delta*k)`` where
    ``D_i g(delta*k) = g(delta*(k+e_i)) - g(delta*k)``, expanding the operator
    into the alternating stencil sum over the box ``k .. k+a``.
    """
    a = tuple(int(v) for v in a)
    if len(a) != f.dim or any(v < 0 for v in a):
        raise ValueError("difference orders must be nonnegative, one per axis")
    if not f.block_ok(k, a):
        raise ValueError(f"difference stencil at {tuple(k)} leaves the domain")
    block = f.block(k, a)
    total = 0.0
    norm = sum(a)
    for m in itertools.product(*(range(v + 1) for v in a)):
        sign = -1.0 if (norm - sum(m)) % 2 else 1.0
        coef = 1.0
        for aj, mj in zip(a, m):
            coef *= _binom(aj, mj)
        total += sign * coef * block[m]
    return total


def _binom(n, k):
    out = 1
    for j in range(k):
        out = out * (n - j) // (j + 1)
    return out


def _anchor(f: GridFunction, x) -> tuple:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (f.dim,):
        raise ValueError(f"point has wrong dimension: {x.shape} vs {f.dim}")
    s = x / f.delta
    k = np.floor(s).astype(int)
    t = s - k
    return k, t


def _stencil_values(f: GridFunction, k) -> np.ndarray:
    extent = (NUM_WEIGHTS - 1,) * f.dim
    if not f.block_ok(k, extent):
        raise ValueError(
            f"interpolation stencil at anchor {tuple(int(v) for v in k)} leaves the domain"
        )
    return f.block(k, extent)


def interp_eval(f: GridFunction, x) -> float:
    """Value of the interpolant at ``x``.

    ``x`` must lie in the convex hull of the anchor set: the full 5^d weight
    stencil anchored at ``floor(x/delta)`` has to sit inside the domain.
    Lattice values are reproduced exactly.
    """
    k, t = _anchor(f, x)
    block = _stencil_values(f, k)
    for axis in range(f.dim):
        w = _weight_matrix(t[axis], 0)
        block = np.tensordot(w, block, axes=(0, 0))
    return float(block)


def interp_derivative(f: GridFunction, x, a) -> float:
    """Exact partial derivative ``d^a`` of the interpolant at ``x``.

    Orders with ``|a| <= 3`` are available everywhere; ``|a| = 4`` only off
    the lattice (the interpolant is C^3 but not C^4 across knots).  At a
    lattice point the one-sided ambiguity is resolved by the forward cell,
    so e.g. the first derivative along axis j at a knot equals
    ``delta^{-1} (D_j - D_j^2/2 + D_j^3/3) f``.
    """
    a = tuple(int(v) for v in a)
    if len(a) != f.dim or any(v < 0 or v > 4 for v in a):
        raise ValueError("derivative orders must lie in 0..4, one per axis")
    k, t = _anchor(f, x)
    if sum(a) >= 4 and all(tj == 0.0 for tj in t):
        raise ValueError("order-4 derivatives are undefined at lattice points")
    block = _stencil_values(f, k)
    scale = f.delta ** (-sum(a))
    for axis in range(f.dim):
        w = _weight_matrix(t[axis], a[axis])
        block = np.tensordot(w, block, axes=(0, 0))
    return float(block) * scale


def smoothness_gap(f: GridFunction, knot, direction: int, order: int) -> float:
    """Mismatch of cell-polynomial derivatives across a knot.

    Evaluates the ``order``-th derivative along axis ``direction`` of the two
    cell polynomials meeting at lattice point ``knot`` (left cell anchored one
    step back, right cell anchored at the knot) and returns left minus right.
    The construction makes the gap vanish for orders 0..3; order 4 is
    generically nonzero.
    """
    if not 0 <= direction < f.dim:
        raise ValueError("invalid direction")
    if not 0 <= order <= 4:
        raise ValueError("order must lie in 0..4")
    knot = tuple(int(v) for v in knot)
    left_anchor = tuple(kj - (1 if j == direction else 0) for j, kj in enumerate(knot))
    axis_extent = tuple(
        NUM_WEIGHTS - 1 if j == direction else 0 for j in range(f.dim)
    )
    if not (f.block_ok(left_anchor, axis_extent) and f.block_ok(knot, axis_extent)):
        raise ValueError("knot is not interior to the domain in this direction")
    w_left = _weight_matrix(1.0, order)
    w_right = _weight_matrix(0.0, order)
    left = right = 0.0
    for i in range(NUM_WEIGHTS):
        kl = tuple(
            kj + (i - 1 if j == direction else 0) for j, kj in enumerate(knot)
        )
        kr = tuple(kj + (i if j == direction else 0) for j, kj in enumerate(knot))
        left += w_left[i] * f.value(kl)
        right += w_right[i] * f.value(kr)
    return (left - right) * f.delta ** (-order)


def clipped_extension(f: GridFunction, depth: int = 1) -> GridFunction:
    """Extend a nonnegative-orthant grid function to negative indices.

    For an index ``k`` with negative components, the extension evaluates the
    weight sum anchored at ``max(k, 0)`` along the negative axes:

        fhat(k) = sum_i ( prod_{j: k_j<0} w_{i_j}(k_j) ) f(max(k,0) + i)

    with the sum ranging over offsets ``i`` in the negative axes only.  The
    extension agrees with ``f`` on the original domain.  The first five
    lattice layers along each axis must be inside the domain wherever the
    extension probes them.

    Parameters
    ----------
    f : GridFunction
        Function whose bounding box starts at the origin (or above).
    depth : int
        How many layers of negative indices to add along every axis.
    """
    if depth < 1:
        raise ValueError("extension depth must be >= 1")
    if any(l < 0 for l in f.lo):
        raise ValueError("input grid already has negative indices")
    new_lo = tuple(l - depth for l in f.lo)
    shape = tuple(s + depth for s in f.values.shape)
    values = np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    # weights at negative integer arguments, per axis offset 1..depth
    wneg = {m: _weight_matrix(float(-m), 0) for m in range(1, depth + 1)}
    for idx in itertools.product(*(range(s) for s in shape)):
        k = tuple(l + i for l, i in zip(new_lo, idx))
        neg = [j for j, kj in enumerate(k) if kj < 0]
        if not neg:
            if f.contains(k):
                values[idx] = f.values[f._offset(k)]
                mask[idx] = True
            continue
        base = tuple(max(kj, 0) for kj in k)
        extent = tuple(NUM_WEIGHTS - 1 if j in neg else 0 for j in range(f.dim))
        if not f.block_ok(base, extent):
            raise ValueError(
                "insufficient domain depth for the clipped extension stencil"
            )
        block = f.block(base, extent)
        offsets = [range(NUM_WEIGHTS) if j in neg else (0,) for j in range(f.dim)]
        acc = 0.0
        for offs in itertools.product(*offsets):
            wprod = 1.0
            for j in neg:
                wprod *= wneg[-k[j]][offs[j]]
            acc += wprod * block[offs]
        values[idx] = acc
        mask[idx] = True
    return GridFunction(f.dim, f.delta, new_lo, values, mask)


class Interpolant:
    """Callable view of the interpolated extension of a grid function."""

    def __init__(self, f: GridFunction):
        self.grid = f

    def value(self, x) -> float:
        return interp_eval(self.grid, x)

    def derivative(self, x, a) -> float:
        return interp_derivative(self.grid, x, a)

    def __call__(self, x) -> float:
        return self.value(x)


def interp_eval_lattice_fn(fn, delta: float, points: np.ndarray) -> np.ndarray:
    """Vectorised interpolation of a function defined on the whole lattice.

    ``fn`` maps integer index arrays (one per axis, broadcastable) to values;
    it must be defined wherever the 5^d stencils anchored at
    ``floor(points/delta)`` probe it.  Used for interpolating analytic test
    functions at Monte Carlo sample points without tabulating a grid.

    Parameters
    ----------
    fn : callable
        ``fn(k_1, ..., k_d) -> ndarray`` on integer arrays.
    delta : float
        Lattice spacing.
    points : ndarray, shape (m, d)
        Evaluation points.

    Returns
    -------
    ndarray, shape (m,)
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise ValueError("points must be a (m, d) array")
    m, d = pts.shape
    s = pts / delta
    k = np.floor(s).astype(np.int64)
    t = s - k
    w = np.empty((d, m, NUM_WEIGHTS))
    for axis in range(d):
        for i in range(NUM_WEIGHTS):
            w[axis, :, i] = _polyval_ascending(_WEIGHT_TABLES[0][i], t[:, axis])
    out = np.zeros(m)
    for offs in itertools.product(range(NUM_WEIGHTS), repeat=d):
        vals = fn(*(k[:, axis] + offs[axis] for axis in range(d)))
        wprod = w[0, :, offs[0]].copy()
        for axis in range(1, d):
            wprod *= w[axis, :, offs[axis]]
        out += wprod * np.asarray(vals, dtype=float)
    return out


def save_grid(f: GridFunction, path) -> None:
    """Write a grid function in the columnar text format.

    Header line ``d delta`` followed by one row ``k_1 ... k_d value`` per
    in-domain lattice point.
    """
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{f.dim} {f.delta!r}\n")
        for idx in itertools.product(*(range(s) for s in f.values.shape)):
            if not f.mask[idx]:
                continue
            k = tuple(l + i for l, i in zip(f.lo, idx))
            cells = " ".join(str(v) for v in k)
            fh.write(f"{cells} {f.values[idx]:.17g}\n")


def load_grid(path) -> GridFunction:
    """Read a grid function written by :func:`save_grid`."""
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        dim, delta = int(header[0]), float(header[1])
        entries = {}
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            k = tuple(int(v) for v in parts[:dim])
            entries[k] = float(parts[dim])
    if not entries:
        raise ValueError("grid file contains no lattice points")
    lo = tuple(min(k[j] for k in entries) for j in range(dim))
    hi = tuple(max(k[j] for k in entries) for j in range(dim))
    shape = tuple(h - l + 1 for l, h in zip(lo, hi))
    values = np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    for k, v in entries.items():
        idx = tuple(kj - lj for kj, lj in zip(k, lo))
        values[idx] = v
        mask[idx] = True
    return GridFunction(dim, delta, lo, values, mask)
