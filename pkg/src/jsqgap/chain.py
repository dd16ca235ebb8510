"""Finite-buffer join-the-shortest-queue CTMC: generator, stationary law, Poisson equation.

The chain tracks level counts ``q = (q_1, ..., q_{b+1})`` where ``q_i`` is the
number of servers holding at least ``i`` customers, so ``n >= q_1 >= ... >=
q_{b+1} >= 0``.  Arrivals (rate ``n*lambda``) join a shortest queue, which at
the level-count granularity means incrementing the first level that is not
saturated; an arrival to a completely full system is blocked.  A server with
exactly ``j`` customers completes service at rate 1, decrementing level ``j``;
there are ``q_j - q_{j+1}`` such servers.

Scaled coordinates ``x_1 = delta*(n - q_1)``, ``x_i = delta*q_i`` with
``delta = 1/sqrt(n)`` put the chain in the many-server diffusion scaling
``lambda = 1 - beta/sqrt(n)``.

The discrete Poisson equation ``G f_h = E h(X) - h`` is solved exactly as a
sparse linear system with the redundant row replaced by the normalization
``f_h = 0`` at the scaled origin (all servers busy, all buffers empty).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "ModelParams",
    "StateSpace",
    "PoissonSolution",
    "enumerate_states",
    "build_generator",
    "apply_generator",
    "scaled_gen_apply",
    "stationary",
    "solve_poisson",
    "solve_named",
    "scaled_state",
    "unscaled_state",
    "test_function",
    "TEST_FUNCTIONS",
    "moment_identity",
    "plane_table",
    "diff_table",
    "fundamental_matrix_solution",
]

STATIONARY_RESIDUAL_TOL = 1e-10
POISSON_RESIDUAL_TOL = 1e-9

#: State counts above this use an explicit memory-budget error.
MAX_STATES = 5_000_000


@dataclass(frozen=True)
class ModelParams:
    """Problem instance: ``n`` servers, buffer length ``b``, slack ``beta``.

    Derived quantities: arrival intensity per server ``lam = 1 - beta/sqrt(n)``
    and lattice spacing ``delta = 1/sqrt(n)``.
    """

    n: int
    b: int
    beta: float

    def __post_init__(self):
        if self.n < 1 or self.b < 1:
            raise ValueError("need n >= 1 and b >= 1")
        if not 0 < self.beta < math.sqrt(self.n):
            raise ValueError("beta must lie in (0, sqrt(n)) so that lambda is in (0,1)")

    @property
    def lam(self) -> float:
        return 1.0 - self.beta / math.sqrt(self.n)

    @property
    def delta(self) -> float:
        return 1.0 / math.sqrt(self.n)

    @property
    def levels(self) -> int:
        return self.b + 1


@dataclass
class StateSpace:
    """Enumerated level-count states with a dense id bijection."""

    params: ModelParams
    states: np.ndarray  # (N, b+1) int32, lexicographically ordered
    index: dict = field(repr=False)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    def id_of(self, q) -> int:
        return self.index[tuple(int(v) for v in q)]

    def contains(self, q) -> bool:
        return tuple(int(v) for v in q) in self.index


def enumerate_states(params: ModelParams) -> StateSpace:
    """All monotone level-count tuples over ``{0..n}``, lexicographic order.

    The count equals ``binomial(n + b + 1, b + 1)``.
    """
    n, levels = params.n, params.levels
    expected = math.comb(n + levels, levels)
    if expected > MAX_STATES:
        raise MemoryError(
            f"state space has {expected} states, above the configured budget"
        )
    out = np.empty((expected, levels), dtype=np.int32)
    row = 0
    state = [0] * levels

    def rec(level, cap):
        nonlocal row
        if level == levels:
            out[row] = state
            row += 1
            return
        for v in range(cap + 1):
            state[level] = v
            rec(level + 1, v)

    rec(0, n)
    assert row == expected
    index = {tuple(int(v) for v in q): i for i, q in enumerate(out)}
    return StateSpace(params, out, index)


def _transitions(params: ModelParams, q):
    """Yield (target_state, rate) pairs for one state."""
    n, levels = params.n, params.levels
    arrival_rate = params.n * params.lam
    q = tuple(int(v) for v in q)
    # arrival joins the first unsaturated level; blocked when all full
    for j in range(levels):
        if q[j] < n:
            target = list(q)
            target[j] += 1
            yield tuple(target), arrival_rate
            break
    # departures: a server with exactly j+1 customers frees one level-(j+1) slot
    for j in range(levels):
        nxt = q[j + 1] if j + 1 < levels else 0
        rate = q[j] - nxt
        if rate > 0:
            target = list(q)
            target[j] -= 1
            yield tuple(target), float(rate)


def build_generator(params: ModelParams, space: StateSpace) -> sp.csr_matrix:
    """Sparse transition-rate matrix; rows sum to zero."""
    rows, cols, vals = [], [], []
    for i, q in enumerate(space.states):
        total = 0.0
        for target, rate in _transitions(params, q):
            j = space.index[target]
            rows.append(i)
            cols.append(j)
            vals.append(rate)
            total += rate
        rows.append(i)
        cols.append(i)
        vals.append(-total)
    N = space.size
    return sp.csr_matrix((vals, (rows, cols)), shape=(N, N))


def apply_generator(G: sp.spmatrix, f: np.ndarray, state_id: int) -> float:
    """Generator applied to a state table at one state: sum of rate*(f'-f)."""
    row = G.getrow(state_id)
    return float((row @ f)[0])


def scaled_state(q, params: ModelParams) -> np.ndarray:
    """Diffusion-scaled coordinates: x_1 = delta*(n - q_1), x_i = delta*q_i."""
    q = np.asarray(q, dtype=float)
    x = q * params.delta
    if q.ndim == 1:
        x[0] = params.delta * (params.n - q[0])
    else:
        x[:, 0] = params.delta * (params.n - q[:, 0])
    return x


def unscaled_state(x, params: ModelParams) -> np.ndarray:
    """Inverse of :func:`scaled_state`, rounded to the integer lattice."""
    x = np.asarray(x, dtype=float)
    q = x / params.delta
    if x.ndim == 1:
        q[0] = params.n - x[0] / params.delta
    else:
        q[:, 0] = params.n - x[:, 0] / params.delta
    return np.rint(q).astype(np.int64)


def _origin_id(space: StateSpace) -> int:
    """Id of the scaled origin x = 0, i.e. q = (n, 0, ..., 0)."""
    q0 = (space.params.n,) + (0,) * space.params.b
    return space.index[q0]


def stationary(G: sp.csr_matrix, space: StateSpace) -> np.ndarray:
    """Stationary probability vector: pi G = 0, sum(pi) = 1, pi > 0.

    Solved as a sparse direct system with one equation replaced by the
    normalization; the residual must meet ``STATIONARY_RESIDUAL_TOL``.
    """
    N = space.size
    A = G.T.tolil()
    A[0, :] = 1.0
    rhs = np.zeros(N)
    rhs[0] = 1.0
    A = A.tocsc()
    lu = spla.splu(A)
    pi = lu.solve(rhs)
    pi = pi / pi.sum()
    residual = float(np.abs(pi @ G).max())
    if residual > STATIONARY_RESIDUAL_TOL:
        # one step of iterative refinement; only when needed, because the
        # correction injects solver noise into the far-tail entries
        pi -= lu.solve(A @ pi - rhs)
        pi = pi / pi.sum()
        residual = float(np.abs(pi @ G).max())
    if residual > STATIONARY_RESIDUAL_TOL:
        raise RuntimeError(f"stationary residual {residual:.3e} above tolerance")
    if pi.min() <= 0.0:
        raise RuntimeError("stationary vector not strictly positive; chain reducible?")
    return pi


# Named test functions on scaled states.  Differences of the affine members
# are constants, so iterated differences stay discrete-Lipschitz.
def _h_sum(x):
    return x.sum(axis=-1)


def _h_x1(x):
    return x[..., 0]


def _h_x2(x):
    return x[..., 1]


def _fluid_point(params: ModelParams) -> np.ndarray:
    frac = params.n * params.lam - math.floor(params.n * params.lam)
    x = np.zeros(params.levels)
    x[0] = params.beta + params.delta * frac
    return x


def _h_dist_to_fluid(x, params: ModelParams):
    return np.linalg.norm(x - _fluid_point(params), axis=-1)


TEST_FUNCTIONS = ("sum", "x1", "x2", "dist_to_fluid")


def test_function(name: str, space: StateSpace) -> np.ndarray:
    """Tabulate a named test function over the state space (scaled states).

    ``const`` is accepted as a degenerate extra (useful as a null control);
    the public parameter-file interface exposes ``TEST_FUNCTIONS``.
    """
    x = scaled_state(space.states, space.params)
    if name == "sum":
        return _h_sum(x)
    if name == "x1":
        return _h_x1(x)
    if name == "x2":
        return _h_x2(x)
    if name == "dist_to_fluid":
        return _h_dist_to_fluid(x, space.params)
    if name == "const":
        return np.ones(space.size)
    raise ValueError(f"unknown test function {name!r}; choose from {TEST_FUNCTIONS}")


@dataclass
class PoissonSolution:
    """Solution table of ``G f = E h(X) - h`` with ``f = 0`` at the scaled origin."""

    params: ModelParams
    space: StateSpace
    G: sp.csr_matrix
    pi: np.ndarray
    h_name: str
    h: np.ndarray
    expected_h: float
    f: np.ndarray
    residual: float


def solve_poisson(
    G: sp.csr_matrix,
    h: np.ndarray,
    pi: np.ndarray,
    space: StateSpace,
    h_name: str = "custom",
) -> PoissonSolution:
    """Solve the discrete Poisson equation for a test-function table.

    The stationary expectation is accumulated with compensated summation
    because ``pi`` spans many orders of magnitude at large ``n``.
    """
    N = space.size
    expected_h = math.fsum(float(p) * float(v) for p, v in zip(pi, h))
    rhs = expected_h - np.asarray(h, dtype=float)
    anchor = _origin_id(space)
    A = G.tolil(copy=True)
    A[anchor, :] = 0.0
    A[anchor, anchor] = 1.0
    rhs = rhs.copy()
    rhs[anchor] = 0.0
    f = spla.splu(A.tocsc()).solve(rhs)
    f = f - f[anchor]
    residual = float(np.abs(G @ f - (expected_h - h)).max())
    if residual > POISSON_RESIDUAL_TOL:
        raise RuntimeError(f"Poisson residual {residual:.3e} above tolerance")
    return PoissonSolution(
        params=space.params,
        space=space,
        G=G,
        pi=pi,
        h_name=h_name,
        h=np.asarray(h, dtype=float),
        expected_h=expected_h,
        f=f,
        residual=residual,
    )


def solve_named(params: ModelParams, h_name: str) -> PoissonSolution:
    """Convenience: enumerate, build, and solve for a named test function."""
    space = enumerate_states(params)
    G = build_generator(params, space)
    pi = stationary(G, space)
    h = test_function(h_name, space)
    return solve_poisson(G, h, pi, space, h_name)


def fundamental_matrix_solution(
    G: sp.csr_matrix,
    h: np.ndarray,
    pi: np.ndarray,
    space: StateSpace,
    tol: float = 1e-13,
    max_iter: int = 2_000_000,
) -> np.ndarray:
    """Independent oracle for the Poisson solution via uniformized powers.

    Accumulates ``sum_k (P^k h - E h)/Lam`` for the uniformized transition
    matrix ``P = I + G/Lam``, then shifts to the ``f = 0``-at-origin
    normalization.  Only practical for small state spaces.
    """
    Lam = 1.05 * float(np.abs(G.diagonal()).max())
    P = sp.identity(space.size, format="csr") + G.multiply(1.0 / Lam)
    expected_h = math.fsum(float(p) * float(v) for p, v in zip(pi, h))
    v = np.asarray(h, dtype=float).copy()
    acc = np.zeros_like(v)
    for _ in range(max_iter):
        term = (v - expected_h) / Lam
        acc += term
        if np.abs(term).max() < tol * max(1.0, np.abs(acc).max()):
            break
        v = P @ v
    else:
        raise RuntimeError("uniformized series did not converge")
    return acc - acc[_origin_id(space)]


def moment_identity(params: ModelParams, solution: PoissonSolution):
    """Both sides of the stationary moment identity at the fluid point.

    Evaluating the Poisson equation for ``h(x) = sum_i x_i`` at the state
    nearest the fluid equilibrium ``(beta, 0, ..., 0)`` and regrouping the
    generator terms expresses the total scaled customer mass through two
    differences of the solution:

        sum_i E X_i = n*lam*D1^2 f(x_inf - delta*e1)
                      - (n*lam - floor(n*lam))*D1 f(x_inf)
                      + beta + delta*(n*lam - floor(n*lam))

    Returns ``(lhs, rhs)``; the contract is ``lhs == rhs`` to solver accuracy.
    """
    if solution.h_name != "sum":
        raise ValueError("moment identity requires the h(x)=sum(x) solution")
    space, n = solution.space, params.n
    nlam = params.n * params.lam
    floor_nlam = math.floor(nlam)
    frac = nlam - floor_nlam
    if floor_nlam < 1 or floor_nlam + 1 > n:
        raise ValueError("fluid-point difference stencil leaves the state space")

    def f_at(q1):
        q = (q1,) + (0,) * params.b
        return solution.f[space.index[q]]

    # x-lattice stencil around x_inf: x1 = delta*(n - q1)
    f_xinf = f_at(floor_nlam)
    f_xinf_p = f_at(floor_nlam - 1)  # x_inf + delta*e1
    f_xinf_m = f_at(floor_nlam + 1)  # x_inf - delta*e1
    d1_at_xinf = f_xinf_p - f_xinf
    d1sq_at_xinf_m = f_xinf_p - 2.0 * f_xinf + f_xinf_m

    x = scaled_state(space.states, params)
    lhs = math.fsum(
        float(p) * float(s) for p, s in zip(solution.pi, x.sum(axis=1))
    )
    rhs = nlam * d1sq_at_xinf_m - frac * d1_at_xinf + params.beta + params.delta * frac
    return lhs, rhs


def plane_table(solution: PoissonSolution, what: str = "f"):
    """Table of a solution-derived quantity on the plane ``x_3 = ... = 0``.

    Index ``(k1, k2)`` corresponds to the state ``q = (n - k1, k2, 0, ...)``;
    valid when ``k1 + k2 <= n``.  Returns ``(table, valid_mask)`` over the box
    ``[0, n] x [0, n]``.

    ``what`` selects the tabulated quantity: ``"f"`` for the Poisson solution,
    ``"Gf"`` for the generator applied to it, ``"h"`` for the test function.
    """
    params, space = solution.params, solution.space
    n = params.n
    if what == "f":
        source = solution.f
    elif what == "Gf":
        source = solution.G @ solution.f
    elif what == "h":
        source = solution.h
    else:
        raise ValueError("what must be one of 'f', 'Gf', 'h'")
    table = np.zeros((n + 1, n + 1))
    valid = np.zeros((n + 1, n + 1), dtype=bool)
    zeros = (0,) * (params.levels - 2)
    for k1 in range(n + 1):
        for k2 in range(n + 1 - k1):
            q = (n - k1, k2) + zeros
            table[k1, k2] = source[space.index[q]]
            valid[k1, k2] = True
    return table, valid


def _plane_diff(table, valid, a1: int, a2: int):
    """Forward differences on a masked plane table."""
    d, v = table, valid
    for _ in range(a1):
        d = d[1:, :] - d[:-1, :]
        v = v[1:, :] & v[:-1, :]
    for _ in range(a2):
        d = d[:, 1:] - d[:, :-1]
        v = v[:, 1:] & v[:, :-1]
    return d, v


def diff_table(solution: PoissonSolution, a, k1_max=None, k2_max=None):
    """Finite differences of the Poisson solution on the plane ``x_3=...=0``.

    Returns ``(diff, valid)`` with ``diff[k1, k2] = D1^{a1} D2^{a2}
    f(x(k1, k2))`` wherever the full forward stencil stays inside the state
    space; optional caps restrict the reported index ranges.
    """
    a1, a2 = (int(v) for v in a)
    if a1 < 0 or a2 < 0:
        raise ValueError("difference orders must be nonnegative")
    table, valid = plane_table(solution, "f")
    d, v = _plane_diff(table, valid, a1, a2)
    if k1_max is not None:
        d, v = d[: k1_max + 1], v[: k1_max + 1]
    if k2_max is not None:
        d, v = d[:, : k2_max + 1], v[:, : k2_max + 1]
    return d, v


def scaled_gen_apply(
    params: ModelParams, solution: PoissonSolution, q1: int, q2: int
) -> float:
    """Generator at a plane state from the regrouped drift/diffusion form.

    Rewrites the generator at ``(q1, q2, 0, ...)`` in terms of plane
    differences:

        1(q1<n) * n*lam * D1^2 f(x - delta*e1)
        + 1(q1=n, q2<n) * n*lam * (D1 + D2) f(x)
        + (beta - x1 - x2)/delta * D1 f(x)
        - x2/delta * D2 f(x1, x2 - delta)

    Identical to the transition-rate sum; the off-lattice value probed when
    ``q1 = q2`` carries an exactly cancelling coefficient, so the zero
    extension used by the table is immaterial.
    """
    n = params.n
    nlam = params.n * params.lam
    delta = params.delta
    table, _ = plane_table(solution, "f")
    k1, k2 = n - q1, q2
    x1, x2 = delta * k1, delta * k2

    def f(i, j):
        if 0 <= i <= n and 0 <= j <= n:
            return table[i, j]
        return 0.0

    out = 0.0
    if q1 < n:
        out += nlam * (f(k1 + 1, k2) - 2.0 * f(k1, k2) + f(k1 - 1, k2))
        out += (params.beta - x1 - x2) / delta * (f(k1 + 1, k2) - f(k1, k2))
    elif q2 < n:
        out += nlam * (
            (f(k1 + 1, k2) - f(k1, k2)) + (f(k1, k2 + 1) - f(k1, k2))
        )
        out += (params.beta - x1 - x2) / delta * (f(k1 + 1, k2) - f(k1, k2))
    if k2 > 0:
        out -= x2 / delta * (f(k1, k2) - f(k1, k2 - 1))
    return out
