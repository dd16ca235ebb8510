"""Synchronous coupling of two JSQ systems differing by one low-priority customer.

The joint chain tracks the base level counts ``q`` together with the class of
the extra customer: class ``i`` means the shadow system equals ``q + e_i``
(its extra customer sits at a server holding ``i`` customers there, always at
the back of that server's buffer).  Shared events move both systems together;
the extra customer's server is the tie-break target whenever it is among the
shortest queues.  The chain coalesces either when the extra customer finishes
service (class 1, rate-1 clock) or when an arrival is blocked by the shadow
system while the base system absorbs it (class ``b+1`` with the base system
one slot from full).

Class-``i`` dynamics, with ``j0`` the first unsaturated level of ``q``:

* rate 1, class 1: coupling (the extra customer departs);
* rate 1, class i >= 2: shared service at the extra server,
  ``q -> q - e_{i-1}``, class ``i-1``;
* rate ``(q_j - q_{j+1}) - 1(j = i-1, i >= 2)``: shared service at level j;
* rate ``n*lam``: shared arrival at level ``j0``; when ``j0 = i`` and
  ``q_i = n - 1`` the arrival preempts the extra customer, moving the class
  to ``i+1`` (or coalescing when ``i = b+1``).

Also implemented: the closed-form mean time for the first level count to climb
one step along the empty-buffer axis (the pre-hit dynamics reduce to a
birth-death chain with births ``n*lam`` and unit-rate services), and the
gambler's-ruin duration transform and ruin probability used to certify
coupling-failure probabilities along the many-server sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import ks_2samp

from .chain import ModelParams

__all__ = [
    "JointState",
    "CouplingTrace",
    "RuinParams",
    "simulate_coupled",
    "coupled_batch",
    "base_batch",
    "marginal_consistency",
    "hitting_time_up",
    "hitting_time_up_mc",
    "ruin_probability",
    "ruin_duration_mgf",
    "ruin_duration_mc",
    "hw_ruin_params",
    "hw_game_laplace",
    "hitting_probe",
    "wilson_halfwidth",
]

CAUSE_SERVICE = "service-completion-in-theta1"
CAUSE_BLOCKING = "blocking-at-full"
_CAUSE_CODES = {1: CAUSE_SERVICE, 2: CAUSE_BLOCKING}


@dataclass(frozen=True)
class JointState:
    """Base state plus the extra customer's class (0 once coalesced)."""

    base: tuple
    extra_level: int

    @property
    def coupled(self) -> bool:
        return self.extra_level == 0

    def shadow(self) -> tuple:
        if self.coupled:
            return self.base
        q = list(self.base)
        q[self.extra_level - 1] += 1
        return tuple(q)


@dataclass(frozen=True)
class CouplingTrace:
    """Outcome of one coupled run.

    ``theta1_time`` is the total time the extra customer spent in service
    (class 1) before coalescence; conditioned on coalescing by service it is a
    mean-1 exponential.
    """

    tau_c: float
    cause: str
    events: int
    seed: int
    theta1_time: float = 0.0
    class_path: tuple = ()
    state_path: tuple = ()


def _validate_joint_start(params: ModelParams, q0, i0: int):
    q0 = tuple(int(v) for v in q0)
    if len(q0) != params.levels:
        raise ValueError("initial state has the wrong number of levels")
    if any(q0[j] < q0[j + 1] for j in range(params.levels - 1)):
        raise ValueError("level counts must be nonincreasing")
    if q0[0] > params.n or q0[-1] < 0:
        raise ValueError("level counts must lie in 0..n")
    if not 1 <= i0 <= params.levels:
        raise ValueError("extra level must lie in 1..b+1")
    if q0[i0 - 1] >= params.n:
        raise ValueError("invalid initial class: level already saturated")
    if i0 >= 2 and q0[i0 - 2] <= q0[i0 - 1]:
        raise ValueError("invalid initial class: shadow state not monotone")
    return q0


def simulate_coupled(
    params: ModelParams,
    q0,
    i0: int,
    seed: int,
    max_events: int = 20_000_000,
    record_classes: bool = False,
) -> CouplingTrace:
    """Run one joint path until coalescence; deterministic per seed."""
    q0 = _validate_joint_start(params, q0, i0)
    rng = np.random.Generator(np.random.Philox(seed))
    n, levels = params.n, params.levels
    arrival = params.n * params.lam
    q = list(q0)
    cls = i0
    t = 0.0
    theta1 = 0.0
    classes = [cls]
    states = [tuple(q)]
    for events in range(1, max_events + 1):
        rates = [arrival, 1.0]
        for j in range(levels):
            nxt = q[j + 1] if j + 1 < levels else 0
            c = q[j] - nxt
            if cls >= 2 and j == cls - 2:
                c -= 1
            rates.append(float(c))
        total = sum(rates)
        dt = rng.exponential(1.0 / total)
        t += dt
        if cls == 1:
            theta1 += dt
        r = rng.random() * total
        cat, acc = 0, 0.0
        for cat, rate in enumerate(rates):
            acc += rate
            if r < acc:
                break
        if cat == 0:  # shared arrival
            j0 = next(j for j in range(levels) if q[j] < n)
            bump = (j0 == cls - 1) and (q[j0] == n - 1)
            q[j0] += 1
            if bump:
                cls = 0 if cls == levels else cls + 1
                if cls == 0:
                    if record_classes:
                        classes.append(0)
                        states.append(tuple(q))
                    return CouplingTrace(
                        t, CAUSE_BLOCKING, events, seed, theta1,
                        tuple(classes), tuple(states),
                    )
        elif cat == 1:  # extra customer's server completes
            if cls == 1:
                if record_classes:
                    classes.append(0)
                    states.append(tuple(q))
                return CouplingTrace(
                    t, CAUSE_SERVICE, events, seed, theta1,
                    tuple(classes), tuple(states),
                )
            q[cls - 2] -= 1
            cls -= 1
        else:
            q[cat - 2] -= 1
        if record_classes:
            classes.append(cls)
            states.append(tuple(q))
    raise RuntimeError("coupling did not occur within the event budget")


def _joint_batch_engine(
    params: ModelParams,
    q0,
    i0: int,
    paths: int,
    seed: int,
    horizon: float | None = None,
    stop_q1_at: int | None = None,
    max_rounds: int = 5_000_000,
):
    """Vectorised joint-chain runs.

    Stops each path at coalescence, at ``horizon`` (if given), or when the
    first level count reaches ``stop_q1_at`` (if given), whichever is first.
    Returns final times, class labels, states, cause codes and event counts.
    """
    q0 = _validate_joint_start(params, q0, i0)
    rng = np.random.Generator(np.random.Philox(seed))
    n, levels = params.n, params.levels
    arrival = params.n * params.lam

    q = np.tile(np.asarray(q0, dtype=np.int64), (paths, 1))
    cls = np.full(paths, i0, dtype=np.int64)
    t = np.zeros(paths)
    cause = np.zeros(paths, dtype=np.int8)  # 0 running/censored, 1 service, 2 blocking, 3 q1-stop
    events = np.zeros(paths, dtype=np.int64)
    active = np.ones(paths, dtype=bool)
    if stop_q1_at is not None and q0[0] == stop_q1_at:
        cause[:] = 3
        active[:] = False

    for _ in range(max_rounds):
        sub = np.flatnonzero(active)
        if sub.size == 0:
            break
        qs = q[sub]
        cs = cls[sub]
        m = sub.size
        rates = np.empty((m, levels + 2))
        # coalesced paths (class 0, horizon mode) follow plain base dynamics:
        # no extra clock, arrivals blocked at the full state
        rates[:, 0] = arrival * (qs < n).any(axis=1)
        rates[:, 1] = (cs >= 1).astype(float)
        for j in range(levels):
            nxt = qs[:, j + 1] if j + 1 < levels else 0
            rates[:, 2 + j] = qs[:, j] - nxt
        # the extra customer's server (class i >= 2) holds i-1 base customers;
        # its service is the dedicated rate-1 event, so remove it from the
        # level-(i-1) pool, which sits in column 2 + (i-2) = i
        sub_rows = np.arange(m)
        has_extra_server = cs >= 2
        rates[sub_rows[has_extra_server], cs[has_extra_server]] -= 1.0
        total = rates.sum(axis=1)
        dt = rng.exponential(1.0, size=m) / total
        pick = rng.random(m) * total

        if horizon is not None:
            over = t[sub] + dt > horizon
            if over.any():
                idx = sub[over]
                t[idx] = horizon
                active[idx] = False
                keep = ~over
                sub, qs, cs, m = sub[keep], qs[keep], cs[keep], int(keep.sum())
                if m == 0:
                    continue
                rates, total, dt, pick = rates[keep], total[keep], dt[keep], pick[keep]

        t[sub] += dt
        events[sub] += 1
        cat = (np.cumsum(rates, axis=1) > pick[:, None]).argmax(axis=1)

        # shared arrivals
        arr = cat == 0
        if arr.any():
            rows = sub[arr]
            j0 = (q[rows] < n).argmax(axis=1)
            bump = (j0 == cls[rows] - 1) & (q[rows, j0] == n - 1)
            q[rows, j0] += 1
            if bump.any():
                brows = rows[bump]
                couple = cls[brows] == levels
                cls[brows] = np.where(couple, 0, cls[brows] + 1)
                done = brows[couple]
                cause[done] = 2
                if horizon is None:
                    active[done] = False

        # extra customer's server
        ext = cat == 1
        if ext.any():
            rows = sub[ext]
            in_service = cls[rows] == 1
            done = rows[in_service]
            cause[done] = 1
            cls[done] = 0
            if horizon is None:
                active[done] = False
            move = rows[~in_service]
            q[move, cls[move] - 2] -= 1
            cls[move] -= 1

        # regular departures
        dep = cat >= 2
        if dep.any():
            rows = sub[dep]
            q[rows, cat[dep] - 2] -= 1

        if stop_q1_at is not None:
            hit = active & (q[:, 0] == stop_q1_at)
            if hit.any():
                cause[hit] = 3
                active[hit] = False
    else:
        raise RuntimeError("joint batch exceeded the event-round budget")

    return {"t": t, "cls": cls, "q": q, "cause": cause, "events": events}


def coupled_batch(params: ModelParams, q0, i0: int, paths: int, seed: int):
    """Coupling times and causes for a path ensemble (run to coalescence)."""
    out = _joint_batch_engine(params, q0, i0, paths, seed)
    return out["t"], out["cause"], out["events"]


def base_batch(
    params: ModelParams,
    q0,
    paths: int,
    seed: int,
    horizon: float | None = None,
    hit_level1: int | None = None,
    hit_level2: int | None = None,
    max_rounds: int = 5_000_000,
):
    """Vectorised base-chain runs.

    With a horizon, returns the states at that time.  With hitting targets
    (values for the first and/or second level count), stops each path at the
    first hit and reports which target was reached.
    """
    q0 = tuple(int(v) for v in q0)
    n, levels = params.n, params.levels
    if any(q0[j] < q0[j + 1] for j in range(levels - 1)) or q0[0] > n or q0[-1] < 0:
        raise ValueError("invalid initial state")
    for target in (hit_level1, hit_level2):
        if target is not None and not 0 <= target <= n:
            raise ValueError("hitting levels must lie in 0..n")
    rng = np.random.Generator(np.random.Philox(seed))
    arrival = params.n * params.lam

    q = np.tile(np.asarray(q0, dtype=np.int64), (paths, 1))
    t = np.zeros(paths)
    which = np.zeros(paths, dtype=np.int8)  # 1 = level-1 target, 2 = level-2 target
    active = np.ones(paths, dtype=bool)

    def check_hits():
        if hit_level1 is None and hit_level2 is None:
            return
        if hit_level1 is not None:
            hit = active & (q[:, 0] == hit_level1)
            which[hit] = 1
            active[hit] = False
        if hit_level2 is not None:
            hit = active & (q[:, 1] == hit_level2)
            which[hit & (which == 0)] = 2
            active[hit] = False

    check_hits()
    for _ in range(max_rounds):
        sub = np.flatnonzero(active)
        if sub.size == 0:
            break
        qs = q[sub]
        m = sub.size
        rates = np.empty((m, levels + 1))
        rates[:, 0] = arrival * (qs < n).any(axis=1)
        for j in range(levels):
            nxt = qs[:, j + 1] if j + 1 < levels else 0
            rates[:, 1 + j] = qs[:, j] - nxt
        total = rates.sum(axis=1)
        dt = rng.exponential(1.0, size=m) / total
        pick = rng.random(m) * total

        if horizon is not None:
            over = t[sub] + dt > horizon
            if over.any():
                idx = sub[over]
                t[idx] = horizon
                active[idx] = False
                keep = ~over
                sub, qs, m = sub[keep], qs[keep], int(keep.sum())
                if m == 0:
                    continue
                rates, total, dt, pick = rates[keep], total[keep], dt[keep], pick[keep]

        t[sub] += dt
        cat = (np.cumsum(rates, axis=1) > pick[:, None]).argmax(axis=1)
        arr = cat == 0
        if arr.any():
            rows = sub[arr]
            j0 = (q[rows] < n).argmax(axis=1)
            q[rows, j0] += 1
        dep = cat >= 1
        if dep.any():
            rows = sub[dep]
            q[rows, cat[dep] - 1] -= 1
        check_hits()
    else:
        raise RuntimeError("base batch exceeded the event-round budget")

    return {"t": t, "q": q, "which": which}


def marginal_consistency(
    params: ModelParams, q0, i0: int, t: float, paths: int, seed: int
):
    """KS statistics comparing the shadow marginal to a direct run.

    The shadow system reconstructed from a joint run started in class ``i0``
    must be distributed like the base chain started from ``q0 + e_{i0}``; both
    ensembles are sampled at time ``t`` and compared coordinate-wise.
    """
    q0 = _validate_joint_start(params, q0, i0)
    joint = _joint_batch_engine(params, q0, i0, paths, seed, horizon=t)
    shadow = joint["q"].copy()
    rows = np.flatnonzero(joint["cls"] > 0)
    shadow[rows, joint["cls"][rows] - 1] += 1

    start = list(q0)
    start[i0 - 1] += 1
    direct = base_batch(params, tuple(start), paths, seed + 1, horizon=t)["q"]

    stats = np.empty(params.levels)
    for j in range(params.levels):
        # only the statistic is consumed, so the asymptotic p-value mode is
        # fine and avoids the exact-computation fallback on tied integers
        stats[j] = ks_2samp(shadow[:, j], direct[:, j], method="asymp").statistic
    return stats


def _batch_mean_se(values: np.ndarray, n_batches: int = 100):
    """Mean and batch-means standard error over independent replications."""
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    usable = (len(values) // n_batches) * n_batches
    if usable >= n_batches:
        batches = values[:usable].reshape(n_batches, -1).mean(axis=1)
        se = float(batches.std(ddof=1) / math.sqrt(n_batches))
    else:
        se = float(values.std(ddof=1) / math.sqrt(len(values)))
    return mean, se


def wilson_halfwidth(successes: int, trials: int, zcrit: float = 1.96):
    """Wilson score interval: returns (centre, halfwidth)."""
    if trials <= 0:
        raise ValueError("need at least one trial")
    phat = successes / trials
    z2 = zcrit * zcrit
    denom = 1.0 + z2 / trials
    centre = (phat + z2 / (2 * trials)) / denom
    half = (
        zcrit
        * math.sqrt(phat * (1 - phat) / trials + z2 / (4 * trials * trials))
        / denom
    )
    return centre, half


def hitting_time_up(params: ModelParams, q1: int) -> float:
    """Mean time for the busy-server count to climb from ``q1`` to ``q1 + 1``.

    Both endpoints are empty-buffer states.  Until the climb completes, the
    chain cannot visit any state with occupied buffers (buffers fill only from
    a fully busy system), so the dynamics reduce to a birth-death chain with
    birth rate ``n*lam`` and death rate equal to the busy count:

        E tau = (q1! / (n*lam)^{q1+1}) * sum_{k=0}^{q1} (n*lam)^k / k!

    evaluated by a backward recurrence to avoid overflow.
    """
    if not 0 <= q1 <= params.n - 1:
        raise ValueError("need 0 <= q1 <= n-1: no climb from a fully busy system")
    nlam = params.n * params.lam
    term = 1.0 / nlam  # k = q1 contribution
    total = term
    for k in range(q1, 0, -1):
        term *= k / nlam
        total += term
    return total


def hitting_time_up_mc(params: ModelParams, q1: int, paths: int, seed: int):
    """Monte Carlo oracle for :func:`hitting_time_up` (mean, stderr)."""
    start = (q1,) + (0,) * params.b
    out = base_batch(params, start, paths, seed, hit_level1=q1 + 1)
    return _batch_mean_se(out["t"])


@dataclass(frozen=True)
class RuinParams:
    """Continuous-time gambler's ruin: win/loss probabilities, stakes, play rate."""

    p: float
    q: float
    z: int
    a: int
    r: float

    def __post_init__(self):
        if not (0 < self.p < 1 and 0 < self.q < 1):
            raise ValueError("probabilities must lie in (0,1)")
        if abs(self.p + self.q - 1.0) > 1e-12:
            raise ValueError("win and loss probabilities must sum to one")
        if not 0 < self.z < self.a:
            raise ValueError("need 0 < z < a")
        if self.r <= 0:
            raise ValueError("play rate must be positive")


def ruin_probability(p: float, q: float, z: int, a: int) -> float:
    """Probability of hitting 0 before ``a`` from initial wealth ``z``.

    Classic two-barrier formula ``1 - (1 - (q/p)^z) / (1 - (q/p)^a)`` with the
    symmetric limit ``1 - z/a``; evaluated with the large ratio factored out so
    either drift direction is stable.
    """
    if not 0 < z < a:
        raise ValueError("need 0 < z < a")
    if not (0 < p < 1 and abs(p + q - 1) < 1e-12):
        raise ValueError("invalid win/loss probabilities")
    if abs(p - q) < 1e-14:
        return 1.0 - z / a
    rho = q / p
    if rho <= 1.0:
        return 1.0 - (1.0 - rho**z) / (1.0 - rho**a)
    return 1.0 - (rho ** (z - a) - rho ** (-a)) / (1.0 - rho ** (-a))


def ruin_duration_mgf(rp: RuinParams, s: float) -> float:
    """Generating function ``E s^{D_z}`` of the number of plays until the end.

    Uses the two characteristic roots ``(1 +- sqrt(1 - 4pq s^2)) / (2ps)``;
    with the large root factored out, every term lies in [0, 1], so the
    evaluation is overflow-free even for stakes in the thousands.  The
    Laplace transform of the continuous-time duration at argument 1 is this
    function at ``s = r/(r+1)``.
    """
    if not 0.0 < s < 1.0:
        raise ValueError("s must lie in (0,1)")
    disc = math.sqrt(1.0 - 4.0 * rp.p * rp.q * s * s)
    lam1 = (1.0 + disc) / (2.0 * rp.p * s)
    lam2 = (1.0 - disc) / (2.0 * rp.p * s)
    L1, L2 = math.log(lam1), math.log(lam2)
    z, a = rp.z, rp.a
    # lam1 >= 1 >= lam2 > 0, so all exponents below are <= 0
    num = math.exp(z * L2) * (1.0 - math.exp(-a * L1)) - math.exp(
        z * L1 - a * L1
    ) * (math.exp(a * L2) - 1.0)
    den = 1.0 - math.exp(a * (L2 - L1))
    return num / den


def ruin_duration_laplace(rp: RuinParams) -> float:
    """``E exp(-duration)`` for the continuous-time game played at rate ``r``."""
    return ruin_duration_mgf(rp, rp.r / (rp.r + 1.0))


def ruin_duration_mc(rp: RuinParams, games: int, seed: int, s: float | None = None):
    """Monte Carlo companion for the ruin quantities.

    Plays ``games`` independent games; returns a dict with the ruin frequency,
    the sample mean of ``s^{D_z}`` (when ``s`` is given), and standard errors.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    wealth = np.full(games, rp.z, dtype=np.int64)
    steps = np.zeros(games, dtype=np.int64)
    active = np.ones(games, dtype=bool)
    while active.any():
        sub = np.flatnonzero(active)
        win = rng.random(sub.size) < rp.p
        wealth[sub] += np.where(win, 1, -1)
        steps[sub] += 1
        done = (wealth[sub] == 0) | (wealth[sub] == rp.a)
        active[sub[done]] = False
    ruined = wealth == 0
    out = {
        "ruin_prob": (float(ruined.mean()), float(ruined.std(ddof=1) / math.sqrt(games))),
        "steps": steps,
    }
    if s is not None:
        vals = s ** steps.astype(float)
        out["mgf"] = (float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(games)))
    return out


def hw_ruin_params(n: int, b: int, beta: float, q2: int, extra_level: int) -> RuinParams:
    """Gambler's-ruin parameters of the coupling-failure bound.

    The random walk dominates the busy count of the ``n - q2 - 1`` servers
    that start with empty buffers: wins are arrivals (rate ``n*lam``), losses
    are services by the initially idle portion of that group, and the game
    ends when the busy count climbs by ``floor(z/(b+1))`` (the extra customer
    outlasting one service stage) or falls by ``z = floor(sqrt(n)*beta/2)``.
    """
    if not 1 <= extra_level <= b + 1:
        raise ValueError("extra_level must lie in 1..b+1")
    z = math.floor(math.sqrt(n) * beta / 2.0)
    if z < 1:
        raise ValueError("n too small: zero initial stake")
    qbi = n - q2 - 1 - z + (z * (extra_level - 1)) // (b + 1)
    loss_rate = qbi - z
    if loss_rate <= 0:
        raise ValueError("n too small for this q2: nonpositive loss rate")
    nlam = n * (1.0 - beta / math.sqrt(n))
    r = nlam + loss_rate
    a = z + z // (b + 1)
    if a <= z:
        raise ValueError("n too small: degenerate target stake")
    return RuinParams(p=nlam / r, q=loss_rate / r, z=z, a=a, r=r)


def hw_game_laplace(n: int, b: int, beta: float, q2: int, extra_level: int) -> float:
    """``E exp(-duration)`` of the coupling-failure game at one parameter point."""
    return ruin_duration_laplace(hw_ruin_params(n, b, beta, q2, extra_level))


def hitting_probe(
    params: ModelParams,
    q0,
    i0: int,
    level1: int,
    level2: int,
    paths: int,
    seed: int,
):
    """Monte Carlo estimates of the hitting and race quantities.

    Returns a dict mapping quantity names to ``(estimate, stderr)``:

    - ``tau2_mean``: time for the second level count to reach ``level2``;
    - ``race_mean``: time until the first of {level-1 count = ``level1``,
      level-2 count = ``level2``};
    - ``race_prob``: probability the level-1 target is hit first (Wilson
      halfwidth as the error);
    - ``coupling_loss_prob``: probability the joint chain fails to coalesce
      before the base system becomes fully busy.
    """
    out2 = base_batch(params, q0, paths, seed, hit_level2=level2)
    tau2 = _batch_mean_se(out2["t"])
    race = base_batch(params, q0, paths, seed + 1, hit_level1=level1, hit_level2=level2)
    race_mean = _batch_mean_se(race["t"])
    q1_first = int((race["which"] == 1).sum())
    race_prob = wilson_halfwidth(q1_first, paths)
    joint = _joint_batch_engine(params, q0, i0, paths, seed + 2, stop_q1_at=params.n)
    losses = int((joint["cause"] == 3).sum())
    loss_prob = wilson_halfwidth(losses, paths)
    return {
        "tau2_mean": tau2,
        "race_mean": race_mean,
        "race_prob": race_prob,
        "coupling_loss_prob": loss_prob,
    }
