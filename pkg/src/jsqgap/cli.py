"""Batch command-line driver.

Every subcommand reads a flat key-value config file (flags win over file
values), runs its pipeline with seeds fanned out from the master seed, and
writes CSV output plus a manifest.  Instances of a parameter grid can be
processed in parallel with ``--threads``; outputs are assembled in
deterministic order either way.
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import chain as ch
from . import checks
from . import coupling as cp
from . import diffusion as df
from . import pipeline as pl
from . import reporting as rp

DEFAULT_SEED = 20260810


def _instances(config):
    """Deduplicated (n, b, beta) grid in deterministic order."""
    ns = rp.as_int_list(config, "n")
    bs = rp.as_int_list(config, "b", "1")
    betas = rp.as_float_list(config, "beta", "1.0")
    if not ns or not bs or not betas:
        raise ValueError("parameter grid is empty")
    seen = []
    for n, b, beta in itertools.product(ns, bs, betas):
        inst = (n, b, beta)
        if inst not in seen:
            seen.append(inst)
    return [ch.ModelParams(*inst) for inst in seen]


def _instance_out(out, params, multi):
    if not multi:
        return out
    stem, ext = os.path.splitext(out)
    return f"{stem}_n{params.n}_b{params.b}_beta{params.beta:g}{ext or '.csv'}"


def _run_tasks(worker, tasks, threads):
    if threads <= 1 or len(tasks) <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, tasks))


def _distribution_rows(params, values):
    space = ch.enumerate_states(params)
    rows = []
    for sid, q in enumerate(space.states):
        rows.append((sid, *(int(v) for v in q), values[sid]))
    header = ["state_id"] + [f"q_{j+1}" for j in range(params.levels)] + ["value"]
    return header, rows


def _stationary_task(args):
    n, b, beta = args
    params = ch.ModelParams(n, b, beta)
    space = ch.enumerate_states(params)
    G = ch.build_generator(params, space)
    pi = ch.stationary(G, space)
    return _distribution_rows(params, pi)


def cmd_stationary(config, out, seed, threads):
    instances = _instances(config)
    multi = len(instances) > 1
    results = _run_tasks(
        _stationary_task, [(p.n, p.b, p.beta) for p in instances], threads
    )
    outputs = []
    for params, (header, rows) in zip(instances, results):
        path = _instance_out(out, params, multi)
        rp.write_csv(path, header, rows)
        outputs.append(path)
    return outputs


def _poisson_task(args):
    n, b, beta, h_name = args
    params = ch.ModelParams(n, b, beta)
    solution = ch.solve_named(params, h_name)
    return _distribution_rows(params, solution.f)


def cmd_poisson(config, out, seed, threads):
    instances = _instances(config)
    h_name = rp.as_str(config, "h", "sum")
    if h_name not in ch.TEST_FUNCTIONS:
        raise ValueError(
            f"unknown test function {h_name!r}; choose from {ch.TEST_FUNCTIONS}"
        )
    multi = len(instances) > 1
    results = _run_tasks(
        _poisson_task, [(p.n, p.b, p.beta, h_name) for p in instances], threads
    )
    outputs = []
    for params, (header, rows) in zip(instances, results):
        path = _instance_out(out, params, multi)
        rp.write_csv(path, header, rows)
        outputs.append(path)
    return outputs


def cmd_interp_check(config, out, seed, threads):
    trials = rp.as_int(config, "trials", "1000")
    points = rp.as_int(config, "points", "100")
    rows = checks.interpolation_checks(trials=trials, points=points, seed=seed)
    rp.write_csv(
        out,
        ["check", "metric", "value", "threshold", "pass"],
        [(r["check"], r["metric"], r["value"], r["threshold"], r["passed"]) for r in rows],
    )
    if not all(r["passed"] for r in rows):
        print("interp-check: FAILURES present", file=sys.stderr)
    return [out]


def _couple_task(args):
    n, b, beta, q0, i0, path_seed = args
    params = ch.ModelParams(n, b, beta)
    trace = cp.simulate_coupled(params, q0, i0, path_seed)
    return (path_seed, trace.tau_c, trace.cause, trace.events)


def cmd_couple(config, out, seed, threads):
    params = _instances(config)[0]
    q0 = tuple(rp.as_int_list(config, "q0"))
    i0 = rp.as_int(config, "extra_level", "1")
    paths = rp.as_int(config, "paths", "200")
    tasks = [
        (params.n, params.b, params.beta, q0, i0, rp.derive_seed(seed, k))
        for k in range(paths)
    ]
    rows = _run_tasks(_couple_task, tasks, threads)
    rp.write_csv(out, ["seed", "tau_c", "cause", "events"], rows)
    return [out]


def cmd_probe(config, out, seed, threads):
    params = _instances(config)[0]
    q0 = tuple(rp.as_int_list(config, "q0"))
    i0 = rp.as_int(config, "extra_level", "1")
    level1 = rp.as_int(config, "level1")
    level2 = rp.as_int(config, "level2")
    paths = rp.as_int(config, "paths", "1000")
    est = cp.hitting_probe(params, q0, i0, level1, level2, paths, seed)
    rows = [
        (name, val[0], val[1], params.n, params.beta, params.b, q0[1])
        for name, val in est.items()
    ]
    rp.write_csv(
        out, ["quantity", "estimate", "stderr", "n", "beta", "b", "q2"], rows
    )
    return [out]


def _sim_config(config, seed):
    return df.SimConfig(
        dt=rp.as_float(config, "dt", "1e-3"),
        burn_in=rp.as_float(config, "burn_in", "100"),
        horizon=rp.as_float(config, "horizon", "100"),
        thinning=rp.as_int(config, "thinning", "100"),
        seed=seed,
        paths=rp.as_int(config, "paths", "64"),
    )


def cmd_diffusion(config, out, seed, threads):
    beta = rp.as_float_list(config, "beta", "1.0")[0]
    cfg = _sim_config(config, seed)
    samples, _ = df.stationary_sample(beta, cfg)
    rows = [(i, s[0], s[1]) for i, s in enumerate(samples)]
    rp.write_csv(out, ["sample_id", "y1", "y2"], rows)
    return [out]


def _rate_task(args):
    n, b, beta, h_name, sim_args, task_seed = args
    params = ch.ModelParams(n, b, beta)
    sim = df.SimConfig(*sim_args)
    row = pl.rate_experiment([params], h_name, sim, task_seed)[0]
    return row


def cmd_rate(config, out, seed, threads):
    instances = _instances(config)
    h_name = rp.as_str(config, "h", "sum")
    cfg = _sim_config(config, seed)
    sim_args = (cfg.dt, cfg.burn_in, cfg.horizon, cfg.thinning, cfg.seed, cfg.paths)
    tasks = [
        (p.n, p.b, p.beta, h_name, sim_args, rp.derive_seed(seed, k))
        for k, p in enumerate(instances)
    ]
    rows = _run_tasks(_rate_task, tasks, threads)
    rp.write_csv(
        out,
        ["n", "b", "beta", "h", "error", "stderr", "sqrt_n_error"],
        [(r.n, r.b, r.beta, r.h, r.error, r.stderr, r.sqrt_n_error) for r in rows],
    )
    return [out]


def _certify_task(args):
    n, b, beta, h_names = args
    params = ch.ModelParams(n, b, beta)
    return pl.certify_bounds([params], h_names)


def cmd_certify(config, out, seed, threads):
    instances = _instances(config)
    h_names = rp.as_str_list(config, "h", "sum,x1,x2")
    results = _run_tasks(
        _certify_task, [(p.n, p.b, p.beta, tuple(h_names)) for p in instances], threads
    )
    rows = []
    for chunk in results:
        for r in chunk:
            rows.append((r["n"], r["order"], r["h"], r["normalized_sup"], r["region"]))
    rp.write_csv(out, ["n", "order", "h", "normalized_sup", "region"], rows)
    return [out]


_COMMANDS = {
    "stationary": cmd_stationary,
    "poisson": cmd_poisson,
    "interp-check": cmd_interp_check,
    "couple": cmd_couple,
    "probe": cmd_probe,
    "diffusion": cmd_diffusion,
    "rate": cmd_rate,
    "certify": cmd_certify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jsqgap",
        description=(
            "Exact and Monte Carlo certification of the JSQ diffusion "
            "approximation"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} pipeline")
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", required=True, help="output CSV path")
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--threads", type=int, default=1, help="parallel tasks")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (repeatable)",
        )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = rp.parse_config(args.config) if args.config else {}
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"bad --set value {item!r}", file=sys.stderr)
            return 2
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    config = rp.merge_config(config, overrides)
    seed = args.seed if args.seed is not None else int(config.get("seed", DEFAULT_SEED))
    try:
        outputs = _COMMANDS[args.command](config, args.out, seed, args.threads)
    except (KeyError, ValueError) as exc:
        print(f"jsqgap {args.command}: {exc}", file=sys.stderr)
        return 2
    rp.write_manifest(args.out, args.command, config, seed, outputs)
    for path in outputs:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
