"""Command-line entry points.

    mvtsg fit-chain     series CSV -> transition matrix CSV
    mvtsg solve-ipga    exact projected gradient ascent on a tabular scenario
    mvtsg train-ippo    sample-based independent PPO
    mvtsg episode       per-step trace of a policy
    mvtsg verify        named oracle batteries

Every command writes ``manifest.json`` into its output directory before any
result file.  The default output root is ``$MVTSG_OUT`` (or ``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, ipga, ippo, mms, tabular, verify

log = logging.getLogger("mvtsg")


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _out_dir(args, default_name: str) -> Path:
    root = Path(os.environ.get("MVTSG_OUT", "runs"))
    out = Path(args.out) if args.out else root / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, scenario: str, config: dict, seed) -> dict:
    manifest = dict(command=command, scenario=scenario, config_hash=_hash(config), config=config, seed=seed,
                    version=__version__, output_dir=str(out), started=time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# policy files


def write_policy_csv(policy: tabular.TabularJointPolicy, scenario: mms.MmsScenario, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["agent", "state", "action", "b", "v", "prob"])
        for i, (p, mg) in enumerate(zip(policy.probs, scenario.microgrids)):
            for s, k in zip(*np.nonzero(p)):
                a = mms.action_from_index(k, mg)
                w.writerow([i, s, k, _fmt(mg.storage.discharge_actions[a.b_idx]),
                            _fmt(mg.curtail_grid[a.v_idx]), _fmt(p[s, k])])


def read_policy_csv(path, scenario: mms.MmsScenario) -> tabular.TabularJointPolicy:
    S = scenario.n_states
    probs = [np.zeros((S, mg.n_actions)) for mg in scenario.microgrids]
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i, s, k = int(row["agent"]), int(row["state"]), int(row["action"])
            if i >= len(probs) or s >= S or k >= probs[i].shape[1]:
                raise ValueError(f"{path}: policy does not fit scenario {scenario.name}")
            probs[i][s, k] = float(row["prob"])
    if any(np.any(np.abs(p.sum(axis=1) - 1) > 1e-6) for p in probs):
        raise ValueError(f"{path}: policy rows do not sum to one for scenario {scenario.name}")
    return tabular.TabularJointPolicy(tuple(p / p.sum(axis=1, keepdims=True) for p in probs))


# ---------------------------------------------------------------------------
# commands


def cmd_fit_chain(args) -> int:
    out = _out_dir(args, "fit-chain")
    levels = np.array([float(x) for x in args.levels.split(",")])
    write_manifest(out, "fit-chain", str(args.csv), dict(levels=levels.tolist(), kind=args.kind), None)
    values = mms.read_series_csv(args.csv)
    if args.kind == "wind-speed":
        values = mms.wind_power_from_speed(values, mms.Turbine(args.v_cutin, args.v_cutout, args.v_rated, args.w_cap))
    idx = mms.bin_to_levels(values, levels)
    P = mms.fit_transition_counts(idx, levels.size)
    visits = mms.transition_visit_counts(idx, levels.size)
    path = out / (args.name or "transition.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level"] + [_fmt(x) for x in levels])
        for lv, row in zip(levels, P):
            w.writerow([_fmt(lv)] + [_fmt(x) for x in row])
    for lv, n in zip(levels, visits):
        print(f"level {lv:g}: {n} visits")
        if n == 0:
            print(f"warning: level {lv:g} never visited; using identity row", file=sys.stderr)
    print(f"wrote {path}")
    return 0


def _scenario(args):
    sc = mms.load_scenario(args.scenario)
    if args.beta is not None:
        sc = sc.with_beta(args.beta)
    return sc


def cmd_solve_ipga(args) -> int:
    sc = _scenario(args)
    cfg = ipga.IpgaConfig(step_size=args.step_size, iterations=args.iterations,
                          mode="theoretical_step" if args.theoretical_step else "fixed_step",
                          kappa0=args.kappa0, log_every=args.log_every, early_stop_tol=args.early_stop)
    out = _out_dir(args, f"ipga-{sc.name}-beta{sc.beta:g}")
    conf = dict(scenario=mms.load_scenario_config(args.scenario), beta=sc.beta, ipga=vars(cfg),
                init=args.init)
    write_manifest(out, "solve-ipga", str(args.scenario), conf, args.seed)
    try:
        tables = tabular.build_tables(sc)
    except tabular.StateCapExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.init == "dirichlet":
        init = tabular.TabularJointPolicy.dirichlet(tables, np.random.default_rng(args.seed))
    elif args.init == "idle":
        init = tabular.TabularJointPolicy.idle(tables, sc)
    else:
        init = tabular.TabularJointPolicy.uniform(tables)

    def progress(k, an, st):
        log.info("iter %d eta %.5f zeta %.5f J %.5f ST %.3g", k, an.eta, an.zeta, an.j_value, st)

    policy, trace, an = ipga.run_ipga(tables, cfg, init, callback=progress)
    trace.to_csv(out / "trace.csv")
    write_policy_csv(policy, sc, out / "policy.csv")
    an.to_csv(out / "analysis.csv")
    summary = dict(eta=an.eta, zeta=an.zeta, j=an.j_value, iterations=cfg.iterations,
                   step_size=cfg.resolve_step(tables), n_states=tables.n_states)
    _write_json(out / "summary.json", summary)
    print(f"eta={an.eta:.6f} zeta={an.zeta:.6f} J={an.j_value:.6f}  -> {out}")
    return 0


def _ippo_config(args) -> ippo.IppoConfig:
    kw = {}
    if args.steps is not None:
        kw["total_steps"] = args.steps
    if args.envs is not None:
        kw["n_envs"] = args.envs
    if args.horizon is not None:
        kw["horizon"] = args.horizon
    return ippo.IppoConfig.paper(**kw) if args.paper_scale else ippo.IppoConfig.desk(**kw)


def cmd_train_ippo(args) -> int:
    sc = _scenario(args)
    config = _ippo_config(args)
    out = _out_dir(args, f"ippo-{sc.name}-beta{sc.beta:g}-seed{args.seed}")
    scfg = dict(mms.load_scenario_config(args.scenario), beta=sc.beta)
    write_manifest(out, "train-ippo", str(args.scenario), dict(scenario=scfg, ippo=config.to_dict()), args.seed)
    trainer = ippo.IppoTrainer(sc, config, args.seed, scenario_cfg=scfg)
    ckpt = out / "checkpoint.pt"
    if args.resume:
        try:
            trainer.load(args.resume)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    total = config.iterations if args.iterations is None else args.iterations
    trainer.run(total, checkpoint=ckpt, checkpoint_every=args.checkpoint_every)
    ippo.write_trace(trainer.trace, out / "trace.csv")
    last = trainer.trace[-1] if trainer.trace else None
    if last:
        print(f"eta_hat={last['eta_hat']:.5f} zeta_hat={last['zeta_hat']:.5f} J_hat={last['j_hat']:.5f} -> {out}")
    return 0


def cmd_episode(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args, f"episode-{sc.name}")
    write_manifest(out, "episode", str(args.scenario), dict(policy=str(args.policy), steps=args.steps), args.seed)
    if args.policy == "idle":
        actor = verify.idle_actor(sc)
    elif str(args.policy).endswith(".pt"):
        try:
            actors = load_actors(args.policy, sc)
        except (ValueError, RuntimeError, KeyError) as exc:
            print(f"error: incompatible policy {args.policy}: {exc}", file=sys.stderr)
            return 2
        actor = ippo.actor_policy(actors, greedy=args.greedy)
    else:
        try:
            actor = verify.tabular_actor(read_policy_csv(args.policy, sc))
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    rows = episode_rows(sc, actor, args.steps, args.seed)
    path = out / "episode.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["time"]
        for i in range(sc.n_agents):
            header += [f"G{i + 1}", f"D{i + 1}", f"B{i + 1}", f"b{i + 1}", f"v{i + 1}", f"net{i + 1}"]
        w.writerow(header + ["exchange"])
        for row in rows:
            w.writerow([row[0]] + [_fmt(x) for x in row[1:]])
    print(f"wrote {path}")
    return 0


def load_actors(path, scenario: mms.MmsScenario) -> list:
    """Actor networks from an IPPO checkpoint, sized from the stored weights."""
    import torch

    d = torch.load(path, weights_only=False)
    if len(d["actors"]) != scenario.n_agents:
        raise ValueError(f"checkpoint has {len(d['actors'])} actors, scenario has {scenario.n_agents} agents")
    F = sum(scenario.state_dims)
    actors = []
    for mg, state in zip(scenario.microgrids, d["actors"]):
        net = ippo.mlp(F, mg.n_actions, state["0.weight"].shape[0])
        net.load_state_dict(state)
        actors.append(net)
    return actors


def episode_rows(scenario: mms.MmsScenario, actor, steps: int, seed: int) -> list:
    g = np.random.default_rng(seed)
    env = mms.VectorMms(scenario, 1)
    env.reset(uniforms=g.random((1, len(env.dims))))
    N = scenario.n_agents
    rows = []
    for t in range(steps):
        u = g.random((1, N + env.n_uniforms))
        a = actor(env, u[:, :N])
        det = env.details(a)
        r = env.step(a, u[:, N:])
        row = [t]
        for d in det:
            row += [float(d[k][0]) for k in ("G", "D", "B", "b", "v", "net")]
        rows.append(row + [float(r[0])])
    return rows


SUITES = ("gradients", "identity", "projection", "poisson", "baselines", "theorem")


def run_suite(name: str, seed: int = 0) -> list:
    """Named oracle battery; returns a list of :class:`OracleReport`."""
    rng = np.random.default_rng(seed)
    reports = []
    if name == "gradients":
        for n in range(50):
            t = tabular.random_tables(rng, int(rng.integers(2, 201)), (2, 3), beta=float(rng.uniform(0, 2)),
                                      mask_prob=0.2)
            p = tabular.TabularJointPolicy.dirichlet(t, rng, concentration=2.0)
            d = verify.random_tangent(t, rng, p, pair=bool(n % 2))
            g = tabular.exact_gradient(t, p)
            reports.append(verify.report(f"directional_derivative[{n}]", verify.directional(g, d),
                                         verify.fd_directional_derivative(t, p, d), 1e-5, relative=True,
                                         floor=1e-6))
    elif name == "identity":
        for n in range(100):
            t = tabular.random_tables(rng, int(rng.integers(2, 6)), (2, 2), beta=float(rng.uniform(0, 2)))
            pa = tabular.TabularJointPolicy.dirichlet(t, rng)
            pb = tabular.TabularJointPolicy.dirichlet(t, rng)
            lhs, rhs = tabular.performance_difference(t, pa, pb)
            reports.append(verify.report(f"performance_difference[{n}]", rhs, lhs, 1e-9))
            r = verify.enumerate_identity_check(t, pa, pb)
            reports.append(dataclasses.replace(r, name=f"performance_difference_dense[{n}]"))
    elif name == "projection":
        for n in range(100):
            t = tabular.random_tables(rng, int(rng.integers(2, 8)), (3, 4), mask_prob=0.3)
            p = tabular.TabularJointPolicy.dirichlet(t, rng)
            g = [rng.normal(size=m.shape) * m for m in t.masks]
            stepped = ipga.ipga_step(p, g, 0.5, t.masks)
            joint = verify.joint_projection([a + 0.5 * b for a, b in zip(p.probs, g)], t.masks)
            err = max(float(np.abs(x - y).max()) for x, y in zip(stepped.probs, joint))
            reports.append(verify.report(f"per_agent_vs_joint[{n}]", err, 0.0, 1e-14))
    elif name == "poisson":
        for n in range(20):
            t = tabular.random_tables(rng, int(rng.integers(2, 20)), (2, 2), beta=float(rng.uniform(0, 2)))
            p = tabular.TabularJointPolicy.dirichlet(t, rng)
            an = tabular.analyze(t, p)
            res = verify.poisson_series_solve(t, p, an.f, an.j_value, 10_000)
            reports.append(verify.report(f"poisson_series[{n}]", float(np.abs(res.v - an.v_f).max()), 0.0, 1e-6))
    elif name == "baselines":
        sc2 = mms.load_scenario("mms-2mg")
        t2 = tabular.build_tables(sc2)
        ev = tabular.evaluate(t2, tabular.TabularJointPolicy.idle(t2, sc2), start=0)
        reports.append(verify.report("mms-2mg idle eta", ev.eta, -1.52, 0.02))
        reports.append(verify.report("mms-2mg idle zeta", ev.zeta, 0.57, 0.02))
        sc3 = mms.load_scenario("mms-3mg")
        mc = verify.mc_long_run_stats(sc3, "idle", 1_000_000, seed)
        reports.append(verify.report("mms-3mg idle eta (MC)", mc.eta, -4.55, 0.05))
        reports.append(verify.report("mms-3mg idle zeta (MC)", mc.zeta, 1.70, 0.05))
    elif name == "theorem":
        for n in range(3):
            t = tabular.random_tables(rng, int(rng.integers(3, 6)), (2, 2), beta=float(rng.uniform(0, 1)))
            res = theorem_check(t.normalized(), kappa0=1.0, eps=0.5, max_iterations=500)
            reports.append(verify.report(f"monotone_drop[{n}]", res["worst_drop"], 0.0, 1e-10))
            reports.append(verify.report(f"min_st_minus_eps[{n}]", max(res["min_st"] - 0.5, 0.0), 0.0, 0.0))
    else:
        raise KeyError(name)
    return reports


def theorem_check(tables: tabular.GameTables, kappa0: float = 1.0, eps: float = 0.5,
                  max_iterations: int | None = None) -> dict:
    """Ascent at ``1/L_J`` for the iteration bound (or ``max_iterations`` if smaller).

    Reports the worst single-step decrease of J and the smallest ST over the iterates.
    """
    _, L_J = ipga.smoothness_constants(tables.n_states, tables.a_max, kappa0, tables.beta, tables.n_agents)
    K = ipga.iteration_bound(L_J, 1.0, -(1.0 + tables.beta), eps)
    run_for = K if max_iterations is None else min(K, max_iterations)
    cfg = ipga.IpgaConfig(iterations=run_for, mode="theoretical_step", kappa0=kappa0)
    _, trace, _ = ipga.run_ipga(tables, cfg)
    J = np.array(trace.j_value)
    drops = J[:-1] - J[1:]
    return dict(K_bound=K, iterations=run_for, worst_drop=float(max(drops.max(initial=0.0), 0.0)),
                min_st=float(min(trace.st_gap)), L_J=L_J, trace=trace)


def cmd_verify(args) -> int:
    if not args.suite:
        print(f"usage: mvtsg verify SUITE  (one of: {', '.join(SUITES)}, all)", file=sys.stderr)
        return 2
    names = SUITES if args.suite == "all" else (args.suite,)
    if any(n not in SUITES for n in names):
        print(f"error: unknown suite {args.suite!r}; choose from {', '.join(SUITES)}, all", file=sys.stderr)
        return 2
    reports = []
    for n in names:
        reports += run_suite(n, args.seed)
    print(verify.format_table(reports))
    if args.out:
        out = _out_dir(args, "verify")
        write_manifest(out, "verify", "", dict(suite=args.suite), args.seed)
        verify.reports_to_csv(reports, out / "reports.csv")
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvtsg", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--scenario", default="mms-2mg", help="preset name or YAML path")
        sp.add_argument("--beta", type=float, default=None)
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None, help="output directory")

    f = sub.add_parser("fit-chain", help="fit a transition matrix from a series CSV")
    f.add_argument("csv")
    f.add_argument("--levels", required=True, help="comma-separated level values (nearest-level binning)")
    f.add_argument("--kind", choices=("power", "wind-speed"), default="power",
                   help="wind-speed converts m/s through the turbine curve first")
    f.add_argument("--v-cutin", type=float, default=4.0)
    f.add_argument("--v-cutout", type=float, default=25.0)
    f.add_argument("--v-rated", type=float, default=15.0)
    f.add_argument("--w-cap", type=float, default=3.0)
    f.add_argument("--name", default=None, help="output file name")
    f.add_argument("--out", default=None)
    f.set_defaults(func=cmd_fit_chain)

    s = sub.add_parser("solve-ipga", help="exact projected gradient ascent")
    common(s)
    s.add_argument("--iterations", type=int, default=500)
    s.add_argument("--step-size", type=float, default=0.5)
    s.add_argument("--theoretical-step", action="store_true", help="use alpha = 1/L_J")
    s.add_argument("--kappa0", type=float, default=1.0)
    s.add_argument("--log-every", type=int, default=1)
    s.add_argument("--early-stop", type=float, default=None, help="stop once ST falls below this")
    s.add_argument("--init", choices=("uniform", "dirichlet", "idle"), default="uniform")
    s.set_defaults(func=cmd_solve_ipga)

    t = sub.add_parser("train-ippo", help="sample-based independent PPO")
    common(t)
    t.set_defaults(scenario="mms-3mg")
    t.add_argument("--steps", type=int, default=None, help="total environment steps")
    t.add_argument("--iterations", type=int, default=None, help="stop after this many iterations")
    t.add_argument("--envs", type=int, default=None)
    t.add_argument("--horizon", type=int, default=None)
    t.add_argument("--paper-scale", action="store_true")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int, default=5)
    t.set_defaults(func=cmd_train_ippo)

    e = sub.add_parser("episode", help="per-step trace of a policy")
    common(e)
    e.add_argument("--policy", default="idle", help="'idle', an IPGA policy.csv or an IPPO checkpoint.pt")
    e.add_argument("--steps", type=int, default=72)
    e.add_argument("--greedy", action="store_true", help="argmax actions for network policies")
    e.set_defaults(func=cmd_episode)

    v = sub.add_parser("verify", help="run an oracle battery")
    v.add_argument("suite", nargs="?", default="")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
