"""MV-IPPO on the 3-microgrid preset over several seeds and risk levels.

Each (beta, seed) run is trained with the desk-scale config (or the full
preset with --paper-scale) and then evaluated by Monte Carlo. Results go to
results.csv under --out.
"""
import argparse
import csv
from pathlib import Path

from mvtsg import cli, ippo, mms


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--betas", default="0,1")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--paper-scale", action="store_true")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--horizon", type=int, default=2000)
    p.add_argument("--out", default="runs/ippo-seeds")
    args = p.parse_args()
    root = Path(args.out)
    rows = []
    for beta in (float(b) for b in args.betas.split(",")):
        sc = mms.load_scenario("mms-3mg", beta=beta)
        for seed in (int(s) for s in args.seeds.split(",")):
            out = root / f"beta{beta:g}-seed{seed}"
            argv = ["train-ippo", "--scenario", "mms-3mg", "--beta", str(beta), "--seed", str(seed),
                    "--out", str(out)]
            if args.steps is not None:
                argv += ["--steps", str(args.steps)]
            if args.paper_scale:
                argv.append("--paper-scale")
            if cli.main(argv):
                raise SystemExit(1)
            actors = cli.load_actors(out / "checkpoint.pt", sc)
            ev = ippo.evaluate_policy(sc, actors, args.episodes, args.horizon, seed=1000 + seed)
            rows.append([beta, seed, ev.mean, ev.variance, ev.j(beta)])
            print(f"beta={beta:g} seed={seed} eta={ev.mean:.4f} zeta={ev.variance:.4f} J={ev.j(beta):.4f}")
    with open(root / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["beta", "seed", "eta", "zeta", "j"])
        for b, s, *vals in rows:
            w.writerow([f"{b:g}", s] + [f"{v:.10g}" for v in vals])


if __name__ == "__main__":
    main()
