"""Small simulation run over the built-in scenario grid.

By default fits only the one-stage model (seconds per scenario). Add
``--bayes`` to include both Bayesian models with a short sampler run.

    python3 demos/simulation_smoke.py --reps 20
    python3 demos/simulation_smoke.py --reps 5 --bayes --only S4
"""

import argparse
import dataclasses

from drma.sampler import SamplerConfig
from drma.simulation import METHODS, run_study, table2_suite


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--bayes", action="store_true")
    ap.add_argument("--only", nargs="*")
    ap.add_argument("--or-generation", default="paper-multiplicative",
                    choices=("paper-multiplicative", "logit-additive"))
    args = ap.parse_args()

    suite = [dataclasses.replace(s, or_generation=args.or_generation) for s in table2_suite()]
    if args.only:
        suite = [s for s in suite if s.name in args.only]
    methods = METHODS if args.bayes else ("onestage",)
    cfg = SamplerConfig(chains=3, iterations=5_000, burn_in=1_000)
    report, _ = run_study(suite, methods, replications=args.reps, config=cfg, seed=1)

    print(f"{'scen':>5s} {'method':>15s} {'par':>4s} {'bias':>9s} {'MSE':>9s} {'cover':>6s} {'power':>6s}")
    for r in report.rows():
        print(f"{r['scenario']:>5s} {r['method']:>15s} {r['parameter']:>4s} {r['bias']:>9.4f} {r['mse']:>9.5f} "
              f"{r['coverage']:>6.2f} {r['power']:>6.2f}")


if __name__ == "__main__":
    main()
