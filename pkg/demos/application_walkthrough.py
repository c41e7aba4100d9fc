"""Fit the three models to the bundled synthetic antidepressant-style data.

Prints a side-by-side table of the binomial and normal Bayesian fits, the
clustered binomial fit and the one-stage ML fit, then the absolute response
curve from a fit with the zero-dose block at a few doses.

    python3 demos/application_walkthrough.py [--iterations 20000]

Pass ``--data path.csv`` to use another arm-level file with the same layout.
"""

import argparse

import numpy as np

from drma import ModelSpec, SamplerConfig, Transform, fit_onestage, load_dataset, run, summarize
from drma.data import synthetic_antidepressant
from drma.model import absolute_response, summarize_curve


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data")
    ap.add_argument("--iterations", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    if args.data:
        ds, truth = load_dataset(args.data), None
    else:
        ds, truth = synthetic_antidepressant()
    print(f"{ds.ns} studies, {sum(len(s.arms) for s in ds.studies)} arms, clusters {ds.clusters}")

    tr = Transform("rcs3", (10.0, 20.0, 50.0))
    cfg = SamplerConfig(chains=3, iterations=args.iterations, burn_in=args.iterations // 10, seed=args.seed)
    fits = {
        "binomial": summarize(run(ModelSpec(tr), ds, cfg)),
        "normal": summarize(run(ModelSpec(tr, likelihood="normal"), ds, cfg)),
        "clustered": summarize(run(ModelSpec(tr, clustered=True), ds, cfg)),
    }
    one = fit_onestage(ds.effect_tables(), tr)

    rows = ["B1", "B2", "tau", "rho", "tau_within", "tau_between"]
    print(f"\n{'':>12s}" + "".join(f"{k:>22s}" for k in fits) + f"{'one-stage':>22s}")
    for r in rows:
        line = f"{r:>12s}"
        for s in fits.values():
            line += f"{s[r]['mean']:>12.4f} ({s[r]['sd']:.4f})" if r in s else f"{'':>22s}"
        if r in ("B1", "B2"):
            k = int(r[1]) - 1
            line += f"{one.B_hat[k]:>12.4f} ({one.se[k]:.4f})"
        elif r == "rho":
            line += f"{one.rho_hat:>12.2f}" + " " * 10
        print(line)
    print(f"{'':>12s}" + " " * 66 + f"   tau1 {one.tau_hat[0]:.4f} tau2 {one.tau_hat[1]:.4f}")
    if truth:
        print(f"\ngenerating truth: B=({truth['B1']}, {truth['B2']}), tau_within {truth['tau_within']}, "
              f"tau_between {truth['tau_between']}, placebo response {truth['placebo_response']}")

    zd = run(ModelSpec(tr, include_zero_dose_block=True), ds, cfg)
    B = np.column_stack([zd.pooled("B1"), zd.pooled("B2")])
    doses = np.array([0.0, 10.0, 20.0, 40.0, 60.0, 80.0])
    s = summarize_curve(absolute_response(B, zd.pooled("R0"), doses, tr))
    print("\nabsolute response")
    for d, m, lo, hi in zip(doses, s["mean"], s["lower"], s["upper"]):
        print(f"  {d:5.0f} mg/day  {m:.3f}  ({lo:.3f}, {hi:.3f})")


if __name__ == "__main__":
    main()
