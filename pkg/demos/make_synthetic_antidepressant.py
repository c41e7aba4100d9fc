"""Regenerate the bundled synthetic antidepressant-style dataset.

The real 60-trial dataset is not redistributed here. This script builds a
stand-in with the same layout: 60 placebo-controlled trials (25 three-arm,
35 two-arm, 145 arms), fluoxetine-equivalent doses between 10 and 80 mg/day,
five drug clusters, and responses drawn from the clustered binomial model
with the published coefficient estimates as the truth.

Run from the repository root:

    python3 demos/make_synthetic_antidepressant.py
"""

import json
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from drma.splines import Transform, basis

OUT = Path(__file__).resolve().parents[1] / "src" / "drma" / "resources"
SEED = 1  # fixed before the dataset was first generated

TRUTH = {
    "B1": 0.0209,
    "B2": -0.0376,
    "tau_within": 0.0076,
    "tau_between": 0.0050,
    "rho": 0.0,
    "placebo_response": 0.376,
    "sigma0": 0.3,
    "knots": [10.0, 20.0, 50.0],
}
DOSES = np.array([10, 20, 30, 40, 50, 60, 80], dtype=float)
DOSE_WEIGHTS = np.array([0.12, 0.24, 0.16, 0.20, 0.10, 0.12, 0.06])
CLUSTERS = ["drug1", "drug2", "drug3", "drug4", "drug5"]


def main():
    rng = np.random.default_rng(SEED)
    tr = Transform("rcs3", tuple(TRUTH["knots"]))
    B = np.array([TRUTH["B1"], TRUTH["B2"]])
    Bc = B + TRUTH["tau_between"] * rng.standard_normal((len(CLUSTERS), 2))
    n_arms = np.array([3] * 25 + [2] * 35)
    rng.shuffle(n_arms)
    rows = []
    for i, k in enumerate(n_arms):
        c = i % len(CLUSTERS)
        beta = Bc[c] + TRUTH["tau_within"] * rng.standard_normal(2)
        u = rng.normal(logit(TRUTH["placebo_response"]), TRUTH["sigma0"])
        doses = np.sort(rng.choice(DOSES, size=k - 1, replace=False, p=DOSE_WEIGHTS))
        x = np.concatenate([[0.0], doses])
        eta = u + (basis(x, tr) - basis(0.0, tr)) @ beta
        n = rng.integers(80, 131, size=k)
        r = rng.binomial(n, expit(eta))
        for xj, rj, nj in zip(x, r, n):
            rows.append(f"t{i + 1:02d},{CLUSTERS[c]},{xj:g},{rj},{nj}")
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "antidepressant_synthetic.csv").write_text("study_id,cluster,dose,events,size\n" + "\n".join(rows) + "\n")
    truth = dict(TRUTH, seed=SEED, cluster_means={c: Bc[j].tolist() for j, c in enumerate(CLUSTERS)},
                 tau=float(np.hypot(TRUTH["tau_within"], TRUTH["tau_between"])))
    (OUT / "antidepressant_synthetic.json").write_text(json.dumps(truth, indent=2) + "\n")
    print(f"wrote {len(rows)} arms in {len(n_arms)} trials to {OUT}")


if __name__ == "__main__":
    main()
