"""Simulation harness: scenario data generation, model fitting and metrics."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy.special import expit, logit

from .data import Arm, Dataset, StudyRecord
from .diagnostics import DiagnosticError, gelman_rubin
from .model import ModelSpec
from .onestage import confint_wald, fit_onestage
from .sampler import SamplerConfig, run
from .splines import Transform, basis, place_knots

log = logging.getLogger(__name__)

METHODS = ("binomial-bayes", "normal-bayes", "onestage")
PARAMETERS = ("B1", "B2", "tau")


class ScenarioError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str
    B1_true: float
    B2_true: float
    tau_true: float
    measure: str = "logOR"
    ns: int = 40
    doses_per_study: int = 3
    dose_range: tuple[float, float] = (1.0, 10.0)
    n_range: tuple[int, int] = (180, 220)
    p0_rule: str | None = None
    p0: float = 0.1
    replications: int = 100
    or_generation: str = "paper-multiplicative"

    def __post_init__(self):
        if self.measure not in ("logOR", "logRR"):
            raise ScenarioError(f"{self.name}: measure must be logOR or logRR")
        if self.p0_rule is None:
            object.__setattr__(self, "p0_rule", "fixed-0.1" if self.measure == "logOR" else "rr-bounded")
        if self.p0_rule not in ("fixed-0.1", "rr-bounded"):
            raise ScenarioError(f"{self.name}: unknown p0_rule {self.p0_rule!r}")
        if self.or_generation not in ("paper-multiplicative", "logit-additive"):
            raise ScenarioError(f"{self.name}: unknown or_generation {self.or_generation!r}")
        if self.tau_true < 0 or self.replications < 1 or self.ns < 1 or self.doses_per_study < 2:
            raise ScenarioError(f"{self.name}: invalid tau, replications, ns or doses_per_study")
        lo, hi = self.dose_range
        nlo, nhi = self.n_range
        if not (0 < lo < hi) or not (1 <= nlo <= nhi):
            raise ScenarioError(f"{self.name}: invalid dose or sample-size range")
        object.__setattr__(self, "dose_range", (float(lo), float(hi)))
        object.__setattr__(self, "n_range", (int(nlo), int(nhi)))

    @property
    def truth(self) -> dict[str, float]:
        return {"B1": self.B1_true, "B2": self.B2_true, "tau": self.tau_true}

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dose_range"] = list(self.dose_range)
        d["n_range"] = list(self.n_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        for k in ("dose_range", "n_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# --------------------------------------------------------------------------
# scenario files


def _resource(name: str) -> str:
    return resources.files("drma").joinpath("resources").joinpath(name).read_text()


def scenario_schema() -> dict:
    return json.loads(_resource("scenarios.schema.json"))


def parse_scenarios(doc: dict, suite: str | None = None) -> list[Scenario]:
    """Validate a scenario document and return the scenarios of one suite.

    Without ``suite`` the document must contain exactly one suite, or a
    top-level ``scenarios`` list.
    """
    try:
        jsonschema.validate(doc, scenario_schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"invalid scenario file at {path}: {exc.message}") from None
    if "scenarios" in doc:
        entries = doc["scenarios"]
    else:
        suites = doc["suites"]
        if suite is None:
            if len(suites) != 1:
                raise ScenarioError(f"choose a suite from {sorted(suites)}")
            suite = next(iter(suites))
        if suite not in suites:
            raise ScenarioError(f"unknown suite {suite!r}; available: {sorted(suites)}")
        entries = suites[suite]
    return [Scenario.from_dict(e) for e in entries]


def load_scenarios(path=None, suite: str | None = None) -> list[Scenario]:
    """Read a scenario file; ``path=None`` loads the bundled suites."""
    text = _resource("scenarios.json") if path is None else Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from None
    return parse_scenarios(doc, suite)


def table2_suite(measure: str = "logOR", replications: int = 100, **overrides) -> list[Scenario]:
    suite = "table2" if measure == "logOR" else "table2-rr"
    return [dataclasses.replace(s, replications=replications, **overrides) for s in load_scenarios(None, suite)]


# --------------------------------------------------------------------------
# data generation


def _rng(seed: int, scenario: Scenario, *key: int) -> np.random.Generator:
    tag = zlib.crc32(scenario.name.encode())
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(tag,) + tuple(key)))


def _derived_seed(seed: int, scenario: Scenario, *key: int) -> int:
    tag = zlib.crc32(scenario.name.encode())
    ss = np.random.SeedSequence(int(seed), spawn_key=(tag,) + tuple(key))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _max_rr(scenario: Scenario, transform: Transform) -> float:
    """Largest risk ratio allowed by mean + 2 tau coefficients over the dose range."""
    grid = np.linspace(0.0, scenario.dose_range[1], 1001)
    coef = np.array([scenario.B1_true, scenario.B2_true]) + 2.0 * scenario.tau_true
    f = basis(grid, transform) - basis(0.0, transform)
    return float(np.exp((f @ coef).max()))


_MAX_REDRAWS = 1000


def generate_dataset(scenario: Scenario, replication_index: int, seed: int = 0):
    """Simulate one replication; returns ``(Dataset, truth)``.

    ``truth`` records the true coefficients, knots, study coefficients,
    arm probabilities, the baseline risk and the number of study redraws.
    """
    rng = _rng(seed, scenario, replication_index)
    ns, k = scenario.ns, scenario.doses_per_study
    lo, hi = scenario.dose_range
    doses = np.column_stack([np.zeros(ns), np.sort(rng.uniform(lo, hi, (ns, k - 1)), axis=1)])
    transform = Transform("rcs3", place_knots(doses.ravel()))
    F = basis(doses, transform) - basis(np.zeros((ns, 1)), transform)
    B = np.array([scenario.B1_true, scenario.B2_true])

    if scenario.p0_rule == "fixed-0.1":
        p0 = scenario.p0
    else:
        p0 = 0.5 / _max_rr(scenario, transform)
        if not 0.05 < p0 < 0.95:
            raise GenerationError(f"{scenario.name}: baseline risk {p0:.3g} outside (0.05, 0.95)")

    beta = np.empty((ns, 2))
    probs = np.empty((ns, k))
    redraws = 0
    for i in range(ns):
        for _ in range(_MAX_REDRAWS):
            b = B + scenario.tau_true * rng.standard_normal(2)
            d = F[i] @ b
            if scenario.measure == "logRR":
                p = p0 * np.exp(d)
                ok = np.all(p[1:] < 0.97)
            elif scenario.or_generation == "paper-multiplicative":
                p = p0 * np.exp(d)
                ok = np.all((p > 0) & (p < 1))
            else:
                p = expit(logit(p0) + d)
                ok = True
            if ok:
                break
            redraws += 1
        else:
            raise GenerationError(f"{scenario.name}: study {i} needed more than {_MAX_REDRAWS} redraws")
        beta[i], probs[i] = b, p
    if redraws:
        log.info("%s rep %d: %d study redraws", scenario.name, replication_index, redraws)

    n = rng.integers(scenario.n_range[0], scenario.n_range[1] + 1, size=(ns, k))
    r = rng.binomial(n, probs)
    width = len(str(ns))
    studies = tuple(
        StudyRecord(f"s{i + 1:0{width}d}", tuple(Arm(float(doses[i, j]), int(r[i, j]), int(n[i, j])) for j in range(k)))
        for i in range(ns)
    )
    truth = {
        "B1": scenario.B1_true, "B2": scenario.B2_true, "tau": scenario.tau_true,
        "knots": list(transform.knots), "beta": beta, "probabilities": probs, "p0": p0,
        "redraws": redraws,
    }
    return Dataset(studies, measure=scenario.measure), truth


# --------------------------------------------------------------------------
# fitting


def _fit_bayes(method, dataset, transform, config: SamplerConfig):
    link = "logit" if dataset.measure == "logOR" else "log"
    likelihood = "binomial" if method == "binomial-bayes" else "normal"
    spec = ModelSpec(transform, likelihood=likelihood, link=link, correlated=False)
    draws = run(spec, dataset, config)
    out = {}
    rhats = []
    for name in PARAMETERS:
        x = draws[name]
        v = x.reshape(-1)
        q = np.quantile(v, [0.025, 0.975])
        out[name] = {"est": float(v.mean()), "se": float(v.std(ddof=1)), "lo": float(q[0]), "hi": float(q[1])}
        if x.shape[0] >= 2:
            try:
                rhats.append(gelman_rubin(x))
            except DiagnosticError:
                pass
    return out, (max(rhats) if rhats else None)


def _fit_onestage(dataset, transform):
    fit = fit_onestage(dataset.effect_tables(), transform)
    ci = confint_wald(fit, 0.95, allow_unconverged=True)
    out = {f"B{k + 1}": {"est": float(fit.B_hat[k]), "se": float(fit.se[k]), "lo": float(ci[k, 0]),
                         "hi": float(ci[k, 1])} for k in range(transform.p)}
    return out, fit.converged


def run_replication(scenario: Scenario, rep: int, methods, config: SamplerConfig, seed: int,
                    rhat_threshold: float = 1.05) -> dict:
    """Generate one dataset and fit every requested method."""
    dataset, truth = generate_dataset(scenario, rep, seed)
    transform = Transform("rcs3", tuple(truth["knots"]))
    record = {"scenario": scenario.name, "rep": rep, "redraws": truth["redraws"], "fits": {}}
    for mi, method in enumerate(METHODS):
        if method not in methods:
            continue
        try:
            if method == "onestage":
                est, ok = _fit_onestage(dataset, transform)
                conv = {"converged": bool(ok), "rhat": None}
            else:
                cfg = dataclasses.replace(config, seed=_derived_seed(seed, scenario, rep, mi))
                est, rhat = _fit_bayes(method, dataset, transform, cfg)
                conv = {"converged": rhat is None or rhat < rhat_threshold, "rhat": rhat}
            record["fits"][method] = {"estimates": est, **conv, "error": None}
        except Exception as exc:  # recorded and excluded from aggregates
            log.warning("%s rep %d %s failed: %s", scenario.name, rep, method, exc)
            record["fits"][method] = {"estimates": {}, "converged": False, "rhat": None,
                                      "error": f"{type(exc).__name__}: {exc}"}
    return record


# --------------------------------------------------------------------------
# metrics


@dataclass
class Metric:
    n: int
    bias: float
    bias_mcse: float
    mse: float
    mse_mcse: float
    coverage: float
    coverage_mcse: float
    power: float
    power_mcse: float
    se2mean: float
    se2mean_mcse: float


def compute_metrics(estimates, truth: float, lower=None, upper=None, se=None) -> Metric:
    """Simulation aggregates for one parameter.

    ``bias = truth - mean``; ``MSE = bias**2 + var(ddof=1)``. Monte Carlo
    standard errors: ``sd / sqrt(n)`` for bias, the empirical-squared-error
    formula for MSE and the binomial formula for coverage and power.
    """
    est = np.asarray(estimates, dtype=float)
    n = est.size
    if n < 2:
        raise ValueError("need at least 2 replications")
    mean = est.mean()
    var = est.var(ddof=1)
    bias = truth - mean
    mse = bias * bias + var
    sq = (est - truth) ** 2
    mse_mcse = math.sqrt(((sq - sq.mean()) ** 2).sum() / (n * (n - 1)))

    def prop(flags):
        f = np.asarray(flags, dtype=float)
        p = float(f.mean())
        return p, math.sqrt(p * (1.0 - p) / n)

    nan = float("nan")
    cov = powr = (nan, nan)
    if lower is not None and upper is not None:
        lo, hi = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
        cov = prop((lo <= truth) & (truth <= hi))
        powr = prop((lo > 0) | (hi < 0))
    se2 = (nan, nan)
    if se is not None:
        s = np.asarray(se, dtype=float)
        se2 = (float(s.mean()), float(s.std(ddof=1) / math.sqrt(n)))
    return Metric(n, float(bias), float(math.sqrt(var / n)), float(mse), mse_mcse,
                  cov[0], cov[1], powr[0], powr[1], se2[0], se2[1])


@dataclass
class MetricsReport:
    """Metrics keyed by scenario, method and parameter."""

    metrics: dict = field(default_factory=dict)
    convergence: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def get(self, scenario: str, method: str, parameter: str) -> Metric:
        return self.metrics[scenario][method][parameter]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "metrics": {s: {m: {p: dataclasses.asdict(v) for p, v in ps.items()} for m, ps in ms.items()}
                        for s, ms in self.metrics.items()},
            "convergence_rate": self.convergence,
            "failures": self.failures,
        }

    def rows(self) -> list[dict]:
        out = []
        for s, ms in self.metrics.items():
            for m, ps in ms.items():
                for p, v in ps.items():
                    out.append({"scenario": s, "method": m, "parameter": p, **dataclasses.asdict(v),
                                "convergence_rate": self.convergence[s][m], "failures": self.failures[s][m]})
        return out

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_csv(self, path) -> None:
        rows = self.rows()
        fields = ["scenario", "method", "parameter"] + [f.name for f in dataclasses.fields(Metric)] + [
            "convergence_rate", "failures"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)


def aggregate(records, scenarios) -> MetricsReport:
    report = MetricsReport()
    by_name = {s.name: s for s in scenarios}
    grouped: dict[str, list] = {}
    for rec in sorted(records, key=lambda r: (r["scenario"], r["rep"])):
        grouped.setdefault(rec["scenario"], []).append(rec)
    for name in [s.name for s in scenarios if s.name in grouped]:
        recs, sc = grouped[name], by_name[name]
        methods = [m for m in METHODS if any(m in r["fits"] for r in recs)]
        report.metrics[name], report.convergence[name], report.failures[name] = {}, {}, {}
        for m in methods:
            fits = [r["fits"][m] for r in recs if m in r["fits"]]
            ok = [f for f in fits if f["error"] is None]
            report.failures[name][m] = len(fits) - len(ok)
            report.convergence[name][m] = (sum(f["converged"] for f in ok) / len(ok)) if ok else float("nan")
            report.metrics[name][m] = {}
            for p in PARAMETERS:
                vals = [f["estimates"][p] for f in ok if p in f["estimates"]]
                if len(vals) < 2:
                    continue
                report.metrics[name][m][p] = compute_metrics(
                    [v["est"] for v in vals], sc.truth[p],
                    [v["lo"] for v in vals], [v["hi"] for v in vals], [v["se"] for v in vals])
    return report


# --------------------------------------------------------------------------
# driver


def read_checkpoint(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            # a torn final line from an interrupted run; the replication is redone
            log.warning("ignoring unreadable checkpoint line")
    return out


def _work(args):
    return run_replication(*args)


def run_study(scenarios, methods=METHODS, replications: int | None = None, config: SamplerConfig | None = None,
              workers: int = 1, seed: int = 0, checkpoint=None, resume: bool = False,
              rhat_threshold: float = 1.05) -> tuple[MetricsReport, list[dict]]:
    """Run every replication of every scenario and aggregate the metrics.

    Completed replications are appended to ``checkpoint`` (JSON lines) by
    this process only. With ``resume`` the replications already present in
    the checkpoint are skipped. Returns the report and the per-replication
    records in scenario/replication order.
    """
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    methods = [m for m in METHODS if m in set(methods)]
    if not methods:
        raise ValueError("no methods selected")
    config = config or SamplerConfig(chains=3, iterations=20_000, burn_in=2_000)
    scenarios = list(scenarios)
    records = read_checkpoint(checkpoint) if (checkpoint and resume) else []
    if checkpoint and not resume:
        Path(checkpoint).write_text("")
    done = {(r["scenario"], r["rep"]) for r in records}
    todo = []
    for sc in scenarios:
        reps = replications if replications is not None else sc.replications
        todo += [(sc, rep, tuple(methods), config, seed, rhat_threshold)
                 for rep in range(reps) if (sc.name, rep) not in done]

    def store(rec):
        records.append(rec)
        if checkpoint:
            with open(checkpoint, "a") as fh:
                fh.write(json.dumps(rec) + "\n")

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(workers) as pool:
            for rec in pool.map(_work, todo):
                store(rec)
    else:
        for args in todo:
            store(_work(args))

    wanted = {(sc.name, rep) for sc in scenarios
              for rep in range(replications if replications is not None else sc.replications)}
    records = [r for r in records if (r["scenario"], r["rep"]) in wanted]
    order = {sc.name: i for i, sc in enumerate(scenarios)}
    records.sort(key=lambda r: (order[r["scenario"]], r["rep"]))
    report = aggregate(records, scenarios)
    report.config = {"methods": methods, "seed": seed, "sampler": config.to_dict(),
                     "scenarios": [s.to_dict() for s in scenarios], "replications": replications}
    return report, records
