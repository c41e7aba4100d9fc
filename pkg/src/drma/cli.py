"""Command-line interface: ``drma fit | curve | simulate | diagnose | validate``.

Every command writes into its own output directory together with a
``manifest.json`` describing how the outputs were produced.

Exit codes: 0 success, 2 usage error, 3 input or validation error,
4 configuration error, 5 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd

from . import __version__
from .data import DataError, Dataset, load_dataset, validate_dataset
from .diagnostics import diagnose, export_trace_histogram
from .model import ModelError, ModelSpec, PriorSpec, absolute_response, rejected_draws, summarize_curve
from .onestage import RankError, confint_wald, fit_onestage
from .sampler import (
    DrawsFormatError,
    SamplerConfig,
    read_draws_csv,
    run,
    summarize,
    summary_document,
    write_draws_csv,
    write_json,
)
from .simulation import METHODS, ScenarioError, load_scenarios, run_study
from .splines import KnotError, Transform, contrast, place_knots

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_CONFIG = 4
EXIT_RUNTIME = 5

log = logging.getLogger("drma")


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


# --------------------------------------------------------------------------
# helpers


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class _Run:
    """Output directory plus the manifest written when the command finishes."""

    def __init__(self, out: Path, command: str, argv):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "command": command,
            "argv": list(argv),
            "version": __version__,
            "started": _now(),
            "inputs": {},
            "config": {},
            "seed": None,
            "outputs": [],
        }

    def add_input(self, path):
        p = Path(path)
        files = sorted(f for f in p.iterdir() if f.is_file()) if p.is_dir() else [p]
        for f in files:
            self.manifest["inputs"][str(f)] = _sha256(f)

    def path(self, name: str) -> Path:
        self.manifest["outputs"].append(name)
        return self.out / name

    def finish(self):
        self.manifest["finished"] = _now()
        write_json(self.manifest, self.out / "manifest.json")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    from importlib import resources

    schema = json.loads(resources.files("drma").joinpath("resources").joinpath("model_config.schema.json").read_text())
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: invalid configuration at {where}: {exc.message}") from None
    return doc


def _pick(flag, config: dict, key: str, default):
    if flag is not None:
        return flag
    return config.get(key, default)


def _load_data(args) -> Dataset:
    path = Path(args.data)
    if not path.exists():
        raise InputError(f"data file {path} not found")
    return load_dataset(path, format=args.format, measure=args.measure)


# --------------------------------------------------------------------------
# fit


def _resolve_transform(args, mcfg: dict, dataset: Dataset) -> Transform:
    tcfg = mcfg.get("transform", {})
    kind = _pick(args.transform, tcfg, "kind", "rcs3")
    if kind != "rcs3":
        if args.knots:
            raise ConfigError(f"--knots only applies to the rcs3 transform, not {kind}")
        return Transform(kind)
    knots = args.knots or tcfg.get("knots")
    if knots:
        return Transform("rcs3", tuple(knots))
    percentiles = args.knot_percentiles or tcfg.get("knot_percentiles") or (25.0, 50.0, 75.0)
    return Transform("rcs3", place_knots(dataset.all_doses(), percentiles))


def _resolve_spec(args, mcfg: dict, dataset: Dataset, transform: Transform) -> ModelSpec:
    default_link = {"logOR": "logit", "logRR": "log", "generic": "identity"}[dataset.measure]
    likelihood = "binomial" if args.method == "binomial-bayes" else "normal"
    clustered = bool(args.clustered or mcfg.get("clustered", False))
    if clustered and any(c is None for c in dataset.cluster_labels):
        raise ConfigError("clustering requested but the data have no cluster labels for every study")
    if likelihood == "binomial" and not dataset.has_counts:
        raise ConfigError("binomial-bayes needs arm-level counts; use normal-bayes or onestage")
    priors = PriorSpec(**{k: (tuple(v) if k == "rho_bounds" else v) for k, v in mcfg.get("priors", {}).items()})
    return ModelSpec(
        transform=transform,
        likelihood=likelihood,
        link=_pick(args.link, mcfg, "link", default_link),
        coefficients=_pick(args.coefficients, mcfg, "coefficients", "random"),
        clustered=clustered,
        include_zero_dose_block=bool(args.zero_dose or mcfg.get("include_zero_dose_block", False)),
        correlated=not args.uncorrelated and mcfg.get("correlated", True),
        priors=priors,
    )


def _resolve_sampler(args, scfg: dict) -> SamplerConfig:
    seed = args.seed if args.seed is not None else scfg.get("seed", 0)
    try:
        return SamplerConfig(
            chains=_pick(args.chains, scfg, "chains", 3),
            iterations=_pick(args.iterations, scfg, "iterations", 100_000),
            burn_in=_pick(args.burn_in, scfg, "burn_in", 10_000),
            thin=_pick(args.thin, scfg, "thin", 1),
            seed=seed,
            adapt_window=_pick(args.adapt_window, scfg, "adapt_window", None),
            init=_pick(args.init, scfg, "init", "jittered-zero"),
            monitor_study=bool(scfg.get("monitor_study", False)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _drop_underidentified(dataset: Dataset, p: int) -> Dataset:
    if dataset.has_counts:
        keep = tuple(s for s in dataset.studies if len(s.arms) >= p + 1)
        return Dataset(keep, measure=dataset.measure)
    keep = tuple(t for t in dataset.tables if t.size >= p)
    return Dataset(measure=dataset.measure, tables=keep)


def cmd_fit(args, argv) -> int:
    dataset = _load_data(args)
    config = _load_config(args.config)
    mcfg = config.get("model", {})
    transform = _resolve_transform(args, mcfg, dataset)
    correction = float(mcfg.get("correction", args.correction))
    if args.drop_underidentified:
        before = dataset.ns
        dataset = _drop_underidentified(dataset, transform.p)
        log.info("dropped %d under-identified studies", before - dataset.ns)
    out = _Run(args.out or f"drma-fit-{args.method}", "fit", argv)
    out.add_input(args.data)
    if args.config:
        out.add_input(args.config)
    base = {"method": args.method, "measure": dataset.measure, "n_studies": dataset.ns,
            "transform": transform.to_dict()}

    if args.method == "onestage":
        if args.clustered:
            raise ConfigError("the one-stage model has no cluster level")
        fit = fit_onestage(dataset.effect_tables(correction), transform)
        ci = confint_wald(fit, 0.95, allow_unconverged=True)
        params = {}
        for k in range(transform.p):
            params[f"B{k + 1}"] = {"mean": float(fit.B_hat[k]), "se": float(fit.se[k]),
                                   "lower": float(ci[k, 0]), "upper": float(ci[k, 1])}
        for k in range(transform.p):
            params[f"tau{k + 1}"] = {"mean": float(fit.tau_hat[k])}
        if transform.p == 2:
            params["rho"] = {"mean": float(fit.rho_hat)}
        doc = summary_document("onestage", params, {**base, "converged": fit.converged, "boundary": fit.boundary,
                                                    "loglik": fit.loglik, "iterations": fit.iterations})
        write_json(doc, out.path("summary.json"))
        write_json({"method": "onestage", **base, "correction": correction}, out.path("model.json"))
        out.manifest["config"] = {"method": "onestage", "transform": transform.to_dict(), "correction": correction}
        out.finish()
        _report(doc)
        return EXIT_OK

    spec = _resolve_spec(args, mcfg, dataset, transform)
    cfg = _resolve_sampler(args, config.get("sampler", {}))
    out.manifest["seed"] = cfg.seed
    out.manifest["config"] = {"model": spec.to_dict(), "sampler": cfg.to_dict(), "correction": correction,
                              "threads": args.threads}
    draws = run(spec, dataset, cfg, workers=args.threads, correction=correction)
    report = diagnose(draws, rhat_threshold=args.rhat_threshold)
    params = summarize(draws)
    doc = summary_document(args.method, params, {**base, "converged": report.converged,
                                                  "acceptance": draws.acceptance})
    write_json(doc, out.path("summary.json"))
    write_draws_csv(draws, out.path("draws.csv"))
    write_json(report.to_dict(), out.path("diagnostics.json"))
    write_json({"method": args.method, **base, "spec": spec.to_dict(), "sampler": cfg.to_dict(),
                "correction": correction, "proposal_scales": draws.proposal_scales},
               out.path("model.json"))
    out.finish()
    _report(doc)
    return EXIT_OK


def _report(doc: dict):
    for name, v in doc["parameters"].items():
        spread = v.get("sd", v.get("se"))
        extra = "" if spread is None else f"  ({'sd' if 'sd' in v else 'se'} {spread:.4g})"
        print(f"{name:>14s}  {v['mean']: .5g}{extra}")


# --------------------------------------------------------------------------
# curve


def _parse_grid(text: str) -> np.ndarray:
    try:
        start, stop, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise ConfigError(f"--grid expects START:STOP:STEP, got {text!r}") from None
    if step <= 0 or stop < start:
        raise ConfigError("--grid needs STOP >= START and a positive STEP")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(n)


def cmd_curve(args, argv) -> int:
    run_dir = Path(args.run_dir)
    model_path, draws_path = run_dir / "model.json", run_dir / "draws.csv"
    if not model_path.exists() or not draws_path.exists():
        raise InputError(f"{run_dir} is not a completed Bayesian fit directory (model.json and draws.csv needed)")
    meta = json.loads(model_path.read_text())
    if "spec" not in meta:
        raise ConfigError("curves need a Bayesian fit; one-stage runs have no posterior draws")
    spec = ModelSpec.from_dict(meta["spec"])
    doses = np.asarray(args.doses, dtype=float) if args.doses else _parse_grid(args.grid)
    if args.absolute and not spec.include_zero_dose_block:
        raise ConfigError("absolute curve requested but the fit has no zero-dose block")
    draws = read_draws_csv(draws_path)
    names = [f"B{k + 1}" for k in range(spec.p)]
    missing = [n for n in names if n not in draws.names]
    if missing:
        raise InputError(f"draws file lacks {missing}")
    B = np.column_stack([draws.pooled(n) for n in names])
    rel = B @ contrast(doses, 0.0, spec.transform).T
    s = summarize_curve(rel)
    table = pd.DataFrame({"dose": doses, "relative_mean": s["mean"], "relative_lower": s["lower"],
                          "relative_upper": s["upper"]})
    out = _Run(args.out or run_dir / "curve", "curve", argv)
    out.add_input(model_path)
    out.add_input(draws_path)
    out.manifest["config"] = {"doses": doses.tolist(), "absolute": spec.include_zero_dose_block}
    if spec.include_zero_dose_block:
        R0 = draws.pooled("R0")
        absr = absolute_response(B, R0, doses, spec.transform, spec.link)
        a = summarize_curve(absr)
        table["absolute_mean"], table["absolute_lower"], table["absolute_upper"] = a["mean"], a["lower"], a["upper"]
        table["rejected_draws"] = rejected_draws(absr)
        base = summarize_curve(absolute_response(B, R0, [0.0], spec.transform, spec.link))
        pd.DataFrame({"dose": [0.0], "mean": base["mean"], "lower": base["lower"], "upper": base["upper"]}).to_csv(
            out.path("baseline.csv"), index=False)
        print(f"baseline response {base['mean'][0]:.4f} ({base['lower'][0]:.4f}, {base['upper'][0]:.4f})")
    table.to_csv(out.path("curve.csv"), index=False)
    out.finish()
    print(f"wrote {len(table)} rows to {out.out / 'curve.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# diagnose


def cmd_diagnose(args, argv) -> int:
    src = Path(args.draws)
    path = src / "draws.csv" if src.is_dir() else src
    if not path.exists():
        raise InputError(f"draws file {path} not found")
    draws = read_draws_csv(path)
    params = args.parameters or draws.names
    unknown = [p for p in params if p not in draws.names]
    if unknown:
        raise InputError(f"draws file has no columns for {unknown}")
    report = diagnose(draws, args.rhat_threshold, args.geweke_threshold, params)
    default_out = src / "diagnostics" if src.is_dir() else Path("drma-diagnose")
    out = _Run(args.out or default_out, "diagnose", argv)
    out.add_input(path)
    out.manifest["config"] = {"rhat_threshold": args.rhat_threshold, "geweke_threshold": args.geweke_threshold,
                              "parameters": params, "bins": args.bins}
    write_json(report.to_dict(), out.path("diagnostics.json"))
    for p in params:
        trace, hist = export_trace_histogram(draws, p, args.bins)
        safe = p.replace("[", "_").replace("]", "")
        trace.to_csv(out.path(f"trace_{safe}.csv"), index=False)
        hist.to_csv(out.path(f"hist_{safe}.csv"), index=False)
    out.finish()
    for p, d in report.parameters.items():
        rhat = "n/a" if d.gelman_rubin is None else f"{d.gelman_rubin:.4f}"
        print(f"{p:>14s}  sqrt(Rhat) {rhat}  ESS {d.ess:8.0f}  {'ok' if d.rhat_pass else 'FAIL'}")
    print("converged" if report.converged else "not converged")
    return EXIT_OK


# --------------------------------------------------------------------------
# validate


def cmd_validate(args, argv) -> int:
    dataset = _load_data(args)
    report = validate_dataset(dataset, p=args.p)
    out = _Run(args.out or "drma-validate", "validate", argv)
    out.add_input(args.data)
    out.manifest["config"] = {"p": args.p, "format": args.format, "measure": dataset.measure}
    write_json(report.to_dict(), out.path("validation.json"))
    out.finish()
    short = [s.study_id for s in report.studies if not s.identifiable_alone]
    print(f"{report.n_studies} studies, {report.n_arms} arms, measure {dataset.measure}")
    if short:
        print(f"{len(short)} studies are shrinkage-only for the one-stage model: {', '.join(short)}")
    unusable = [s.study_id for s in report.studies if not s.bayes_usable]
    if unusable:
        print(f"{len(unusable)} studies have a single arm and carry no dose-response information")
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate


def cmd_simulate(args, argv) -> int:
    scenarios = load_scenarios(args.scenarios, args.suite if (args.suite or args.scenarios) else "table2")
    if args.only:
        scenarios = [s for s in scenarios if s.name in set(args.only)]
        if not scenarios:
            raise ConfigError(f"no scenario named {args.only}")
    if args.or_generation:
        scenarios = [dataclasses.replace(s, or_generation=args.or_generation) for s in scenarios]
    methods = args.methods or list(METHODS)
    bad = set(methods) - set(METHODS)
    if bad:
        raise ConfigError(f"unknown methods {sorted(bad)}; choose from {METHODS}")
    try:
        cfg = SamplerConfig(chains=args.chains, iterations=args.iterations, burn_in=args.burn_in, seed=0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    seed = args.seed if args.seed is not None else 0
    out = _Run(args.out or "drma-simulate", "simulate", argv)
    if args.scenarios:
        out.add_input(args.scenarios)
    out.manifest["seed"] = seed
    out.manifest["config"] = {"scenarios": [s.to_dict() for s in scenarios], "methods": methods,
                              "replications": args.reps, "sampler": cfg.to_dict(), "threads": args.threads}
    checkpoint = out.path("replications.jsonl")
    report, _ = run_study(scenarios, methods, args.reps, cfg, workers=args.threads, seed=seed,
                          checkpoint=checkpoint, resume=args.resume)
    report.write_json(out.path("metrics.json"))
    report.write_csv(out.path("metrics.csv"))
    out.finish()
    for row in report.rows():
        print(f"{row['scenario']:>6s} {row['method']:>15s} {row['parameter']:>4s}  bias {row['bias']: .4f}"
              f"  MSE {row['mse']:.5f}  cover {row['coverage']:.3f}  power {row['power']:.3f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker processes for chains or replications (results do not depend on it)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="only print errors")

    parser = argparse.ArgumentParser(prog="drma", description="Dose-response meta-analysis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out", default=None)
    parser.add_argument("--quiet", action="store_true", help="only print errors")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("data", help="CSV file (arm-level or contrast-level)")
        p.add_argument("--format", choices=("arm", "contrast"), default="arm")
        p.add_argument("--measure", choices=("logOR", "logRR", "generic"), default=None)

    fit = sub.add_parser("fit", parents=[common], help="fit a dose-response model")
    data_args(fit)
    fit.add_argument("--method", choices=METHODS, default="binomial-bayes")
    fit.add_argument("--config", help="JSON model/sampler configuration")
    fit.add_argument("--transform", choices=("linear", "quadratic", "rcs3"), default=None)
    fit.add_argument("--knots", type=_floats, default=None, help="explicit knots, e.g. 10,20,50")
    fit.add_argument("--knot-percentiles", type=_floats, default=None, help="default 25,50,75")
    fit.add_argument("--link", choices=("logit", "log", "identity"), default=None)
    fit.add_argument("--coefficients", choices=("random", "common"), default=None)
    fit.add_argument("--clustered", action="store_true", help="within/between cluster heterogeneity")
    fit.add_argument("--zero-dose", action="store_true", help="add the zero-dose block for absolute responses")
    fit.add_argument("--uncorrelated", action="store_true", help="fix rho = 0")
    fit.add_argument("--drop-underidentified", action="store_true",
                     help="drop studies with fewer dose levels than needed to identify their own curve")
    fit.add_argument("--correction", type=float, default=0.5, help="continuity correction for zero cells")
    fit.add_argument("--chains", type=int, default=None)
    fit.add_argument("--iterations", type=int, default=None)
    fit.add_argument("--burn-in", type=int, default=None)
    fit.add_argument("--thin", type=int, default=None)
    fit.add_argument("--adapt-window", type=int, default=None)
    fit.add_argument("--init", choices=("jittered-zero", "prior-draw"), default=None)
    fit.add_argument("--rhat-threshold", type=float, default=1.05)

    curve = sub.add_parser("curve", parents=[common], help="relative and absolute curve tables from a fit")
    curve.add_argument("run_dir")
    curve.add_argument("--grid", default="1:80:1", help="START:STOP:STEP, inclusive")
    curve.add_argument("--doses", type=_floats, default=None, help="explicit comma-separated doses")
    curve.add_argument("--absolute", action="store_true", help="require the absolute-response curve")

    sim = sub.add_parser("simulate", parents=[common], help="run a simulation study")
    sim.add_argument("--suite", default=None, help="suite name (built in: table2, table2-rr)")
    sim.add_argument("--scenarios", default=None, help="scenario JSON file")
    sim.add_argument("--only", nargs="+", default=None, help="restrict to these scenario names")
    sim.add_argument("--reps", type=int, default=None, help="replications per scenario")
    sim.add_argument("--methods", type=lambda s: [m.strip() for m in s.split(",") if m.strip()], default=None)
    sim.add_argument("--or-generation", choices=("paper-multiplicative", "logit-additive"), default=None)
    sim.add_argument("--chains", type=int, default=3)
    sim.add_argument("--iterations", type=int, default=20_000)
    sim.add_argument("--burn-in", type=int, default=2_000)
    sim.add_argument("--resume", action="store_true", help="continue from replications.jsonl in --out")

    diag = sub.add_parser("diagnose", parents=[common], help="convergence diagnostics for a draws file")
    diag.add_argument("draws", help="draws CSV or a fit directory")
    diag.add_argument("--rhat-threshold", type=float, default=1.05)
    diag.add_argument("--geweke-threshold", type=float, default=3.0)
    diag.add_argument("--parameters", nargs="+", default=None)
    diag.add_argument("--bins", type=int, default=30)

    val = sub.add_parser("validate", parents=[common], help="check a dataset")
    data_args(val)
    val.add_argument("--p", type=int, default=2, choices=(1, 2), help="number of dose transforms")
    return parser


COMMANDS = {"fit": cmd_fit, "curve": cmd_curve, "simulate": cmd_simulate, "diagnose": cmd_diagnose,
            "validate": cmd_validate}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.quiet:
            with open(os.devnull, "w") as sink, contextlib.redirect_stdout(sink):
                return COMMANDS[args.command](args, argv)
        return COMMANDS[args.command](args, argv)
    except (DataError, DrawsFormatError, InputError, FileNotFoundError, RankError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, ModelError, KnotError, ScenarioError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("unexpected failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
