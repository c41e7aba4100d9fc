"""Aggregated dose-response data: arms, studies, effect tables and CSV I/O.

Two input layouts are supported. Arm-level files carry event counts per dose
and are the input of the binomial model; contrast-level files carry log
relative effects with standard errors (adjusted estimates such as logHR) and
feed the normal model and the one-stage baseline directly.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MEASURES = ("logOR", "logRR", "generic")

ARM_COLUMNS = ("study_id", "cluster", "dose", "events", "size")
CONTRAST_COLUMNS = ("study_id", "cluster", "dose", "ref_dose", "log_effect", "se", "ref_var")


class DataError(ValueError):
    """Base class for problems with input data."""


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


class DegenerateCellError(DataError):
    pass


class InsufficientArmsError(DataError):
    pass


@dataclass(frozen=True)
class Arm:
    dose: float
    events: int
    size: int

    def __post_init__(self):
        if self.dose < 0 or not math.isfinite(self.dose):
            raise ValidationError(f"dose must be a finite non-negative number, got {self.dose}")
        if self.size <= 0:
            raise ValidationError(f"size must be positive, got {self.size}")
        if self.events < 0 or self.events > self.size:
            raise ValidationError(f"events={self.events} outside [0, size={self.size}]")

    @property
    def non_events(self) -> int:
        return self.size - self.events


@dataclass(frozen=True)
class StudyRecord:
    """One study. ``arms[0]`` is the reference (minimum) dose."""

    study_id: str
    arms: tuple[Arm, ...]
    cluster: str | None = None

    def __post_init__(self):
        arms = tuple(sorted(self.arms, key=lambda a: a.dose))
        doses = [a.dose for a in arms]
        if len(set(doses)) != len(doses):
            raise ValidationError(f"study {self.study_id!r}: duplicated dose levels {doses}")
        object.__setattr__(self, "arms", arms)

    @property
    def doses(self) -> np.ndarray:
        return np.array([a.dose for a in self.arms])

    @property
    def reference(self) -> Arm:
        return self.arms[0]

    def has_zero_cell(self) -> bool:
        return any(a.events == 0 or a.non_events == 0 for a in self.arms)


@dataclass(frozen=True)
class EffectTable:
    """Relative effects of each non-reference dose against the reference dose.

    ``effects`` are on the natural-log scale and ``covariance`` is their
    within-study covariance matrix.
    """

    study_id: str
    effects: np.ndarray
    covariance: np.ndarray
    doses: np.ndarray
    reference_dose: float
    cluster: str | None = None

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.effects, dtype=float))
        s = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        x = np.atleast_1d(np.asarray(self.doses, dtype=float))
        if s.shape != (y.size, y.size) or x.size != y.size:
            raise ValidationError(f"study {self.study_id!r}: inconsistent effect table dimensions")
        if not np.allclose(s, s.T, rtol=1e-12, atol=0.0):
            raise ValidationError(f"study {self.study_id!r}: covariance is not symmetric")
        if np.any(np.diag(s) <= 0):
            raise ValidationError(f"study {self.study_id!r}: covariance diagonal must be positive")
        try:
            np.linalg.cholesky(s)
        except np.linalg.LinAlgError:
            raise ValidationError(f"study {self.study_id!r}: covariance is not positive definite") from None
        object.__setattr__(self, "effects", y)
        object.__setattr__(self, "covariance", s)
        object.__setattr__(self, "doses", x)

    @property
    def size(self) -> int:
        return self.effects.size


@dataclass(frozen=True)
class Dataset:
    """A collection of studies sharing one effect measure.

    Arm-level datasets fill ``studies``; contrast-level datasets fill
    ``tables`` only, in which case the binomial model is unavailable.
    """

    studies: tuple[StudyRecord, ...] = ()
    measure: str = "logOR"
    tables: tuple[EffectTable, ...] | None = None

    def __post_init__(self):
        if self.measure not in MEASURES:
            raise ValidationError(f"unknown measure {self.measure!r}; expected one of {MEASURES}")
        object.__setattr__(self, "studies", tuple(self.studies))
        if self.tables is not None:
            object.__setattr__(self, "tables", tuple(self.tables))
        ids = self.study_ids
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicated study ids: {dup}")

    @property
    def has_counts(self) -> bool:
        return self.tables is None

    @property
    def study_ids(self) -> list[str]:
        if self.has_counts:
            return [s.study_id for s in self.studies]
        return [t.study_id for t in self.tables]

    @property
    def ns(self) -> int:
        return len(self.study_ids)

    @property
    def cluster_labels(self) -> list[str | None]:
        if self.has_counts:
            return [s.cluster for s in self.studies]
        return [t.cluster for t in self.tables]

    @property
    def clusters(self) -> list[str]:
        """Distinct cluster labels in order of first appearance."""
        seen: dict[str, None] = {}
        for c in self.cluster_labels:
            if c is not None:
                seen.setdefault(c, None)
        return list(seen)

    def all_doses(self) -> np.ndarray:
        if self.has_counts:
            return np.concatenate([s.doses for s in self.studies]) if self.studies else np.empty(0)
        parts = [np.append(t.reference_dose, t.doses) for t in self.tables]
        return np.concatenate(parts) if parts else np.empty(0)

    def effect_tables(self, correction: float = 0.5) -> list[EffectTable]:
        if not self.has_counts:
            return list(self.tables)
        if self.measure == "generic":
            raise ValidationError("arm-level data need measure logOR or logRR to derive effects")
        return [compute_effects(s, self.measure, correction) for s in self.studies]


def compute_effects(study: StudyRecord, measure: str = "logOR", correction: float = 0.5) -> EffectTable:
    """Log odds/risk ratios of every arm against the reference arm.

    The covariance follows from the multinomial delta method: all contrasts
    share the reference arm, so every off-diagonal entry equals the
    reference-arm variance term.

    If any cell of the study is zero, ``correction`` is added to every cell
    (events and non-events) of that study.
    """
    if len(study.arms) < 2:
        raise InsufficientArmsError(f"study {study.study_id!r} has a single arm; no contrast can be formed")
    if measure not in ("logOR", "logRR"):
        raise ValidationError(f"compute_effects needs logOR or logRR, got {measure!r}")
    if correction < 0:
        raise ValueError("correction must be non-negative")
    r = np.array([a.events for a in study.arms], dtype=float)
    t = np.array([a.non_events for a in study.arms], dtype=float)
    if np.any(r == 0) or np.any(t == 0):
        if correction == 0:
            raise DegenerateCellError(f"study {study.study_id!r} has a zero cell and no continuity correction")
        r = r + correction
        t = t + correction
    n = r + t
    if measure == "logOR":
        logit = np.log(r) - np.log(t)
        y = logit[1:] - logit[0]
        ref_term = 1.0 / r[0] + 1.0 / t[0]
        arm_terms = 1.0 / r[1:] + 1.0 / t[1:]
    else:
        logp = np.log(r) - np.log(n)
        y = logp[1:] - logp[0]
        ref_term = 1.0 / r[0] - 1.0 / n[0]
        arm_terms = 1.0 / r[1:] - 1.0 / n[1:]
    cov = np.full((y.size, y.size), ref_term)
    cov[np.diag_indices(y.size)] += arm_terms
    return EffectTable(
        study_id=study.study_id,
        effects=y,
        covariance=cov,
        doses=study.doses[1:],
        reference_dose=float(study.doses[0]),
        cluster=study.cluster,
    )


# --------------------------------------------------------------------------
# CSV input/output


def _read_rows(path: Path, expected: Sequence[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected header {','.join(expected)}") from None
        missing = [c for c in expected if c not in header and c != "ref_var"]
        if missing:
            raise ParseError(f"{path}: line 1: missing columns {missing}")
        idx = {c: header.index(c) for c in expected if c in header}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, {c: row[i].strip() for c, i in idx.items()}


def _number(text: str, kind, path, lineno, column):
    try:
        value = kind(text)
    except ValueError:
        if kind is int:
            try:
                f = float(text)
            except ValueError:
                f = math.nan
            if f.is_integer():
                return int(f)
        raise ParseError(f"{path}: line {lineno}: column {column!r}: cannot parse {text!r}") from None
    if isinstance(value, float) and not math.isfinite(value):
        raise ParseError(f"{path}: line {lineno}: column {column!r}: non-finite value {text!r}")
    return value


def load_dataset(path, format: str = "arm", measure: str | None = None) -> Dataset:
    """Read an arm-level (``format="arm"``) or contrast-level (``"contrast"``) CSV."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "arm":
        return _load_arm_level(path, measure or "logOR")
    if format == "contrast":
        return _load_contrast_level(path, measure or "generic")
    raise ValueError(f"unknown format {format!r}; use 'arm' or 'contrast'")


def synthetic_antidepressant() -> tuple[Dataset, dict]:
    """Bundled 60-trial synthetic stand-in for the antidepressant data and its generating truth."""
    res = resources.files("drma").joinpath("resources")
    with resources.as_file(res.joinpath("antidepressant_synthetic.csv")) as path:
        dataset = load_dataset(path)
    truth = json.loads(res.joinpath("antidepressant_synthetic.json").read_text())
    return dataset, truth


def _load_arm_level(path: Path, measure: str) -> Dataset:
    grouped: dict[str, list] = {}
    clusters: dict[str, str | None] = {}
    seen: dict[tuple[str, float], int] = {}
    for lineno, row in _read_rows(path, ARM_COLUMNS):
        sid = row["study_id"]
        if not sid:
            raise ParseError(f"{path}: line {lineno}: empty study_id")
        dose = _number(row["dose"], float, path, lineno, "dose")
        events = _number(row["events"], int, path, lineno, "events")
        size = _number(row["size"], int, path, lineno, "size")
        key = (sid, dose)
        if key in seen:
            raise ValidationError(f"{path}: line {lineno}: duplicate dose {dose} in study {sid!r} (first at line {seen[key]})")
        seen[key] = lineno
        try:
            arm = Arm(dose, events, size)
        except ValidationError as exc:
            raise ValidationError(f"{path}: line {lineno}: {exc}") from None
        cluster = row["cluster"] or None
        if sid in clusters and clusters[sid] != cluster:
            raise ValidationError(f"{path}: line {lineno}: study {sid!r} has inconsistent cluster labels")
        clusters[sid] = cluster
        grouped.setdefault(sid, []).append(arm)
    studies = [StudyRecord(sid, tuple(arms), clusters[sid]) for sid, arms in grouped.items()]
    return Dataset(studies=tuple(studies), measure=measure)


def _load_contrast_level(path: Path, measure: str) -> Dataset:
    grouped: dict[str, list] = {}
    meta: dict[str, tuple] = {}
    for lineno, row in _read_rows(path, CONTRAST_COLUMNS):
        sid = row["study_id"]
        if not sid:
            raise ParseError(f"{path}: line {lineno}: empty study_id")
        dose = _number(row["dose"], float, path, lineno, "dose")
        ref = _number(row["ref_dose"], float, path, lineno, "ref_dose")
        y = _number(row["log_effect"], float, path, lineno, "log_effect")
        se = _number(row["se"], float, path, lineno, "se")
        rv_text = row.get("ref_var", "")
        ref_var = _number(rv_text, float, path, lineno, "ref_var") if rv_text else None
        if se <= 0:
            raise ValidationError(f"{path}: line {lineno}: se must be positive")
        if dose <= ref:
            raise ValidationError(f"{path}: line {lineno}: dose {dose} must exceed ref_dose {ref}")
        cluster = row["cluster"] or None
        if sid in meta:
            if meta[sid][0] != ref or meta[sid][1] != cluster:
                raise ValidationError(f"{path}: line {lineno}: study {sid!r} has inconsistent ref_dose or cluster")
            if meta[sid][2] != ref_var:
                raise ValidationError(f"{path}: line {lineno}: study {sid!r} has inconsistent ref_var")
        meta[sid] = (ref, cluster, ref_var)
        if any(d == dose for d, _, _ in grouped.get(sid, [])):
            raise ValidationError(f"{path}: line {lineno}: duplicate dose {dose} in study {sid!r}")
        grouped.setdefault(sid, []).append((dose, y, se))
    tables = []
    for sid, rows in grouped.items():
        rows.sort()
        ref, cluster, ref_var = meta[sid]
        se = np.array([r[2] for r in rows])
        off = ref_var
        if off is None:
            off = 0.0
            if len(rows) > 1:
                warnings.warn(f"study {sid!r}: no ref_var supplied, contrasts treated as uncorrelated", stacklevel=2)
        cov = np.full((len(rows), len(rows)), off)
        cov[np.diag_indices(len(rows))] = se**2
        tables.append(
            EffectTable(
                study_id=sid,
                effects=np.array([r[1] for r in rows]),
                covariance=cov,
                doses=np.array([r[0] for r in rows]),
                reference_dose=ref,
                cluster=cluster,
            )
        )
    return Dataset(studies=(), measure=measure, tables=tuple(tables))


def write_dataset(dataset: Dataset, path) -> None:
    """Write a dataset in the layout :func:`load_dataset` reads back."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if dataset.has_counts:
            w.writerow(ARM_COLUMNS)
            for s in dataset.studies:
                for a in s.arms:
                    w.writerow([s.study_id, s.cluster or "", repr(float(a.dose)), a.events, a.size])
        else:
            w.writerow(CONTRAST_COLUMNS)
            for t in dataset.tables:
                ref_var = t.covariance[0, 1] if t.size > 1 else ""
                for j in range(t.size):
                    w.writerow([
                        t.study_id, t.cluster or "", repr(float(t.doses[j])), repr(float(t.reference_dose)),
                        repr(float(t.effects[j])), repr(float(math.sqrt(t.covariance[j, j]))),
                        repr(float(ref_var)) if ref_var != "" else "",
                    ])


# --------------------------------------------------------------------------
# Validation report


@dataclass
class StudyCheck:
    study_id: str
    n_arms: int
    zero_cells: int
    identifiable_alone: bool
    bayes_usable: bool

    @property
    def onestage_status(self) -> str:
        return "estimable" if self.identifiable_alone else "shrinkage-only"


@dataclass
class ValidationReport:
    p: int
    studies: list[StudyCheck] = field(default_factory=list)

    @property
    def n_studies(self) -> int:
        return len(self.studies)

    @property
    def n_arms(self) -> int:
        return sum(s.n_arms for s in self.studies)

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "n_studies": self.n_studies,
            "n_arms": self.n_arms,
            "studies": [
                {
                    "study_id": s.study_id,
                    "n_arms": s.n_arms,
                    "zero_cells": s.zero_cells,
                    "onestage": s.onestage_status,
                    "bayes_usable": s.bayes_usable,
                }
                for s in self.studies
            ],
        }


def validate_dataset(dataset: Dataset, p: int = 2) -> ValidationReport:
    """Per-study usability report for a model with ``p`` dose transforms.

    A study needs ``p + 1`` dose levels to identify its own curve; studies
    with fewer levels still enter the hierarchical models through shrinkage.
    """
    report = ValidationReport(p=p)
    if dataset.has_counts:
        for s in dataset.studies:
            zeros = sum((a.events == 0) + (a.non_events == 0) for a in s.arms)
            k = len(s.arms)
            report.studies.append(StudyCheck(s.study_id, k, zeros, k >= p + 1, k >= 2))
    else:
        for t in dataset.tables:
            k = t.size + 1
            report.studies.append(StudyCheck(t.study_id, k, 0, k >= p + 1, k >= 2))
    return report


def studies_from_counts(rows: Iterable[tuple]) -> tuple[StudyRecord, ...]:
    """Build studies from ``(study_id, cluster, dose, events, size)`` tuples."""
    grouped: dict[str, list] = {}
    clusters: dict[str, str | None] = {}
    for sid, cluster, dose, events, size in rows:
        grouped.setdefault(sid, []).append(Arm(float(dose), int(events), int(size)))
        clusters[sid] = cluster
    return tuple(StudyRecord(sid, tuple(arms), clusters[sid]) for sid, arms in grouped.items())
