import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drma.data import (
    Arm,
    Dataset,
    DegenerateCellError,
    EffectTable,
    InsufficientArmsError,
    ParseError,
    StudyRecord,
    ValidationError,
    compute_effects,
    load_dataset,
    validate_dataset,
    write_dataset,
)


def study(*arms, sid="a", cluster=None):
    return StudyRecord(sid, tuple(Arm(*a) for a in arms), cluster)


def test_logor_single_contrast_matches_hand_values():
    t = compute_effects(study((0, 10, 100), (20, 20, 100)))
    assert t.effects[0] == pytest.approx(math.log((20 / 80) / (10 / 90)), rel=1e-12)
    assert t.effects[0] == pytest.approx(0.81093, abs=1e-5)
    assert t.covariance[0, 0] == pytest.approx(1 / 20 + 1 / 80 + 1 / 10 + 1 / 90, rel=1e-12)
    assert t.covariance[0, 0] == pytest.approx(0.173611, abs=1e-6)


def test_logor_shared_reference_covariance():
    t = compute_effects(study((0, 10, 100), (20, 20, 100), (40, 30, 100)))
    assert t.covariance[0, 1] == pytest.approx(1 / 10 + 1 / 90, rel=1e-12)
    assert t.covariance[1, 0] == t.covariance[0, 1]
    assert t.covariance[1, 1] == pytest.approx(1 / 30 + 1 / 70 + 1 / 10 + 1 / 90, rel=1e-12)


def test_logrr_delta_method():
    t = compute_effects(study((0, 10, 100), (20, 20, 100), (40, 30, 120)), measure="logRR")
    assert t.effects[1] == pytest.approx(math.log((30 / 120) / (10 / 100)))
    assert t.covariance[0, 0] == pytest.approx(1 / 20 - 1 / 100 + 1 / 10 - 1 / 100)
    assert t.covariance[0, 1] == pytest.approx(1 / 10 - 1 / 100)


def test_identical_arms_give_zero_effect():
    t = compute_effects(study((0, 15, 90), (5, 15, 90)))
    assert t.effects[0] == 0.0


def test_zero_cell_correction_applies_to_whole_study():
    t = compute_effects(study((0, 0, 50), (10, 5, 50)), correction=0.5)
    r0, t0, r1, t1 = 0.5, 50.5, 5.5, 45.5
    assert t.effects[0] == pytest.approx(math.log((r1 / t1) / (r0 / t0)))
    assert t.covariance[0, 0] == pytest.approx(1 / r1 + 1 / t1 + 1 / r0 + 1 / t0)


def test_zero_cell_without_correction_is_an_error():
    with pytest.raises(DegenerateCellError):
        compute_effects(study((0, 0, 50), (10, 5, 50)), correction=0.0)


def test_single_arm_is_insufficient():
    with pytest.raises(InsufficientArmsError):
        compute_effects(study((0, 10, 100)))


def test_arm_invariants():
    with pytest.raises(ValidationError):
        Arm(10, 210, 200)
    with pytest.raises(ValidationError):
        Arm(-1, 1, 10)
    assert Arm(0, 3, 10).non_events == 7


def test_study_sorts_arms_and_rejects_duplicate_doses():
    s = study((20, 5, 50), (0, 3, 50))
    assert list(s.doses) == [0, 20]
    assert s.reference.dose == 0
    with pytest.raises(ValidationError):
        study((0, 3, 50), (0, 4, 50))


def test_nonzero_reference_dose_is_minimum():
    t = compute_effects(study((30, 10, 100), (10, 12, 100)))
    assert t.reference_dose == 10
    assert list(t.doses) == [30]


@given(st.lists(st.tuples(st.integers(1, 60), st.integers(70, 150)), min_size=3, max_size=5))
@settings(max_examples=60, deadline=None)
def test_permuting_nonreference_arms_permutes_effects(cells):
    cells = [(min(r, n - 1), n) for r, n in cells]
    arms = [(float(j), r, n) for j, (r, n) in enumerate(cells)]
    a = compute_effects(study(*arms))
    swapped = list(arms)
    swapped[1], swapped[2] = (arms[1][0], *arms[2][1:]), (arms[2][0], *arms[1][1:])
    b = compute_effects(study(*swapped))
    perm = list(range(a.size))
    perm[0], perm[1] = 1, 0
    np.testing.assert_allclose(b.effects, a.effects[perm], rtol=1e-12)
    np.testing.assert_allclose(b.covariance, a.covariance[np.ix_(perm, perm)], rtol=1e-12)
    off = a.covariance[~np.eye(a.size, dtype=bool)]
    np.testing.assert_allclose(off, 1 / cells[0][0] + 1 / (cells[0][1] - cells[0][0]), rtol=1e-12)
    np.linalg.cholesky(a.covariance)


def test_effect_table_checks_covariance():
    with pytest.raises(ValidationError):
        EffectTable("x", [0.1, 0.2], [[1, 0.5], [0.4, 1]], [1, 2], 0)
    with pytest.raises(ValidationError):
        EffectTable("x", [0.1, 0.2], [[1, 2], [2, 1]], [1, 2], 0)


def test_load_minimal_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("study_id,cluster,dose,events,size\nA,,40,12,50\nA,,0,5,50\nA,,20,8,50\n")
    ds = load_dataset(p)
    assert ds.ns == 1
    assert len(ds.studies[0].arms) == 3
    assert list(ds.studies[0].doses) == [0, 20, 40]
    assert ds.studies[0].cluster is None


def test_events_above_size_names_the_line(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("study_id,cluster,dose,events,size\nA,,0,5,50\nA,,20,210,200\n")
    with pytest.raises(ValidationError, match="line 3"):
        load_dataset(p)


def test_malformed_row_names_the_line(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("study_id,cluster,dose,events,size\nA,,0,5,50\nA,,abc,5,50\n")
    with pytest.raises(ParseError, match="line 3"):
        load_dataset(p)
    p.write_text("study_id,cluster,dose,events,size\nA,,0,5\n")
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(p)


def test_duplicate_dose_rejected(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("study_id,cluster,dose,events,size\nA,,0,5,50\nA,,0,6,50\n")
    with pytest.raises(ValidationError, match="duplicate"):
        load_dataset(p)


def test_missing_columns(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("study_id,dose,events\n")
    with pytest.raises(ParseError, match="missing columns"):
        load_dataset(p)


def test_round_trip(tmp_path, dataset):
    p = tmp_path / "d.csv"
    write_dataset(dataset, p)
    assert load_dataset(p) == dataset


def test_contrast_level_round_trip_and_ref_var(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text(
        "study_id,cluster,dose,ref_dose,log_effect,se,ref_var\n"
        "A,x,10,0,0.2,0.1,0.004\nA,x,20,0,0.3,0.12,0.004\nB,y,5,0,0.1,0.2,\nB,y,8,0,0.15,0.25,\n"
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ds = load_dataset(p, format="contrast")
    assert any("ref_var" in str(w.message) for w in caught)
    a, b = ds.tables
    assert a.covariance[0, 1] == pytest.approx(0.004)
    assert a.covariance[1, 1] == pytest.approx(0.0144)
    assert b.covariance.shape == (2, 2) and b.covariance[0, 1] == 0.0
    assert ds.cluster_labels == ["x", "y"]
    q = tmp_path / "c2.csv"
    write_dataset(ds, q)
    again = load_dataset(q, format="contrast")
    for t, u in zip(ds.tables, again.tables):
        np.testing.assert_allclose(t.effects, u.effects)
        np.testing.assert_allclose(t.covariance, u.covariance)


def test_duplicate_study_ids_rejected():
    s = study((0, 1, 10), (1, 2, 10))
    with pytest.raises(ValidationError):
        Dataset((s, s))


def test_validation_report():
    ds = Dataset((
        study((0, 5, 50), (10, 8, 50), (20, 9, 50), sid="three"),
        study((0, 0, 50), (10, 8, 50), sid="two"),
    ))
    rep = validate_dataset(ds, p=2)
    d = rep.to_dict()
    assert d["n_studies"] == 2
    assert d["studies"][0]["onestage"] == "estimable"
    two = d["studies"][1]
    assert two["onestage"] == "shrinkage-only" and two["bayes_usable"]
    assert two["zero_cells"] == 1
    assert validate_dataset(Dataset(), p=2).n_studies == 0
