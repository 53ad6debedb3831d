import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsefpca.data import (
    VARIABLES,
    CleaningRule,
    Dataset,
    Observation,
    SubjectRecord,
    apply_cleaning,
    describe_baseline,
    figure1_rules,
    ingest_csv,
    provenance_json,
    rescale_time,
    rule_from_dict,
    rule_to_dict,
    write_csv,
)
from sparsefpca.errors import ConfigError, DataError

HEADER = "subject,time," + ",".join(VARIABLES)


def _row(sid, t, **vals):
    full = {v: 100.0 for v in VARIABLES}
    full.update({"TIMP": 200.0, "P3NP": 7.0, "NT": 130.0, "DLCO": 65.0})
    full.update(vals)
    return f"{sid},{t}," + ",".join("" if full[v] is None else str(full[v]) for v in VARIABLES)


def _write(tmp_path, rows, name="in.csv"):
    p = tmp_path / name
    p.write_text(HEADER + "\n" + "\n".join(rows) + "\n")
    return p


def _obs(t, **vals):
    full = {v: 100.0 for v in VARIABLES}
    full.update({"TIMP": 200.0, "P3NP": 7.0, "NT": 130.0, "DLCO": 65.0})
    full.update(vals)
    return Observation(t, {k: full[k] for k in ("FVC", "TLC", "DLCO")},
                       {k: full[k] for k in ("TIMP", "P3NP", "HA", "NT")})


def test_ingest_groups_and_sorts(tmp_path):
    ds = ingest_csv(_write(tmp_path, [_row("A", 12), _row("A", 0), _row("A", 6)]))
    assert ds.n_subjects == 1 and ds.n_observations == 3
    np.testing.assert_array_equal(ds.subjects[0].times, [0, 6, 12])


def test_ingest_empty_cell_is_missing(tmp_path):
    ds = ingest_csv(_write(tmp_path, [_row("A", 0, FVC=None)]))
    o = ds.subjects[0].observations[0]
    assert o.value("FVC") is None and o.value("TLC") == 100.0


def test_ingest_duplicate_visit_names_subject_and_time(tmp_path):
    with pytest.raises(DataError, match="subject A at time 6"):
        ingest_csv(_write(tmp_path, [_row("A", 0), _row("A", 6), _row("A", 6)]))


def test_ingest_bad_number_reports_row(tmp_path):
    with pytest.raises(DataError, match="row 3"):
        ingest_csv(_write(tmp_path, [_row("A", 0), _row("A", 6, FVC="abc")]))


def test_ingest_missing_column_and_file(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("subject,time,FVC\nA,0,1\n")
    with pytest.raises(DataError, match="missing column"):
        ingest_csv(p)
    with pytest.raises(DataError):
        ingest_csv(tmp_path / "nope.csv")


def test_ingest_custom_schema(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("pid,month,fvc_pct\nA,0,90\nA,6,91\n")
    ds = ingest_csv(p, schema={"subject": "pid", "time": "month", "FVC": "fvc_pct"})
    np.testing.assert_array_equal(ds.subjects[0].series("FVC")[1], [90, 91])


def test_write_then_read_roundtrip(tmp_path):
    ds = ingest_csv(_write(tmp_path, [_row("A", 0), _row("A", 6.5, HA=None), _row("B", 0)]))
    write_csv(ds, tmp_path / "out.csv")
    again = ingest_csv(tmp_path / "out.csv")
    assert again.subjects == ds.subjects


def test_observation_invariants():
    with pytest.raises(DataError):
        Observation(-1.0)
    with pytest.raises(DataError):
        Observation(0.0, {"FVC": float("inf")})
    with pytest.raises(DataError):
        SubjectRecord("A", (Observation(1.0), Observation(1.0)))
    with pytest.raises(DataError):
        Dataset((SubjectRecord("A", (Observation(0.0),)), SubjectRecord("A", (Observation(0.0),))))


def test_observation_rule_removes_one_observation():
    subjects = [SubjectRecord(f"S{i}", (_obs(0), _obs(6), _obs(12))) for i in range(3)]
    subjects[1] = SubjectRecord("S1", (_obs(0), _obs(6, P3NP=30.0), _obs(12)))
    ds = Dataset(tuple(subjects))
    out = apply_cleaning(ds, [CleaningRule("P3NP", ">", 25)], min_observations=1)
    assert out.n_observations == 8
    node = [n for n in out.provenance if n["step"] == "remove observations with P3NP > 25"][0]
    assert node["removed_observations"] == 1 and node["observations"] == 8


def test_baseline_rule_removes_patient():
    ds = Dataset((SubjectRecord("A", (_obs(0, TIMP=600.0), _obs(6))), SubjectRecord("B", (_obs(0), _obs(6)))))
    out = apply_cleaning(ds, [CleaningRule("TIMP", ">", 500, "baseline", "remove_patient")])
    assert [s.id for s in out.subjects] == ["B"]


def test_baseline_rule_looks_only_at_first_visit():
    ds = Dataset((SubjectRecord("A", (_obs(0), _obs(6, TIMP=600.0))),))
    out = apply_cleaning(ds, [CleaningRule("TIMP", ">", 500, "baseline", "remove_patient")])
    assert out.n_subjects == 1


def test_empty_rules_identity():
    ds = Dataset(tuple(SubjectRecord(f"S{i}", (_obs(0), _obs(30))) for i in range(4)))
    out = apply_cleaning(ds, [], horizon=60, min_observations=1)
    assert out.subjects == ds.subjects


def test_horizon_and_min_observations():
    ds = Dataset((SubjectRecord("A", (_obs(0), _obs(70))), SubjectRecord("B", (_obs(0), _obs(12)))))
    out = apply_cleaning(ds, [], horizon=60, min_observations=2)
    assert [s.id for s in out.subjects] == ["B"]


def test_missing_filter_respects_modeled_set():
    ds = Dataset((SubjectRecord("A", (_obs(0, HA=None), _obs(6))),))
    assert apply_cleaning(ds, [], modeled=("FVC",), min_observations=1).n_observations == 2
    assert apply_cleaning(ds, [], modeled=VARIABLES, min_observations=1).n_observations == 1


def test_unknown_variable_rule():
    ds = Dataset((SubjectRecord("A", (_obs(0),)),))
    with pytest.raises(ConfigError, match="XYZ"):
        apply_cleaning(ds, [CleaningRule("XYZ", ">", 1)])


def test_rule_validation_and_dict_roundtrip():
    with pytest.raises(ConfigError):
        CleaningRule("FVC", ">=", 1)
    with pytest.raises(ConfigError):
        CleaningRule("FVC", ">", float("nan"))
    for step in figure1_rules():
        assert rule_from_dict(rule_to_dict(step)) == step
    with pytest.raises(ConfigError):
        rule_from_dict({"step": "sideways"})


def test_figure1_default_directions():
    rules = {(r.variable, r.op): r.threshold for r in figure1_rules() if not isinstance(r, str)}
    assert rules[("DLCO", ">")] == 120 and rules[("NT", ">")] == 1000


def test_provenance_json_parses():
    ds = Dataset((SubjectRecord("A", (_obs(0), _obs(6))),))
    doc = json.loads(provenance_json(apply_cleaning(ds, figure1_rules())))
    assert doc["nodes"][0]["step"] == "input"


@pytest.mark.parametrize("t,expected", [(60.0, 1.0), (0.0, 0.0), (30.0, 0.5)])
def test_rescale_examples(t, expected):
    ds = Dataset((SubjectRecord("A", (Observation(t),)),))
    assert rescale_time(ds, 60.0).subjects[0].times[0] == expected


def test_rescale_rejects_times_beyond_horizon():
    with pytest.raises(DataError):
        rescale_time(Dataset((SubjectRecord("A", (Observation(61.0),)),)), 60.0)


def test_describe_two_subjects():
    ds = Dataset((SubjectRecord("A", (_obs(0, FVC=100.0),)), SubjectRecord("B", (_obs(0, FVC=104.0),))))
    table = describe_baseline(ds)
    assert table.loc["FVC", "mean"] == pytest.approx(102.0)
    assert table.loc["FVC", "variance"] == pytest.approx(8.0)
    assert table.shape == (7, 9)


def test_describe_correlation_monte_carlo():
    rng = np.random.default_rng(11)
    z = rng.multivariate_normal([0, 0], [[1, 0.8], [0.8, 1]], size=5000)
    subjects = tuple(
        SubjectRecord(f"S{i}", (_obs(0, FVC=100 + 10 * a, TLC=90 + 5 * b, HA=50 + i % 7),))
        for i, (a, b) in enumerate(z)
    )
    table = describe_baseline(Dataset(subjects))
    assert abs(table.loc["FVC", "TLC"] - 0.8) < 0.03
    np.testing.assert_allclose(np.diag(table[list(VARIABLES)].loc[["FVC", "TLC", "HA"], ["FVC", "TLC", "HA"]]), 1.0)


def test_describe_constant_column_correlation_missing():
    ds = Dataset(tuple(SubjectRecord(f"S{i}", (_obs(0, FVC=90.0 + i),)) for i in range(5)))
    table = describe_baseline(ds)
    assert np.isnan(table.loc["FVC", "TLC"])


value = st.floats(1, 1000)


@st.composite
def datasets(draw):
    n = draw(st.integers(1, 6))
    subjects = []
    for i in range(n):
        k = draw(st.integers(1, 5))
        times = sorted(draw(st.sets(st.integers(0, 80), min_size=k, max_size=k)))
        obs = tuple(
            _obs(float(t), FVC=draw(value), TIMP=draw(value), P3NP=draw(st.floats(0, 40)),
                 DLCO=draw(value), NT=draw(st.floats(1, 2000)), HA=draw(st.one_of(st.none(), value)))
            for t in times
        )
        subjects.append(SubjectRecord(f"S{i}", obs))
    return Dataset(tuple(subjects))


@given(datasets())
def test_cleaning_idempotent_and_conserves_counts(ds):
    once = apply_cleaning(ds, figure1_rules())
    twice = apply_cleaning(once, figure1_rules())
    assert twice.subjects == once.subjects
    nodes = once.provenance
    for prev, node in zip(nodes, nodes[1:]):
        assert prev["patients"] - node["removed_patients"] == node["patients"]
        assert prev["observations"] - node["removed_observations"] == node["observations"]
    assert nodes[-1]["patients"] == once.n_subjects
    assert all(s.times[-1] <= once.horizon for s in once.subjects)


@given(datasets(), st.floats(81, 500))
def test_rescale_inverse(ds, horizon):
    scaled = rescale_time(ds, horizon)
    for a, b in zip(ds.subjects, scaled.subjects):
        assert np.all((b.times >= 0) & (b.times <= 1))
        np.testing.assert_allclose(scaled.to_months(b.times), a.times, rtol=1e-12)


@given(datasets())
def test_correlation_matrix_symmetric_bounded(ds):
    table = describe_baseline(ds)
    corr = table[list(VARIABLES)].to_numpy()
    finite = np.isfinite(corr)
    assert np.array_equal(finite, finite.T)
    np.testing.assert_allclose(corr[finite], corr.T[finite], atol=1e-12)
    assert np.all(np.abs(corr[finite]) <= 1 + 1e-12)
