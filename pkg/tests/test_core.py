import json
import string

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from airglyph.core import (
    LETTERS,
    Dataset,
    DatasetError,
    Recording,
    SplitSpec,
    WritingMode,
    dumps_dataset,
    index_letter,
    letter_index,
    load_dataset,
    quantized,
    save_dataset,
    split_by_subject,
)

from conftest import make_recording


def _write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs), encoding="utf-8")


def _obj(rec_id="a", samples=None, **kw):
    d = {"id": rec_id, "subject": "S1", "mode": "2D", "letter": "A", "rate_hz": 100.0,
         "samples": samples if samples is not None else [[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]}
    d.update(kw)
    return d


def test_letter_ordinals():
    assert len(set(LETTERS)) == 26
    assert letter_index("A") == 0 and letter_index("Z") == 25
    assert [index_letter(i) for i in range(26)] == list(string.ascii_uppercase)
    for bad in ("a", "AB", "", "1", None):
        with pytest.raises(DatasetError):
            letter_index(bad)
    with pytest.raises(DatasetError):
        index_letter(26)


def test_writing_mode_has_two_values():
    assert {m.value for m in WritingMode} == {"2D", "3D"}
    assert WritingMode.parse("3d") is WritingMode.MID_AIR_3D
    with pytest.raises(DatasetError, match="writing mode"):
        WritingMode.parse("4D")


@pytest.mark.parametrize("samples", [np.zeros((0, 3)), np.zeros((4, 2)), [[0.0, np.nan, 0.0]], [[0, 0, np.inf]]])
def test_recording_rejects_bad_samples(samples):
    with pytest.raises(DatasetError):
        Recording("r", "S1", "2D", "A", 100.0, samples)


@pytest.mark.parametrize("rate", [0.0, -5.0, float("nan")])
def test_recording_rejects_bad_rate(rate):
    with pytest.raises(DatasetError, match="rate_hz"):
        Recording("r", "S1", "2D", "A", rate, [[0, 0, 0]])


def test_recording_samples_are_read_only():
    r = make_recording()
    with pytest.raises(ValueError):
        r.samples[0, 0] = 1.0


def test_dataset_rejects_duplicate_ids():
    r = make_recording("dup")
    with pytest.raises(DatasetError, match="dup"):
        Dataset((r, make_recording("dup", seed=1)))


def test_load_two_recordings(tmp_path):
    p = tmp_path / "d.jsonl"
    _write_lines(p, [_obj("a"), _obj("b", letter="B", mode="3D")])
    ds = load_dataset(p)
    assert len(ds) == 2
    assert [r.id for r in ds] == ["a", "b"]
    assert ds.recordings[1].mode is WritingMode.MID_AIR_3D
    np.testing.assert_array_equal(ds.recordings[0].samples, [[0, 1, 2], [3, 4, 5]])


def test_load_duplicate_id_names_it(tmp_path):
    p = tmp_path / "d.jsonl"
    _write_lines(p, [_obj("same"), _obj("same")])
    with pytest.raises(DatasetError, match="duplicate recording id 'same'"):
        load_dataset(p)


def test_load_two_component_sample_names_record_index(tmp_path):
    p = tmp_path / "d.jsonl"
    _write_lines(p, [_obj("a"), _obj("b", samples=[[0.0, 1.0]])])
    with pytest.raises(DatasetError, match=r"record 1: .*samples.*3 components"):
        load_dataset(p)


@pytest.mark.parametrize("field, value, message", [
    ("letter", "a", "letter"),
    ("mode", "5D", "mode"),
    ("rate_hz", "fast", "rate_hz"),
    ("samples", [], "samples"),
    ("samples", [[1, 2, "x"]], "numbers"),
])
def test_load_schema_violations(tmp_path, field, value, message):
    p = tmp_path / "d.jsonl"
    _write_lines(p, [_obj("a", **{field: value})])
    with pytest.raises(DatasetError, match=f"record 0: .*{message}"):
        load_dataset(p)


def test_load_missing_field(tmp_path):
    p = tmp_path / "d.jsonl"
    obj = _obj("a")
    del obj["subject"]
    _write_lines(p, [obj])
    with pytest.raises(DatasetError, match="record 0: missing field 'subject'"):
        load_dataset(p)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.jsonl")


def test_load_invalid_json_reports_line(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(json.dumps(_obj("a")) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(p)


def test_round_trip_one_recording(tmp_path):
    ds = Dataset((Recording("x", "S9", "3D", "Q", 50.0, [[0.5, -0.25, 1.0]]),), "hand made")
    p = tmp_path / "one.jsonl"
    save_dataset(ds, p)
    back = load_dataset(p)
    assert back == ds


def test_round_trip_full_synthetic_dataset(tmp_path, default_dataset):
    assert len(default_dataset) == 1040
    p = tmp_path / "full.jsonl"
    save_dataset(default_dataset, p)
    back = load_dataset(p)
    expected = quantized(default_dataset)
    assert back.provenance == expected.provenance
    assert len(back) == len(expected)
    for a, b in zip(back, expected):
        assert (a.id, a.subject, a.mode, a.letter, a.rate_hz) == (b.id, b.subject, b.mode, b.letter, b.rate_hz)
        np.testing.assert_array_equal(a.samples, b.samples)
    # storage keeps 6 decimals, so nothing moves by more than half a unit in the last place
    for a, b in zip(back, default_dataset):
        assert np.max(np.abs(a.samples - b.samples)) <= 0.5e-6 + 1e-12


def test_save_to_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot write dataset"):
        save_dataset(Dataset((make_recording(),)), blocker / "sub" / "d.jsonl")


def test_split_default_dataset_by_subject(default_dataset):
    train, test = split_by_subject(default_dataset, SplitSpec("S1", "S2"))
    assert len(train) == 520 and len(test) == 520
    assert {r.subject for r in train} == {"S1"}
    assert {r.subject for r in test} == {"S2"}
    assert not {r.id for r in train} & {r.id for r in test}


def test_split_unknown_subject():
    ds = Dataset((make_recording("a", subject="S1"),))
    with pytest.raises(DatasetError, match="unknown subject 'S2'"):
        split_by_subject(ds, SplitSpec("S1", "S2"))


def test_split_spec_needs_distinct_subjects():
    with pytest.raises(DatasetError):
        SplitSpec("S1", "S1")


recording_st = st.builds(
    lambda i, subj, mode, letter, n, seed: make_recording(f"r{i}", letter, mode, subj, n, seed),
    st.integers(0, 10 ** 6), st.sampled_from(["S1", "S2", "S3"]), st.sampled_from(["2D", "3D"]),
    st.sampled_from(list(LETTERS)), st.integers(1, 6), st.integers(0, 100),
)


def _unique(recs):
    seen, out = set(), []
    for r in recs:
        if r.id not in seen:
            seen.add(r.id)
            out.append(r)
    return out


@settings(max_examples=60, deadline=None)
@given(st.lists(recording_st, min_size=1, max_size=12).map(_unique))
def test_split_partitions_named_subjects(recs):
    ds = Dataset(tuple(recs))
    subjects = ds.subjects
    if len(subjects) < 2:
        return
    spec = SplitSpec(subjects[0], subjects[-1])
    train, test = split_by_subject(ds, spec)
    named = [r for r in ds if r.subject in (spec.train_subject, spec.test_subject)]
    assert sorted(r.id for r in train) + sorted(r.id for r in test) == \
        sorted(r.id for r in named if r.subject == spec.train_subject) + \
        sorted(r.id for r in named if r.subject == spec.test_subject)
    assert not {r.id for r in train} & {r.id for r in test}
    assert len(train) + len(test) == len(named)


@settings(max_examples=40, deadline=None)
@given(st.lists(recording_st, min_size=1, max_size=6).map(_unique), st.text(max_size=20))
def test_save_load_save_is_byte_identical(tmp_path_factory, recs, provenance):
    d = tmp_path_factory.mktemp("idem")
    ds = Dataset(tuple(recs), provenance)
    save_dataset(ds, d / "a.jsonl")
    save_dataset(load_dataset(d / "a.jsonl"), d / "b.jsonl")
    assert (d / "a.jsonl").read_bytes() == (d / "b.jsonl").read_bytes()
    assert dumps_dataset(load_dataset(d / "a.jsonl")) == (d / "a.jsonl").read_text(encoding="utf-8")
