import filecmp
import json

import numpy as np
import pytest

from connalign.data import (
    SplitSpec,
    SyntheticConfig,
    generate_synthetic,
    ground_truth,
    load_dataset,
    load_reports,
    load_sc,
    make_batches,
    save_dataset,
    save_sc,
    stratified_split,
)
from connalign.errors import ConfigError, ValidationError
from connalign.text import build_vocab


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_zero_matrix(tmp_path):
    sc = load_sc(write(tmp_path / "z.csv", "0,0,0\n0,0,0\n0,0,0\n"))
    assert sc.region_count == 3


def test_asymmetry_names_entry(tmp_path):
    with pytest.raises(ValidationError, match=r"\(0,1\)"):
        load_sc(write(tmp_path / "a.csv", "0,5,0\n4,0,0\n0,0,0\n"))


def test_tiny_asymmetry_is_averaged(tmp_path):
    sc = load_sc(write(tmp_path / "a.csv", "0,1\n1.0000000000001,0\n"))
    assert sc.values[0, 1] == sc.values[1, 0]


@pytest.mark.parametrize("text, pattern", [
    ("0,-1\n-1,0\n", "negative"),
    ("1,0\n0,0\n", "diagonal"),
    ("0,1,2\n1,0\n", "row 0 has 3"),
    ("0,x\n1,0\n", "row 0 col 1"),
])
def test_sc_errors(tmp_path, text, pattern):
    with pytest.raises(ValidationError, match=pattern):
        load_sc(write(tmp_path / "bad.csv", text))


def test_sc_round_trip(tmp_path, rng):
    a = rng.uniform(0, 100, (5, 5))
    a = np.triu(a, 1)
    a = a + a.T
    from connalign.connectome import SCMatrix

    save_sc(SCMatrix(a), tmp_path / "m.csv")
    np.testing.assert_array_equal(load_sc(tmp_path / "m.csv").values, a)


def test_reports(tmp_path):
    assert load_reports(write(tmp_path / "e.jsonl", "")) == []
    reps = load_reports(write(tmp_path / "r.jsonl", '{"subject_id": "a", "label": "NC", "age": 70}\n'))
    assert reps[0][1] == "NC"
    assert reps[0][0].raw_text.endswith("notes: unknown")


@pytest.mark.parametrize("text, pattern", [
    ('{"subject_id": "a", "label": "NC"}\n{"subject_id": "a", "label": "MCI"}\n', "duplicate"),
    ('{"subject_id": "a", "label": "NC"}\n{oops\n', ":2:"),
    ('{"label": "NC"}\n', "subject_id"),
    ('{"subject_id": "a", "label": "AD"}\n', "label"),
])
def test_report_errors(tmp_path, text, pattern):
    with pytest.raises(ValidationError, match=pattern):
        load_reports(write(tmp_path / "r.jsonl", text))


def records(n_per_class):
    return generate_synthetic(SyntheticConfig(n_regions=12, subjects_per_class=n_per_class, seed=1))


def test_split_exact_fractions():
    train, test = stratified_split(records(10), SplitSpec(seed=0))
    assert sum(r.label == "NC" for r in train) == 8 and sum(r.label == "MCI" for r in train) == 8
    assert len(test) == 4


def test_split_partition_and_determinism():
    recs = records(13)
    a = stratified_split(recs, SplitSpec(seed=5))
    b = stratified_split(recs, SplitSpec(seed=5))
    assert [r.subject_id for r in a[0]] == [r.subject_id for r in b[0]]
    ids_train = {r.subject_id for r in a[0]}
    ids_test = {r.subject_id for r in a[1]}
    assert not ids_train & ids_test
    assert ids_train | ids_test == {r.subject_id for r in recs}


def test_split_needs_two_per_class():
    with pytest.raises(ValidationError):
        stratified_split(records(1))
    with pytest.raises(ConfigError):
        SplitSpec(train_fraction=1.0)


def test_batches_keep_partial_and_shuffle_by_epoch():
    recs = records(9)
    vocab = build_vocab([r.report.raw_text for r in recs])
    batches = make_batches(recs, 8, seed=0, epoch=0, vocab=vocab, m_max=16)
    assert [len(b) for b in batches] == [8, 8, 2]
    b = batches[0]
    assert b.sc.shape == (8, 12, 12) and b.token_ids.shape == (8, 16) and b.mask.shape == (8, 16)
    again = make_batches(recs, 8, seed=0, epoch=0, vocab=vocab, m_max=16)
    other = make_batches(recs, 8, seed=0, epoch=1, vocab=vocab, m_max=16)
    assert again[0].subject_ids == b.subject_ids
    assert other[0].subject_ids != b.subject_ids
    with pytest.raises(ValidationError):
        make_batches([], 8)


def test_synth_defaults():
    cfg = SyntheticConfig()
    assert cfg.n_regions == 16 and cfg.subjects_per_class == 200
    truth = ground_truth(cfg)["planted"]
    assert [(p["region"], p["token"]) for p in truth] == [(p.region, p.token) for p in cfg.planted]
    assert all(p["delta"] == 0.2 and p["p_present"] == 0.9 and p["p_absent"] == 0.05 for p in truth)


def test_synth_config_errors():
    with pytest.raises(ConfigError):
        SyntheticConfig(planted=[(20, "x")])
    with pytest.raises(ConfigError):
        SyntheticConfig(filler_words=(5, 2))


def test_synth_is_byte_identical(tmp_path):
    cfg = SyntheticConfig(n_regions=12, subjects_per_class=4, seed=11)
    save_dataset(generate_synthetic(cfg), tmp_path / "a")
    save_dataset(generate_synthetic(cfg), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert not filecmp.dircmp(tmp_path / "a" / "sc", tmp_path / "b" / "sc").diff_files


def test_dataset_round_trip(tmp_path):
    recs = records(3)
    save_dataset(recs, tmp_path)
    back = load_dataset(tmp_path)
    assert [r.subject_id for r in back] == [r.subject_id for r in recs]
    assert [r.report.raw_text for r in back] == [r.report.raw_text for r in recs]
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a.sc.values, b.sc.values)
    json.loads((tmp_path / "reports.jsonl").read_text().splitlines()[0])


def test_planted_signal_present():
    recs = generate_synthetic(SyntheticConfig(subjects_per_class=100, seed=2))
    cfg = SyntheticConfig()
    for p in cfg.planted:
        strength = {lab: np.mean([r.sc.values[p.region].sum() for r in recs if r.label == lab]) for lab in ("NC", "MCI")}
        assert strength["MCI"] < 0.5 * strength["NC"]
        rate = {lab: np.mean([p.token in r.report.raw_text for r in recs if r.label == lab]) for lab in ("NC", "MCI")}
        assert rate["MCI"] > 0.75 and rate["NC"] < 0.15


def test_load_dataset_missing_matrix(tmp_path):
    save_dataset(records(2), tmp_path)
    next((tmp_path / "sc").iterdir()).unlink()
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
