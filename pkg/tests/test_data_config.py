"""Interaction ingestion, the synthetic generator, and run configuration."""
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sidedit.config import RunConfig
from sidedit.data import InteractionSequence, SyntheticSpec, gen_synthetic, ingest_jsonl, write_synthetic
from sidedit.errors import ConfigError, DataError
from sidedit.evalkit import make_splits


def _line(u, i, t, title="red shoe"):
    return json.dumps({"user_id": u, "item_id": i, "timestamp": t, "title": title})


def test_malformed_line_skipped(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text("\n".join([_line("u", "a", 1), "{not json", _line("u", "b", 2)]) + "\n")
    ds = ingest_jsonl(p)
    assert ds.sequences["u"].items == ["a", "b"] and ds.skipped == 1


def test_missing_fields_counted(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text("\n".join([_line("u", "a", 1), '{"user_id": "u", "item_id": "b"}', _line("u", "c", 2, title=" ")]))
    assert ingest_jsonl(p).skipped == 2


def test_sorted_by_timestamp_and_deduplicated(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text("\n".join([_line("u", "c", 3), _line("u", "a", 1), _line("u", "a", 1, "other"), _line("u", "b", 2)]))
    ds = ingest_jsonl(p)
    assert ds.sequences["u"].items == ["a", "b", "c"] and ds.sequences["u"].timestamps == [1, 2, 3]
    assert ds.items["a"] == "red shoe"  # first occurrence wins


def test_no_valid_lines(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text("garbage\n")
    with pytest.raises(DataError):
        ingest_jsonl(p)


def test_sequence_invariants():
    with pytest.raises(DataError):
        InteractionSequence("u", ["a"], [1, 2])
    with pytest.raises(DataError):
        InteractionSequence("u", ["a", "b"], [2, 1])


# ---------------------------------------------------------------- synthetic

SMALL = dict(n_items=200, n_cold=20, n_users=300, n_clusters=4)


def test_same_seed_byte_identical_files(tmp_path):
    a = write_synthetic(SyntheticSpec(**SMALL), 5, tmp_path / "a")
    b = write_synthetic(SyntheticSpec(**SMALL), 5, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a" / "boundaries.json").read_bytes() == (tmp_path / "b" / "boundaries.json").read_bytes()
    c = write_synthetic(SyntheticSpec(**SMALL), 6, tmp_path / "c")
    assert a.read_bytes() != c.read_bytes()


def test_written_corpus_reingests_identically(tmp_path):
    ds = gen_synthetic(SyntheticSpec(**SMALL), 2)
    back = ingest_jsonl(write_synthetic(SyntheticSpec(**SMALL), 2, tmp_path))
    used = {i for s in ds.sequences.values() for i in s.items}
    # items nobody interacted with have no line to live on
    assert back.skipped == 0 and back.items == {i: t for i, t in ds.items.items() if i in used}
    assert {u: s.items for u, s in back.sequences.items()} == {u: s.items for u, s in ds.sequences.items()}


def test_no_cold_items_gives_empty_cold_split():
    ds = gen_synthetic(SyntheticSpec(**{**SMALL, "n_cold": 0}), 0)
    assert make_splits(ds.sequences, ds.boundaries).test_cold == []


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 1000))
def test_cold_items_only_after_training_boundary(seed):
    spec = SyntheticSpec(**SMALL)
    ds = gen_synthetic(spec, seed)
    cold = {f"i{n:05d}" for n in range(spec.n_items - spec.n_cold, spec.n_items)}
    lo = ds.boundaries[0]
    for s in ds.sequences.values():
        assert all(t >= lo for it, t in zip(s.items, s.timestamps) if it in cold)
    sp = make_splits(ds.sequences, ds.boundaries)
    assert sp.cold_items <= cold


@pytest.mark.parametrize("kw", [{"n_cold": 200}, {"n_clusters": 1}, {"seq_len_min": 2}, {"noise": 1.0},
                                {"n_users": 0}, {"n_items": 30, "n_cold": 0}])
def test_infeasible_spec(kw):
    with pytest.raises(ConfigError):
        gen_synthetic(SyntheticSpec(**{**SMALL, **kw}))


# ---------------------------------------------------------------- config


def test_config_round_trip(tmp_path):
    cfg = RunConfig().set("edit.lam", "3.5").set("decode.constrain", "true").set("data.source", "x.jsonl")
    cfg.save(tmp_path / "c.ini")
    back = RunConfig.load(tmp_path / "c.ini")
    assert back == cfg and back.hash() == cfg.hash()
    assert back.edit.lam == 3.5 and back.decode.constrain is True
    assert RunConfig().hash() != cfg.hash()


def test_partial_config_keeps_defaults():
    cfg = RunConfig.from_ini("[model]\nd_ff = 32\n")
    assert cfg.model.d_ff == 32 and cfg.model.d_model == RunConfig().model.d_model


@pytest.mark.parametrize("text", ["[nope]\nx = 1\n", "[model]\nwidth = 3\n", "[model]\nd_ff = lots\n",
                                  "[decode]\nbeam = 2\ntop_k = 5\n", "[edit]\nlam = -1\n", "not an ini"])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        RunConfig.from_ini(text)


def test_lambda_grid_and_ks_parse():
    cfg = RunConfig().set("edit.lam_grid", "1, 10,100").set("eval.ks", "5,10")
    assert cfg.lam_grid() == [1.0, 10.0, 100.0] and cfg.ks() == (5, 10)
