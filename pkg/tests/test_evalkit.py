"""Splits, ranking metrics and prefix diagnostics."""
import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sidedit.data import InteractionSequence
from sidedit.decoding import INVALID, RankedList
from sidedit.errors import DataError, InputError
from sidedit.evalkit import (Example, iid_ratio_at_k, item_pools, make_splits, ndcg_at_k, prefix_ndcg,
                             prefix_ndcg_values, recall_at_k, score_lists, write_timing_csv)

# ---------------------------------------------------------------- metrics


def test_ndcg_examples():
    assert ndcg_at_k(["a", "b"], "a", 10) == 1.0
    assert ndcg_at_k(["x", "a"], "a", 10) == pytest.approx(0.6309, abs=1e-4)
    assert ndcg_at_k(["x", "a"], "a", 10) == pytest.approx(1 / math.log2(3), rel=1e-15)
    assert ndcg_at_k(["x", "y"], "a", 10) == 0.0
    assert ndcg_at_k(["x", "a"], "a", 1) == 0.0


def test_recall_examples():
    ranked = [f"i{r}" for r in range(12)]
    assert recall_at_k(ranked, "i0", 10) == 1.0
    assert recall_at_k(ranked, "i10", 10) == 0.0
    assert recall_at_k(ranked, "i11", len(ranked)) == 1.0
    with pytest.raises(InputError):
        recall_at_k(ranked, "i0", 0)
    with pytest.raises(InputError):
        ndcg_at_k(ranked, "i0", 0)


def test_invalid_markers_keep_their_rank_slot():
    assert recall_at_k([INVALID, INVALID, "a"], "a", 2) == 0.0
    assert ndcg_at_k([INVALID, INVALID, "a"], "a", 10) == pytest.approx(0.5)


def test_iid_ratio_examples():
    pool = {f"p{i}" for i in range(100)}
    top = [f"p{i}" for i in range(7)] + ["x1", "x2", "x3"]
    assert iid_ratio_at_k([top], pool, 10, "paper") == pytest.approx(0.07)
    assert iid_ratio_at_k([top], pool, 10, "share") == pytest.approx(0.7)
    assert iid_ratio_at_k([["x"] * 10], pool, 10, "paper") == 0.0
    small = {f"p{i}" for i in range(10)}
    full = sorted(small)
    assert iid_ratio_at_k([full], small, 10, "paper") == iid_ratio_at_k([full], small, 10, "share") == 1.0
    with pytest.raises(InputError):
        iid_ratio_at_k([top], set(), 10)
    with pytest.raises(InputError):
        iid_ratio_at_k([top], pool, 10, "other")


@settings(max_examples=100)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=25, unique=True), st.integers(0, 30))
def test_metrics_non_decreasing_in_k(ranked, target):
    ks = [1, 5, 10, 20, 50]
    for f in (ndcg_at_k, recall_at_k):
        vals = [f(ranked, target, k) for k in ks]
        assert all(0.0 <= v <= 1.0 for v in vals)
        assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_prefix_ndcg_full_length_equals_ndcg():
    seqs = [[(1, 2), (1, 3), (0, 0)], [(2, 2), (3, 3)]]
    targets = [(1, 3), (0, 1)]
    want = np.mean([ndcg_at_k([(1, 2), (1, 3), (0, 0)], (1, 3), 10), 0.0])
    assert prefix_ndcg_values(seqs, targets, 2) == pytest.approx(want)
    # first digit: (1,) at rank 1 for the first example, nothing for the second
    assert prefix_ndcg_values(seqs, targets, 1) == pytest.approx(0.5)


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=10),
       st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 2)))
def test_prefix_hits_are_monotone(ranked, target):
    # a hit at prefix length n implies a hit at every shorter prefix
    hits = [prefix_ndcg_values([ranked], [target], n, k=len(ranked)) > 0 for n in (1, 2, 3)]
    assert all(a or not b for a, b in zip(hits, hits[1:]))


def test_prefix_ndcg_from_decoded_lists():
    ex = Example("u", ("a",), "t")
    rl = RankedList("u", [("z", -1.0)], [(4, 4), (1, 0)])
    got = prefix_ndcg({ex: rl}, [ex], {"t": (1, 1), "a": (0, 0)}, 2)
    assert got == {1: pytest.approx(1 / math.log2(3)), 2: 0.0}
    assert prefix_ndcg({}, [], {}, 3) == {1: 0.0, 2: 0.0, 3: 0.0}


def test_score_lists_report(tmp_path):
    ex = [Example("u1", ("a",), "a"), Example("u2", ("a",), "c")]
    ranked = {ex[0]: ["b", "a"], ex[1]: ["c", INVALID]}
    pools = {"overall": {"a", "b", "c"}, "warm": {"a", "b"}, "cold": {"c"}}
    rep = score_lists(ranked, {"overall": ex, "warm": ex[:1], "cold": ex[1:]}, pools, ks=(1, 2))
    assert rep.get("warm", 2, "ndcg") == pytest.approx(1 / math.log2(3))
    assert rep.get("cold", 1, "recall") == 1.0
    assert rep.get("overall", 2, "iid_share") == pytest.approx(0.75)
    assert rep.counts == {"overall": 2, "warm": 1, "cold": 1}
    rep.to_csv(tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["split", "K", "metric", "value"] and len(rows) == 1 + len(rep.values)
    assert "cold" in rep.table()
    write_timing_csv([("edit", "total", 1.5, 0.1), ("retrain", "total", 15.0, None)], tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[1:] == ["edit,total,1.5000,0.1000", "retrain,total,15.0000,"]


def test_metrics_are_deterministic():
    ex = [Example(f"u{i}", (), f"i{i % 3}") for i in range(6)]
    ranked = {e: [f"i{(j + k) % 4}" for k in range(4)] for j, e in enumerate(ex)}
    a = score_lists(ranked, {"overall": ex}, {"overall": {"i0", "i1"}})
    b = score_lists(dict(reversed(list(ranked.items()))), {"overall": ex}, {"overall": {"i0", "i1"}})
    assert a.values == b.values


# ---------------------------------------------------------------- splits


def _seq(user, items, ts):
    return InteractionSequence(user, list(items), list(ts))


def toy_sequences():
    return {
        "u1": _seq("u1", "abcd", [1, 2, 6, 9]),  # c valid, d test
        "u2": _seq("u2", "abe", [1, 3, 9.5]),  # e only after the train boundary
        "u3": _seq("u3", "ab", [1, 2]),  # no test interaction: dropped
    }


def test_split_protocol():
    sp = make_splits(toy_sequences(), (5, 8))
    assert sp.train == {"u1": ["a", "b"], "u2": ["a", "b"]}
    assert sp.valid == [Example("u1", ("a", "b"), "c")]
    assert set(sp.test) == {Example("u1", ("a", "b", "c"), "d"), Example("u2", ("a", "b"), "e")}
    assert sp.cold_items == {"d", "e"} and sp.warm_items == {"a", "b"}
    assert sp.test_warm == [] and sp.cold_fraction == 1.0


def test_split_hygiene_on_synthetic_corpus():
    from sidedit.data import SyntheticSpec, gen_synthetic

    ds = gen_synthetic(SyntheticSpec(n_items=200, n_cold=20, n_users=300, n_clusters=4), seed=1)
    sp = make_splits(ds.sequences, ds.boundaries)
    lo, hi = ds.boundaries
    for u, items in sp.train.items():
        s = ds.sequences[u]
        assert items == [it for it, t in zip(s.items, s.timestamps) if t < lo]
    train_targets = {e.target for e in sp.train_examples()}
    assert not (sp.cold_items & train_targets) and not (sp.cold_items & sp.warm_items)
    assert set(sp.test_cold) | set(sp.test_warm) == set(sp.test) and not set(sp.test_cold) & set(sp.test_warm)
    parts = sp.partition(sp.test)
    assert len(parts["warm"]) + len(parts["cold"]) == len(parts["overall"])
    assert item_pools(sp)["cold"] == sp.cold_items


def test_empty_test_split():
    with pytest.raises(DataError):
        make_splits(toy_sequences(), (50, 100))
    with pytest.raises(InputError):
        make_splits(toy_sequences(), (8, 5))
