"""Gated forward passes, beam search against exhaustive enumeration, and candidate parsing."""
import itertools
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sidedit.decoding import (INVALID, SidTrie, beam_generate, beam_search, gated_forward, parse_candidates,
                              write_recommendations)
from sidedit.editor import BundleEntry, EditBundle
from sidedit.errors import InputError
from sidedit.model import BOS
from sidedit.tokenizer import SidLayout
from tests.conftest import tiny_model


def _log_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    return x - x.max() - np.log(np.exp(x - x.max()).sum())


def brute_force(model, layout, enc, bundle=None, mode="one-one"):
    """Every digit sequence scored by full (uncached) gated forward passes."""
    out = []
    for sid in itertools.product(range(layout.K), repeat=layout.M):
        dec = [BOS] + layout.sid_tokens(sid)
        score = 0.0
        for p in range(layout.M):
            lp = _log_softmax(gated_forward(model, bundle, enc, dec, p, mode))
            score += lp[layout.token(p, sid[p])]
        out.append((sid, score))
    return sorted(out, key=lambda x: (-x[1], x[0]))


def toy_bundle(rng, d_model=8, d_ff=8, positions=(1,), layer=1, n_positions=2):
    return EditBundle("h", {p: BundleEntry(layer, rng.normal(size=(d_model, d_ff)), 1.0, 1) for p in positions},
                      n_positions)


def beam_oracle_mismatch(seed=0, with_bundle=True):
    """Largest score gap between beam-4 and exhaustive ranking on 2 tokens x 2 positions; None if orders differ."""
    layout = SidLayout(2, 2)
    model = tiny_model(vocab=layout.vocab_size, seed=seed)
    rng = np.random.default_rng(seed)
    bundle = toy_bundle(rng) if with_bundle else None
    enc = [BOS] + layout.sid_tokens((1, 0))
    got = beam_search(model, layout, [enc], beam_width=4, top_k=4, bundle=bundle)[0]
    want = brute_force(model, layout, enc, bundle)
    if [s for s, _ in got] != [s for s, _ in want]:
        return None
    return max(abs(a - b) for (_, a), (_, b) in zip(got, want))


@pytest.mark.parametrize("with_bundle", [False, True])
@pytest.mark.parametrize("seed", range(4))
def test_beam_matches_exhaustive_enumeration(seed, with_bundle):
    gap = beam_oracle_mismatch(seed, with_bundle)
    assert gap is not None and gap <= 1e-9


def test_full_width_beam_is_exact_on_larger_toy(rng):
    layout = SidLayout(3, 3)
    model = tiny_model(vocab=layout.vocab_size, seed=5)
    bundle = EditBundle("h", {0: BundleEntry(0, rng.normal(size=(8, 8)), 1.0, 1),
                              2: BundleEntry(0, rng.normal(size=(8, 8)), 1.0, 1)}, 3)
    enc = [BOS] + layout.sid_tokens((2, 1, 0))
    got = beam_search(model, layout, [enc], beam_width=27, top_k=5, bundle=bundle)[0]
    want = brute_force(model, layout, enc, bundle)[:5]
    assert [s for s, _ in got] == [s for s, _ in want]
    np.testing.assert_allclose([s for _, s in got], [s for _, s in want], atol=1e-9)


def test_width_one_is_greedy(rng):
    layout = SidLayout(3, 4)
    model = tiny_model(vocab=layout.vocab_size, seed=2)
    bundle = toy_bundle(rng, positions=(0, 2), n_positions=3)
    enc = [BOS] + layout.sid_tokens((3, 1, 2))
    dec, sid = [BOS], []
    for p in range(3):
        logits = gated_forward(model, bundle, enc, dec + [0] * (3 - p), p)
        d = int(np.argmax(logits[layout.token(p, 0) : layout.token(p, 0) + 4]))
        sid.append(d)
        dec.append(layout.token(p, d))
    ((got, _),) = beam_generate(model, layout, bundle, enc, beam_width=1, top_k=1)
    assert got == tuple(sid)


def test_ties_broken_by_token_sequence():
    layout = SidLayout(2, 2)
    model = tiny_model(vocab=layout.vocab_size)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    got = beam_generate(model, layout, None, [BOS], beam_width=4, top_k=4)
    assert [s for s, _ in got] == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_beam_is_deterministic_and_batch_independent(rng):
    layout = SidLayout(3, 4)
    model = tiny_model(vocab=layout.vocab_size, seed=1)
    encs = [[BOS] + layout.sid_tokens(tuple(rng.integers(0, 4, 3))) for _ in range(5)]
    a = beam_search(model, layout, encs, beam_width=6, top_k=4, chunk_size=2)
    b = beam_search(model, layout, encs, beam_width=6, top_k=4, chunk_size=5)
    c = [beam_generate(model, layout, None, e, beam_width=6, top_k=4) for e in encs]
    assert [[s for s, _ in x] for x in a] == [[s for s, _ in x] for x in b] == [[s for s, _ in x] for x in c]
    np.testing.assert_allclose([[v for _, v in x] for x in a], [[v for _, v in x] for x in c], atol=1e-5)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 8), st.integers(0, 4))
def test_beam_output_invariants(seed, top_k, extra):
    layout = SidLayout(3, 3)
    model = tiny_model(vocab=layout.vocab_size, seed=seed % 7)
    enc = [BOS] + layout.sid_tokens((seed % 3, 1, 2))
    out = beam_generate(model, layout, None, enc, beam_width=top_k + extra, top_k=top_k)
    scores = [s for _, s in out]
    assert len(out) <= top_k and all(b <= a for a, b in zip(scores, scores[1:]))
    assert len({s for s, _ in out}) == len(out)


def test_beam_width_below_top_k_rejected():
    layout = SidLayout(2, 2)
    with pytest.raises(InputError):
        beam_generate(tiny_model(vocab=layout.vocab_size), layout, None, [BOS], beam_width=2, top_k=3)


# ---------------------------------------------------------------- gating


def gate_exactness_holds(seed=0):
    """Logits at positions without an entry equal the base model's bit for bit."""
    layout = SidLayout(4, 2)
    model = tiny_model(vocab=layout.vocab_size, seed=seed)
    rng = np.random.default_rng(seed)
    bundle = toy_bundle(rng, positions=(1, 3), n_positions=4)
    enc = [BOS] + layout.sid_tokens((1, 0, 1, 1))
    dec = [BOS] + layout.sid_tokens((0, 1, 1, 0))
    ok = True
    for p in (0, 2):
        gated = gated_forward(model, bundle, enc, dec, p)
        base = gated_forward(model, None, enc, dec, p)
        ok &= np.array_equal(gated, base)
    edited = gated_forward(model, bundle, enc, dec, 1)
    return ok and not np.array_equal(edited, gated_forward(model, None, enc, dec, 1))


def test_gate_closed_positions_are_bit_identical():
    assert all(gate_exactness_holds(s) for s in range(3))


def test_gated_beam_matches_base_where_gate_closed(rng):
    # with an entry only at the last position, the surviving prefixes after step 0 are those of the base
    layout = SidLayout(2, 3)
    model = tiny_model(vocab=layout.vocab_size, seed=3)
    enc = [BOS] + layout.sid_tokens((2, 2))
    empty = EditBundle("h", {}, 2)
    base = beam_generate(model, layout, None, enc, beam_width=9, top_k=9)
    assert beam_generate(model, layout, empty, enc, beam_width=9, top_k=9) == base
    assert beam_generate(model, layout, toy_bundle(rng), enc, beam_width=9, top_k=9, mode="off") == base


def test_all_on_differs_from_one_one(rng):
    layout = SidLayout(2, 2)
    model = tiny_model(vocab=layout.vocab_size)
    bundle = toy_bundle(rng, positions=(1,))
    enc, dec = [BOS, 4], [BOS, 5]
    a = gated_forward(model, bundle, enc, dec, 0, mode="one-one")
    b = gated_forward(model, bundle, enc, dec, 0, mode="all-on")
    assert np.array_equal(a, gated_forward(model, None, enc, dec, 0)) and not np.array_equal(a, b)
    with pytest.raises(InputError):
        gated_forward(model, bundle, enc, dec, 0, mode="sometimes")


def test_position_out_of_range(rng):
    model = tiny_model()
    with pytest.raises(InputError):
        gated_forward(model, toy_bundle(rng), [BOS], [BOS, 4, 5], 2)
    with pytest.raises(InputError):
        gated_forward(model, None, [BOS], [BOS], 1)


# ---------------------------------------------------------------- trie and parsing


def test_constrained_decoding_emits_only_catalog_sids():
    layout = SidLayout(3, 4)
    catalog = {(0, 1, 2): "a", (3, 3, 0): "b", (0, 2, 1): "c"}
    trie = SidTrie(catalog, 4)
    for seed in range(3):
        model = tiny_model(vocab=layout.vocab_size, seed=seed)
        out = beam_generate(model, layout, None, [BOS, 5], beam_width=8, top_k=8, trie=trie)
        assert len(out) == 3 and {s for s, _ in out} == set(catalog)
        assert INVALID not in parse_candidates(out, catalog).items()


def test_parse_marks_invalid_and_dedupes():
    table = {(0, 1): "a", (1, 1): "b"}
    rl = parse_candidates([((0, 1), -0.1), ((1, 0), -0.5), ((1, 1), -0.7), ((1, 0), -0.9)], table, "u")
    assert rl.candidates == [("a", -0.1), (INVALID, -0.5), ("b", -0.7), (INVALID, -0.9)]
    assert len(rl.sequences) == 4
    # an item reached twice keeps only its first (best) slot
    assert parse_candidates([((0, 1), -0.1), ((0, 1), -0.2)], table).items() == ["a"]


def test_recommendation_dump(tmp_path):
    rl = parse_candidates([((0, 1), -0.25), ((1, 0), -0.5)], {(0, 1): "a"}, "u7")
    write_recommendations([rl], tmp_path / "r.jsonl")
    assert json.loads((tmp_path / "r.jsonl").read_text()) == {"user_id": "u7", "items": [["a", -0.25], [INVALID, -0.5]]}
