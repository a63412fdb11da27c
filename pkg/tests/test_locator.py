"""Linear probes and per-position layer selection."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sidedit.editor import EditSite
from sidedit.errors import InputError
from sidedit.locator import (LayerChoice, ProbeDataset, build_probe_dataset, build_probe_datasets, locate,
                             probes_table, read_probes, select_layers, train_probe, write_probes)
from sidedit.model import BOS, capture_activations
from tests.conftest import tiny_model


def separable_toy(rng, n=200):
    x0 = rng.uniform(-3, -1.01, size=(n // 2, 2))
    x1 = rng.uniform(1.01, 3, size=(n // 2, 2))
    X = np.concatenate([x0, x1])
    X[:, 1] = rng.normal(size=n)  # only the first coordinate separates
    return ProbeDataset(0, 0, X, np.r_[np.zeros(n // 2), np.ones(n // 2)])


def permutation_null(seed, n=200, d=16):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = rng.permutation(np.r_[np.zeros(n // 2), np.ones(n // 2)])
    return ProbeDataset(0, 0, X, y)


def test_separable_toy_reaches_full_accuracy(rng):
    assert train_probe(separable_toy(rng), seed=0).validation_accuracy == 1.0


def test_permutation_null_is_near_chance():
    accs = [train_probe(permutation_null(s), seed=s).validation_accuracy for s in range(5)]
    assert all(0.35 <= a <= 0.65 for a in accs), accs


def test_zero_init_predicts_one_half(rng):
    ds = separable_toy(rng)
    res = train_probe(ds, steps=0)
    np.testing.assert_array_equal(res.predict_proba(ds.X), 0.5)


def test_probe_is_deterministic(rng):
    ds = permutation_null(3)
    a, b = train_probe(ds, seed=7), train_probe(ds, seed=7)
    assert a.validation_accuracy == b.validation_accuracy and np.array_equal(a.theta, b.theta)


def test_single_class_dataset_rejected():
    with pytest.raises(InputError):
        ProbeDataset(0, 0, np.zeros((4, 2)), np.ones(4))


def test_single_class_training_split_errors_after_resample():
    # a one-sample training split is single-class on both draws
    ds = ProbeDataset(0, 0, np.arange(10.0)[:, None], np.r_[np.zeros(5), np.ones(5)])
    with pytest.raises(InputError):
        train_probe(ds, split_ratio=0.1, seed=0)


# ---------------------------------------------------------------- selection


def test_argmax_selection():
    assert select_layers({(0, 0): 0.6, (0, 1): 0.9, (0, 2): 0.7})[0].layer == 1


def test_tie_goes_to_shallower_layer():
    assert select_layers({(0, 3): 0.8, (0, 1): 0.8, (0, 2): 0.5})[0].layer == 1


def test_single_layer_position():
    assert select_layers({(2, 4): 0.1}) == {2: LayerChoice(2, 4, 0.1)}


# accuracies are fractions of a validation split; arbitrary floats would let rounding in v * c create ties
_accuracy = st.integers(0, 200).map(lambda k: k / 200)


@settings(max_examples=50)
@given(st.dictionaries(st.tuples(st.integers(0, 3), st.integers(0, 5)), _accuracy, min_size=1),
       st.floats(0.01, 100))
def test_argmax_invariant_to_positive_scaling(acc, c):
    a = {p: x.layer for p, x in select_layers(acc).items()}
    b = {p: x.layer for p, x in select_layers({k: v * c for k, v in acc.items()}).items()}
    assert a == b


# ---------------------------------------------------------------- datasets from a model


def _sites(rng, n, position, vocab=12):
    out = []
    for _ in range(n):
        enc = [BOS] + list(rng.integers(4, vocab, size=3))
        dec = [BOS] + list(rng.integers(4, vocab, size=position))
        out.append(EditSite(enc, dec, int(rng.integers(4, vocab)), position))
    return out


def test_dataset_counts_and_label_one_keys(rng):
    model = tiny_model()
    req, orig = _sites(rng, 3, 1), _sites(rng, 10, 1)
    ds = build_probe_dataset(model, req, orig, layer=1, n=3, seed=0)
    assert ds.X.shape == (6, 8) and ds.y.tolist() == [1, 1, 1, 0, 0, 0]
    for i, s in enumerate(req):
        (cap,) = capture_activations(model, s.enc_tokens, s.dec_tokens, [(1, 1)])
        np.testing.assert_allclose(ds.X[i], cap.key, atol=1e-12)
    again = build_probe_dataset(model, req, orig, layer=1, n=3, seed=0)
    assert np.array_equal(ds.X, again.X)


def test_dataset_errors(rng):
    model = tiny_model()
    with pytest.raises(InputError):
        build_probe_datasets(model, [], _sites(rng, 3, 0), [0])
    with pytest.raises(InputError):
        build_probe_datasets(model, _sites(rng, 3, 0), _sites(rng, 3, 0), [0], n=0)


def test_low_separability_logs_warning(rng, caplog):
    # random requests against random originals: probes stay near chance
    model = tiny_model()
    req = {0: _sites(rng, 20, 0)}
    orig = {0: _sites(rng, 40, 0)}
    with caplog.at_level("WARNING", logger="sidedit.locator"):
        choices, _ = locate(model, req, orig, seed=0)
    assert choices[0].validation_accuracy < 0.7
    assert any("position 0" in r.getMessage() for r in caplog.records)


def test_locate_and_report_files(tmp_path, rng):
    model = tiny_model()
    req = {p: _sites(rng, 20, p) for p in range(2)}
    orig = {p: _sites(rng, 40, p) for p in range(2)}
    choices, acc = locate(model, req, orig, seed=3)
    assert set(choices) == {0, 1} and set(acc) == {(p, l) for p in range(2) for l in range(2)}
    assert choices == locate(model, req, orig, seed=3)[0]
    write_probes(choices, acc, tmp_path / "p.jsonl")
    back_choices, back_acc = read_probes(tmp_path / "p.jsonl")
    assert back_choices == {p: LayerChoice(c.position, c.layer, round(c.validation_accuracy, 6)) for p, c in choices.items()}
    assert "pos layer" in probes_table(choices, acc)
