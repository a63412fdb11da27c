"""Time-based splits, ranking metrics and cold/warm diagnostics."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, InputError

DEFAULT_KS = (10, 20, 50)
SPLITS = ("overall", "warm", "cold")


@dataclass(frozen=True)
class Example:
    user_id: str
    history: tuple
    target: str


@dataclass
class SplitSpec:
    train: dict  # user_id -> list of item_ids (time ordered)
    valid: list  # Examples
    test: list
    warm_items: set
    cold_items: set
    test_warm: list = field(default_factory=list)
    test_cold: list = field(default_factory=list)

    @property
    def cold_fraction(self) -> float:
        return len(self.test_cold) / len(self.test) if self.test else 0.0

    def train_examples(self) -> list[Example]:
        out = []
        for user, items in self.train.items():
            for t in range(1, len(items)):
                out.append(Example(user, tuple(items[:t]), items[t]))
        return out

    def partition(self, examples) -> dict:
        """overall/warm/cold views of a list of examples."""
        return {
            "overall": list(examples),
            "warm": [e for e in examples if e.target in self.warm_items],
            "cold": [e for e in examples if e.target not in self.warm_items],
        }


def make_splits(sequences: dict, time_boundaries) -> SplitSpec:
    """Partition interactions by timestamp into train / valid / test.

    Only users with at least one test interaction are kept. Valid and test
    examples carry every earlier interaction of the user as history.
    """
    valid_start, test_start = time_boundaries
    if test_start < valid_start:
        raise InputError("test boundary precedes validation boundary")
    train, valid, test = {}, [], []
    for user in sorted(sequences):
        s = sequences[user]
        if not s.timestamps or s.timestamps[-1] < test_start:
            continue
        tr = [it for it, ts in zip(s.items, s.timestamps) if ts < valid_start]
        if tr:
            train[user] = tr
        for t, (it, ts) in enumerate(zip(s.items, s.timestamps)):
            if ts < valid_start:
                continue
            ex = Example(user, tuple(s.items[:t]), it)
            (valid if ts < test_start else test).append(ex)
    if not test:
        raise DataError("test split is empty: no interaction at or after the test boundary")
    warm = {it for items in train.values() for it in items}
    cold = {e.target for e in test if e.target not in warm}
    spec = SplitSpec(train, valid, test, warm, cold)
    spec.test_warm = [e for e in test if e.target in warm]
    spec.test_cold = [e for e in test if e.target not in warm]
    return spec


# ---------------------------------------------------------------- metrics


def _rank(ranked, target, k):
    for r, item in enumerate(ranked[:k], start=1):
        if item == target:
            return r
    return None


def ndcg_at_k(ranked, target, k: int) -> float:
    if k < 1:
        raise InputError("K must be >= 1")
    r = _rank(ranked, target, k)
    return 0.0 if r is None else 1.0 / math.log2(r + 1)


def recall_at_k(ranked, target, k: int) -> float:
    if k < 1:
        raise InputError("K must be >= 1")
    return 0.0 if _rank(ranked, target, k) is None else 1.0


def iid_ratio_at_k(lists, r_iid, k: int, normalization: str = "share") -> float:
    """Mean overlap of each top-K list with the split's item population.

    ``paper`` divides the overlap by |R_iid|, ``share`` by K.
    """
    r_iid = set(r_iid)
    if not r_iid:
        raise InputError("R_iid is empty")
    if normalization not in ("paper", "share"):
        raise InputError(f"unknown IID normalization {normalization!r}")
    if not lists:
        return 0.0
    denom = len(r_iid) if normalization == "paper" else k
    return float(np.mean([len(r_iid & set(lst[:k])) / denom for lst in lists]))


def prefix_ndcg_values(ranked_sids, target_sids, n: int, k: int = 10) -> float:
    """NDCG@k when items are identified by their first ``n`` digits.

    ``ranked_sids`` holds, per example, the generated digit tuples in rank
    order (invalid sequences included); repeated prefixes collapse onto
    their first occurrence.
    """
    vals = []
    for ranked, target in zip(ranked_sids, target_sids):
        prefixes = []
        for sid in ranked:
            p = tuple(sid[:n])
            if p not in prefixes:
                prefixes.append(p)
        vals.append(ndcg_at_k(prefixes, tuple(target[:n]), k))
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class MetricsReport:
    values: dict = field(default_factory=dict)  # (split, K, metric) -> value
    timing: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def get(self, split: str, k: int, metric: str) -> float:
        return self.values[(split, k, metric)]

    def rows(self):
        for (split, k, metric), v in sorted(self.values.items()):
            yield split, k, metric, v

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "K", "metric", "value"])
            for split, k, metric, v in self.rows():
                w.writerow([split, k, metric, f"{v:.6f}"])

    def table(self) -> str:
        metrics = sorted({m for _, _, m in self.values})
        ks = sorted({k for _, k, _ in self.values})
        lines = [f"{'split':8s} {'K':>3s} " + " ".join(f"{m:>15s}" for m in metrics)]
        for split in SPLITS:
            for k in ks:
                if (split, k, metrics[0]) not in self.values:
                    continue
                row = " ".join(f"{self.values.get((split, k, m), float('nan')):15.4f}" for m in metrics)
                lines.append(f"{split:8s} {k:3d} {row}")
        return "\n".join(lines)


def score_lists(ranked_items: dict, split_examples: dict, item_pools: dict, ks=DEFAULT_KS) -> MetricsReport:
    """Metrics for each split from per-example ranked item lists.

    ``ranked_items`` maps an Example to its ranked item ids (INVALID markers
    included), ``item_pools`` maps a split name to its R_iid set.
    """
    rep = MetricsReport()
    for split, examples in split_examples.items():
        rep.counts[split] = len(examples)
        if not examples:
            continue
        lists = [ranked_items[e] for e in examples]
        for k in ks:
            rep.values[(split, k, "ndcg")] = float(np.mean([ndcg_at_k(l, e.target, k) for l, e in zip(lists, examples)]))
            rep.values[(split, k, "recall")] = float(np.mean([recall_at_k(l, e.target, k) for l, e in zip(lists, examples)]))
            pool = item_pools.get(split)
            if pool:
                rep.values[(split, k, "iid_ratio_paper")] = iid_ratio_at_k(lists, pool, k, "paper")
                rep.values[(split, k, "iid_share")] = iid_ratio_at_k(lists, pool, k, "share")
    return rep


# ---------------------------------------------------------------- model evaluation


def generate_lists(model, layout, examples, sid_table: dict, *, bundle=None, mode: str = "one-one",
                   beam_width: int = 20, top_k: int = 20, window: int | None = None, trie=None) -> list:
    """Ranked item lists (RankedList) for each example's history."""
    from .decoding import beam_search, parse_candidates
    from .tokenizer import history_tokens

    sid_to_item = {tuple(v): k for k, v in sid_table.items()}
    encs = [history_tokens(e.history, sid_table, layout, window) for e in examples]
    ranked = beam_search(model, layout, encs, beam_width, top_k, bundle, mode, trie)
    return [parse_candidates(r, sid_to_item, e.user_id) for r, e in zip(ranked, examples)]


def item_pools(split: SplitSpec) -> dict:
    return {"overall": split.warm_items | split.cold_items, "warm": split.warm_items, "cold": split.cold_items}


def evaluate(model, layout, split: SplitSpec, examples, sid_table: dict, ks=DEFAULT_KS, **decode_kw):
    """Decode every example once and score the overall/warm/cold views.

    Returns (MetricsReport, {Example: RankedList}).
    """
    t = time.perf_counter()
    lists = generate_lists(model, layout, examples, sid_table, **decode_kw)
    by_ex = dict(zip(examples, lists))
    rep = score_lists({e: rl.items() for e, rl in by_ex.items()}, split.partition(examples), item_pools(split), ks)
    rep.timing["decode_seconds"] = time.perf_counter() - t
    return rep, by_ex


def prefix_ndcg(ranked_by_example: dict, examples, sid_table: dict, M: int, k: int = 10) -> dict:
    """n -> prefix-NDCG@k for n = 1..M from already decoded lists."""
    if not examples:
        return {n: 0.0 for n in range(1, M + 1)}
    seqs = [ranked_by_example[e].sequences for e in examples]
    targets = [sid_table[e.target] for e in examples]
    return {n: prefix_ndcg_values(seqs, targets, n, k) for n in range(1, M + 1)}


def write_timing_csv(rows, path):
    """rows of (arm, phase, seconds, relative)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "phase", "seconds", "relative"])
        for arm, phase, sec, rel in rows:
            w.writerow([arm, phase, f"{sec:.4f}", "" if rel is None else f"{rel:.4f}"])
