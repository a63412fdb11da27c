"""Interaction datasets: JSON-lines ingestion and a synthetic catalog generator.

Synthetic catalogs are built so that cold-start collapse is guaranteed to be
reproducible: every cold item is a newer sibling of a warm "anchor" item
(similar title, same successors) that only shows up after the training
boundary, taking over part of its anchor's traffic.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


@dataclass
class InteractionSequence:
    user_id: str
    items: list
    timestamps: list

    def __post_init__(self):
        if len(self.items) != len(self.timestamps):
            raise DataError(f"user {self.user_id}: items/timestamps length mismatch")
        if any(b < a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise DataError(f"user {self.user_id}: timestamps not sorted")


@dataclass
class Dataset:
    sequences: dict  # user_id -> InteractionSequence
    items: dict  # item_id -> title text
    skipped: int = 0
    boundaries: tuple | None = None  # (valid_start, test_start) when known


def ingest_jsonl(path) -> Dataset:
    """Read ``{"user_id", "item_id", "timestamp", "title"}`` lines.

    Malformed lines are counted and skipped; duplicate (user, item, timestamp)
    triples keep the first occurrence; each user's interactions are sorted by
    timestamp, earliest first.
    """
    rows: dict = {}
    seen = set()
    titles: dict = {}
    skipped = 0
    order = 0
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                user, item = str(rec["user_id"]), str(rec["item_id"])
                ts = float(rec["timestamp"])
                title = str(rec["title"]).strip()
                if not user or not item or not title or not np.isfinite(ts):
                    raise ValueError("empty field")
            except (ValueError, KeyError, TypeError):
                skipped += 1
                continue
            key = (user, item, ts)
            if key in seen:
                continue
            seen.add(key)
            titles.setdefault(item, title)
            rows.setdefault(user, []).append((ts, order, item))
            order += 1
    if not rows:
        raise DataError(f"{path}: no valid interaction lines ({skipped} malformed)")
    seqs = {}
    for user, recs in rows.items():
        recs.sort()
        seqs[user] = InteractionSequence(user, [r[2] for r in recs], [r[0] for r in recs])
    if skipped:
        log.warning("%s: skipped %d malformed lines", path, skipped)
    return Dataset(seqs, titles, skipped)


def write_jsonl(dataset: Dataset, path):
    with open(path, "w") as fh:
        for user in sorted(dataset.sequences, key=_natural):
            s = dataset.sequences[user]
            for item, ts in zip(s.items, s.timestamps):
                fh.write(json.dumps({"user_id": user, "item_id": item, "timestamp": ts, "title": dataset.items[item]}))
                fh.write("\n")


def _natural(s: str):
    head = s.rstrip("0123456789")
    tail = s[len(head) :]
    return (head, int(tail) if tail else -1)


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    n_items: int = 2000
    n_cold: int = 200
    n_users: int = 5000
    seq_len_min: int = 5
    seq_len_max: int = 10
    n_clusters: int = 8
    noise: float = 0.1
    horizon: float = 1000.0
    n_successors: int = 3
    takeover: float = 0.7
    subclusters: int = 10
    sub_follow: float = 0.8

    def validate(self):
        if not 0 <= self.n_cold < self.n_items:
            raise ConfigError("need 0 <= n_cold < n_items")
        if self.n_clusters < 2:
            raise ConfigError("need at least 2 latent clusters")
        if self.seq_len_min < 3 or self.seq_len_max < self.seq_len_min:
            raise ConfigError("sequence lengths must satisfy 3 <= min <= max")
        if (self.n_items - self.n_cold) < self.n_clusters * self.subclusters:
            raise ConfigError("too few warm items for the cluster layout")
        if not 0 <= self.noise < 1 or not 0 <= self.takeover <= 1 or not 0 <= self.sub_follow <= 1:
            raise ConfigError("noise must be in [0,1), takeover and sub_follow in [0,1]")
        if self.n_users < 1:
            raise ConfigError("need at least one user")
        return self

    @property
    def boundaries(self) -> tuple:
        return (0.8 * self.horizon, 0.9 * self.horizon)


_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]


def _words(rng, n, taken):
    out = []
    while len(out) < n:
        w = "".join(rng.choice(_SYLLABLES, size=int(rng.integers(2, 4))))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def gen_synthetic(spec: SyntheticSpec, seed: int = 0) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(seed)
    taken: set = set()
    n_warm = spec.n_items - spec.n_cold
    C, S = spec.n_clusters, spec.subclusters

    cluster_words = [_words(rng, 4, taken) for _ in range(C)]
    sub_words = [[_words(rng, 3, taken) for _ in range(S)] for _ in range(C)]
    cluster_of = np.arange(n_warm) % C
    sub_of = rng.integers(0, S, size=n_warm)
    own_words = [_words(rng, 3, taken) for _ in range(n_warm)]
    titles = []
    head_words = []
    for i in range(n_warm):
        g, s = cluster_of[i], sub_of[i]
        head_words.append(list(rng.choice(cluster_words[g], 2, replace=False)) + list(sub_words[g][s][:2]))
        titles.append(" ".join(head_words[i] + own_words[i]))

    # item popularity (Zipf within cluster) and cluster-level Markov structure
    pop = 1.0 / (1.0 + rng.permutation(n_warm) % (n_warm // C)) ** 0.8
    trans = np.full((C, C), 0.1 / (C - 2))
    for g in range(C):
        trans[g, g] = 0.45
        trans[g, (g + 1) % C] = 0.45
    members = [np.flatnonzero(cluster_of == g) for g in range(C)]
    sub_members = {(g, s): np.flatnonzero((cluster_of == g) & (sub_of == s)) for g in range(C) for s in range(S)}
    # each subcluster mostly feeds one fixed subcluster of the chosen next cluster
    sub_map = rng.integers(0, S, size=(C, S, C))
    succ = np.empty((n_warm, spec.n_successors), dtype=np.int64)
    for i in range(n_warm):
        for j in range(spec.n_successors):
            g = rng.choice(C, p=trans[cluster_of[i]])
            m = members[g]
            if rng.random() < spec.sub_follow:
                sm = sub_members[(g, int(sub_map[cluster_of[i], sub_of[i], g]))]
                if len(sm) > spec.n_successors:
                    m = sm
            while True:
                cand = int(rng.choice(m, p=pop[m] / pop[m].sum()))
                if cand != i and cand not in succ[i, :j]:
                    break
            succ[i, j] = cand
    succ_w = np.array([0.6, 0.3, 0.1][: spec.n_successors] + [0.05] * max(0, spec.n_successors - 3))
    succ_w /= succ_w.sum()
    global_p = pop / pop.sum()

    # stationary traffic decides which warm items get a newer sibling
    P = np.zeros((n_warm, n_warm))
    for i in range(n_warm):
        P[i, succ[i]] += (1 - spec.noise) * succ_w
    P += spec.noise * global_p[None, :]
    pi = global_p.copy()
    for _ in range(60):
        pi = pi @ P
    anchors = rng.choice(n_warm, size=spec.n_cold, replace=False, p=pi / pi.sum()) if spec.n_cold else np.array([], int)
    sibling_of_anchor = {int(a): n_warm + k for k, a in enumerate(anchors)}
    anchor_of = {n_warm + k: int(a) for k, a in enumerate(anchors)}
    new_words = _words(rng, spec.n_cold, taken)
    for k, a in enumerate(anchors):
        titles.append(" ".join(head_words[a] + [own_words[a][0], own_words[a][1], new_words[k]]))

    item_ids = [f"i{n:05d}" for n in range(spec.n_items)]
    lo, hi = spec.boundaries

    def step(cur, post):
        base = anchor_of.get(cur, cur)
        if rng.random() < spec.noise:
            nxt = int(rng.choice(n_warm, p=global_p))
        else:
            nxt = int(succ[base, rng.choice(spec.n_successors, p=succ_w)])
        if post and nxt in sibling_of_anchor and rng.random() < spec.takeover:
            nxt = sibling_of_anchor[nxt]
        return nxt

    raw = []
    for u in range(spec.n_users):
        n = int(rng.integers(spec.seq_len_min, spec.seq_len_max + 1))
        cur = int(rng.choice(n_warm, p=global_p))
        items = [cur]
        for t in range(1, n):
            cur = step(cur, post=t >= n - 2)
            items.append(cur)
        ts = sorted(np.round(rng.uniform(0, lo, size=n - 2), 3).tolist())
        ts += [round(float(rng.uniform(lo, hi)), 3), round(float(rng.uniform(hi, spec.horizon)), 3)]
        raw.append((items, ts))

    # a warm item first reached after the boundary would count as cold; send such
    # visits to the most popular already-seen item of its subcluster (or cluster)
    seen = {i for items, ts in raw for i, t in zip(items, ts) if t < lo}
    by_pop = np.argsort(-pop, kind="stable")
    stand_in = {}
    for i in sorted(set(range(n_warm)) - seen):
        same_sub = [j for j in by_pop if j in seen and cluster_of[j] == cluster_of[i] and sub_of[j] == sub_of[i]]
        same_cluster = [j for j in by_pop if j in seen and cluster_of[j] == cluster_of[i]]
        if same_sub or same_cluster:
            stand_in[i] = int((same_sub or same_cluster)[0])
    seqs = {}
    for u, (items, ts) in enumerate(raw):
        uid = f"u{u:05d}"
        seqs[uid] = InteractionSequence(uid, [item_ids[stand_in.get(i, i)] for i in items], ts)
    return Dataset(seqs, dict(zip(item_ids, titles)), 0, spec.boundaries)


def write_synthetic(spec: SyntheticSpec, seed: int, out_dir) -> Path:
    """Generate and write ``interactions.jsonl`` plus ``boundaries.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = gen_synthetic(spec, seed)
    write_jsonl(ds, out / "interactions.jsonl")
    (out / "boundaries.json").write_text(json.dumps({"valid_start": ds.boundaries[0], "test_start": ds.boundaries[1]}) + "\n")
    return out / "interactions.jsonl"
