"""Pseudo histories for cold items and the position-wise edit requests built from them.

A cold item has no interactions before the training boundary, so its context
is borrowed: whatever users did right before interacting with one of its most
similar warm items becomes a surrogate history whose next item is the cold one.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .editor import EditSite
from .errors import DataError, InputError
from .model import BOS
from .tokenizer import SidLayout, history_tokens

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Neighbor:
    item_id: str
    similarity: float


@dataclass(frozen=True)
class PseudoPair:
    history: tuple
    cold_item: str
    neighbor: str
    similarity: float


@dataclass(frozen=True)
class EditRequest:
    position: int
    subject_history: tuple
    subject_prefix: tuple
    object_token: int
    cold_item: str

    def __post_init__(self):
        if len(self.subject_prefix) != self.position:
            raise InputError(f"prefix length {len(self.subject_prefix)} != position {self.position}")


def cosine_topk(cold, warm, k: int) -> list[Neighbor]:
    """The k warm embeddings most cosine-similar to ``cold``; ties by item_id."""
    if not warm:
        raise InputError("warm item set is empty")
    if not 1 <= k <= len(warm):
        raise InputError(f"k={k} must be in [1, {len(warm)}]")
    c = np.asarray(cold.vector, dtype=np.float64)
    c = c / np.linalg.norm(c)
    W = np.stack([np.asarray(w.vector, dtype=np.float64) for w in warm])
    W = W / np.linalg.norm(W, axis=1, keepdims=True)
    sims = W @ c
    ids = np.array([w.item_id for w in warm])
    order = np.lexsort((ids, -sims))[:k]
    return [Neighbor(str(ids[i]), float(sims[i])) for i in order]


def occurrence_index(train_sequences: dict) -> dict:
    """item_id -> list of (user_id, position) over training sequences."""
    idx: dict = {}
    for user in sorted(train_sequences):
        for t, it in enumerate(train_sequences[user]):
            idx.setdefault(it, []).append((user, t))
    return idx


def synthesize_histories(cold_item: str, neighbors, train_sequences: dict, per_item_quota: int = 4,
                         max_len: int = 20, occurrences: dict | None = None) -> list[PseudoPair]:
    """Predecessor sub-sequences of each neighbor's training occurrences.

    Candidates are ranked by neighbor similarity, then untruncated history
    length, then (user_id, position); the first ``per_item_quota`` are kept
    and truncated to their last ``max_len`` items.
    """
    if not neighbors:
        raise InputError("neighbor set is empty")
    occ = occurrences if occurrences is not None else occurrence_index(train_sequences)
    cands = []
    for rank, nb in enumerate(neighbors):
        for user, t in occ.get(nb.item_id, ()):
            if t == 0:
                continue
            cands.append((-nb.similarity, rank, -t, user, t, nb))
    cands.sort(key=lambda c: c[:5])
    out = []
    for _, _, _, user, t, nb in cands[:per_item_quota]:
        hist = train_sequences[user][:t]
        out.append(PseudoPair(tuple(hist[-max_len:]), cold_item, nb.item_id, nb.similarity))
    return out


def build_edit_requests(pairs, sid_table: dict, M: int | None = None) -> dict:
    """position -> list of EditRequest; one request per digit of each pair's target."""
    by_pos: dict = {}
    for pair in pairs:
        sid = sid_table.get(pair.cold_item)
        if sid is None:
            raise DataError(f"cold item {pair.cold_item!r} has no semantic ID")
        missing = [it for it in pair.history if it not in sid_table]
        if missing:
            raise DataError(f"history item {missing[0]!r} has no semantic ID")
        n = M if M is not None else len(sid)
        for p in range(n):
            by_pos.setdefault(p, []).append(
                EditRequest(p, tuple(pair.history), tuple(int(d) for d in sid[:p]), int(sid[p]), pair.cold_item))
    return by_pos


def prepare_knowledge(cold_embeddings, warm_embeddings, train_sequences: dict, sid_table: dict,
                      k: int = 5, per_item_quota: int = 4, max_len: int = 20):
    """Neighbors, pseudo pairs and grouped requests for every cold item.

    Returns (requests by position, pseudo pairs, cold items without any pair).
    """
    occ = occurrence_index(train_sequences)
    k = min(k, len(warm_embeddings))
    pairs, excluded = [], []
    for cold in cold_embeddings:
        nbs = cosine_topk(cold, warm_embeddings, k)
        got = synthesize_histories(cold.item_id, nbs, train_sequences, per_item_quota, max_len, occ)
        if not got:
            excluded.append(cold.item_id)
            continue
        pairs.extend(got)
    if excluded:
        log.warning("%d cold items have no pseudo history and are excluded from editing", len(excluded))
    return build_edit_requests(pairs, sid_table), pairs, excluded


def request_site(req: EditRequest, sid_table: dict, layout: SidLayout, window: int | None = None) -> EditSite:
    enc = history_tokens(req.subject_history, sid_table, layout, window)
    dec = [BOS] + [layout.token(q, d) for q, d in enumerate(req.subject_prefix)]
    return EditSite(enc, dec, layout.token(req.position, req.object_token), req.position)


def request_sites(requests_by_position: dict, sid_table: dict, layout: SidLayout, window: int | None = None) -> dict:
    return {p: [request_site(r, sid_table, layout, window) for r in reqs] for p, reqs in requests_by_position.items()}


def write_requests(requests_by_position: dict, path):
    with open(path, "w") as fh:
        for p in sorted(requests_by_position):
            for r in requests_by_position[p]:
                fh.write(json.dumps({"position": r.position, "history": list(r.subject_history),
                                     "prefix": list(r.subject_prefix), "object": r.object_token,
                                     "cold_item_id": r.cold_item}) + "\n")


def read_requests(path) -> dict:
    by_pos: dict = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                r = EditRequest(int(d["position"]), tuple(d["history"]), tuple(int(x) for x in d["prefix"]),
                                int(d["object"]), str(d["cold_item_id"]))
            except (ValueError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{n}: malformed edit request ({e})") from None
            by_pos.setdefault(r.position, []).append(r)
    return by_pos
