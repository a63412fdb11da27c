"""Beam decoding of semantic IDs under position-gated edits.

Gating modes:

* ``one-one`` - while the token at position p is being computed, layer l_p
  runs with W_out + dW_p; every earlier position and every other layer keeps
  base weights. A position without an edit sees the base model exactly.
* ``all-on`` - every installed update is active at every position.
* ``off`` - base model.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InputError
from .model import BOS, DecoderCache, Seq2Seq, WeightDelta, pad_batch
from .tokenizer import SidLayout

INVALID = "INVALID"
GATING_MODES = ("one-one", "all-on", "off")


@dataclass
class RankedList:
    user_id: str | None
    candidates: list  # (item_id or INVALID, score), best first
    sequences: list = field(default_factory=list)  # generated digit tuples, best first

    def items(self) -> list:
        return [c[0] for c in self.candidates]


def gate_deltas(bundle, position: int, mode: str, dtype=torch.float32) -> list:
    if mode not in GATING_MODES:
        raise InputError(f"unknown gating mode {mode!r}")
    if bundle is None or mode == "off":
        return []
    if mode == "all-on":
        return [WeightDelta(e.layer, torch.as_tensor(e.delta, dtype=dtype), None) for _, e in sorted(bundle.entries.items())]
    e = bundle.entries.get(position)
    return [] if e is None else [WeightDelta(e.layer, torch.as_tensor(e.delta, dtype=dtype), position)]


@torch.no_grad()
def gated_forward(model: Seq2Seq, bundle, enc_tokens, dec_tokens, position: int, mode: str = "one-one") -> np.ndarray:
    """Logits of the token at decoder ``position`` given ``dec_tokens[:position + 1]``."""
    n_pos = bundle.n_positions if bundle is not None else len(dec_tokens)
    if not 0 <= position < n_pos or position >= len(dec_tokens):
        raise InputError(f"decoding position {position} out of range")
    enc = torch.as_tensor([list(enc_tokens)], dtype=torch.long)
    dec = torch.as_tensor([list(dec_tokens)[: position + 1]], dtype=torch.long)
    deltas = gate_deltas(bundle, position, mode, model.cfg.dtype)
    return model(enc, dec, deltas=deltas)[0, position].cpu().numpy()


class SidTrie:
    """Allowed next digits for every catalog SID prefix."""

    def __init__(self, sids, K: int):
        self.K = K
        self.allowed: dict = {}
        for sid in sids:
            for p in range(len(sid)):
                mask = self.allowed.setdefault(tuple(sid[:p]), np.zeros(K, bool))
                mask[sid[p]] = True

    def masks(self, prefixes: np.ndarray) -> np.ndarray:
        none = np.zeros(self.K, bool)
        return np.stack([self.allowed.get(tuple(int(d) for d in row), none) for row in prefixes])


def _select(total: np.ndarray, seqs: np.ndarray, n_users: int, width: int, K: int):
    """Top ``width`` candidates per user by (-score, token sequence)."""
    rows_per_user = total.shape[0] // n_users
    n_cand = rows_per_user * K
    scores = total.reshape(n_users, n_cand)
    digit = np.tile(np.arange(K), rows_per_user)[None].repeat(n_users, 0)
    parent_local = np.repeat(np.arange(rows_per_user), K)[None].repeat(n_users, 0)
    parent = parent_local + (np.arange(n_users) * rows_per_user)[:, None]
    keys = [digit]
    for col in range(seqs.shape[1] - 1, -1, -1):
        keys.append(seqs[parent, col])
    keys.append(-scores)
    order = np.lexsort(keys, axis=-1)[:, :width]
    take = np.take_along_axis
    return take(parent, order, 1).ravel(), take(digit, order, 1).ravel(), take(scores, order, 1).ravel()


@torch.no_grad()
def beam_search(model: Seq2Seq, layout: SidLayout, enc_token_lists, beam_width: int = 20, top_k: int = 10,
                bundle=None, mode: str = "one-one", trie: SidTrie | None = None, chunk_size: int = 128):
    """Length-M beam search over SID digits for a batch of encoder inputs.

    Returns, per input, a list of ``(digit tuple, summed log-prob)`` sorted by
    score with ties broken by the token sequence.
    """
    if beam_width < top_k:
        raise InputError("beam_width must be >= top_k")
    M, K = layout.M, layout.K
    dtype = model.cfg.dtype
    gates = [gate_deltas(bundle, p, mode, dtype) for p in range(M)]
    results = []
    for start in range(0, len(enc_token_lists), chunk_size):
        chunk = enc_token_lists[start : start + chunk_size]
        B = len(chunk)
        enc_all = model.encode(pad_batch(chunk))
        enc = enc_all
        cache = DecoderCache(model.cfg.n_dec_layers)
        seqs = np.zeros((B, 0), dtype=np.int64)
        scores = np.zeros(B)
        tok = torch.full((B, 1), BOS, dtype=torch.long)
        user_of_row = np.arange(B)
        for p in range(M):
            if mode == "one-one" and gates[p]:
                logits = model.decode(enc, tok, deltas=gates[p], cache=cache, store=False)
                model.decode(enc, tok, cache=cache)
            else:
                logits = model.decode(enc, tok, deltas=gates[p], cache=cache)
            span = layout.position_tokens(p)
            logp = torch.log_softmax(logits[:, -1].double(), dim=-1)[:, span.start : span.stop].numpy()
            if trie is not None:
                logp = np.where(trie.masks(seqs), logp, -np.inf)
            total = scores[:, None] + logp
            width = min(beam_width, total.shape[0] // B * K)
            parent, digit, scores = _select(total, seqs, B, width, K)
            seqs = np.concatenate([seqs[parent], digit[:, None]], axis=1)
            user_of_row = user_of_row[parent]
            idx = torch.as_tensor(parent)
            cache = cache.select(idx)
            enc = enc_all.select(torch.as_tensor(user_of_row))
            tok = torch.as_tensor(np.asarray([layout.token(p, int(d)) for d in digit]), dtype=torch.long)[:, None]
        rows = seqs.reshape(B, -1, M)
        sc = scores.reshape(B, -1)
        for u in range(B):
            out = [(tuple(int(d) for d in rows[u, j]), float(sc[u, j])) for j in range(rows.shape[1]) if np.isfinite(sc[u, j])]
            results.append(out[:top_k])
    return results


def beam_generate(model: Seq2Seq, layout: SidLayout, bundle, history_tokens, beam_width: int = 20, top_k: int = 10,
                  mode: str = "one-one", trie: SidTrie | None = None):
    """Single-context convenience wrapper around :func:`beam_search`."""
    return beam_search(model, layout, [list(history_tokens)], beam_width, top_k, bundle, mode, trie)[0]


def parse_candidates(ranked, sid_to_item: dict, user_id=None) -> RankedList:
    """Map generated digit tuples to catalog items.

    Unknown tuples become INVALID markers that keep their rank slot; a
    repeated item keeps only its best-scored occurrence.
    """
    seen = set()
    cands = []
    for sid, score in ranked:
        item = sid_to_item.get(tuple(sid))
        if item is None:
            cands.append((INVALID, score))
        elif item not in seen:
            seen.add(item)
            cands.append((item, score))
    return RankedList(user_id, cands, [tuple(s) for s, _ in ranked])


def write_recommendations(lists, path):
    with open(path, "w") as fh:
        for rl in lists:
            fh.write(json.dumps({"user_id": rl.user_id, "items": [[i, round(s, 6)] for i, s in rl.candidates]}) + "\n")
