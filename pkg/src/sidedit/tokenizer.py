"""Item text -> unit embedding -> M-digit semantic ID.

Codebooks come from residual k-means: level l clusters what is left of each
embedding after subtracting the centroids chosen at levels 0..l-1.
"""
from __future__ import annotations

import csv
import hashlib
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, InputError
from .model import BOS, N_SPECIAL

_TOKEN = re.compile(r"[a-z0-9]+")


@dataclass
class ItemEmbedding:
    item_id: str
    vector: np.ndarray


@dataclass
class Codebooks:
    levels: list  # M arrays of shape (K, d_emb)

    @property
    def M(self) -> int:
        return len(self.levels)

    @property
    def K(self) -> int:
        return self.levels[0].shape[0]


def text_tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _bucket(token: str, dim: int) -> tuple[int, float]:
    h = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "little")
    return h % dim, (1.0 if (h >> 40) & 1 else -1.0)


def embed_text(text: str, dim: int = 32) -> np.ndarray:
    toks = text_tokens(text)
    if not toks:
        raise InputError(f"text {text!r} has no alphanumeric tokens")
    v = np.zeros(dim)
    for t in toks:
        i, s = _bucket(t, dim)
        v[i] += s
    n = np.linalg.norm(v)
    if n == 0.0:
        # every token cancelled out; fall back to unsigned counts
        for t in toks:
            v[_bucket(t, dim)[0]] += 1.0
        n = np.linalg.norm(v)
    return v / n


def embed_items(metadata, dim: int = 32) -> list[ItemEmbedding]:
    """Hashed bag-of-tokens embedding of ``(item_id, text)`` pairs."""
    out = []
    for item_id, text in metadata:
        if not text or not text.strip():
            raise InputError(f"item {item_id!r} has empty text")
        out.append(ItemEmbedding(item_id, embed_text(text, dim)))
    return out


def load_embeddings_csv(path) -> list[ItemEmbedding]:
    """Rows of ``item_id, x_0, ..., x_{d-1}``; vectors are re-normalized."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            v = np.asarray([float(x) for x in row[1:]])
            n = np.linalg.norm(v)
            if not np.isfinite(n) or n == 0:
                raise DataError(f"embedding for {row[0]!r} is zero or non-finite")
            out.append(ItemEmbedding(row[0], v / n))
    if not out:
        raise DataError(f"{path}: no embeddings")
    return out


def save_embeddings_csv(embeddings, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for e in embeddings:
            w.writerow([e.item_id, *(repr(float(x)) for x in e.vector)])


# ---------------------------------------------------------------- k-means


def _sq_dists(x, c):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, iters: int = 50) -> np.ndarray:
    """k-means++ seeding then Lloyd iterations; empty clusters take the farthest point."""
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        idx = int(rng.choice(n, p=closest / total)) if total > 0 else int(rng.integers(n))
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j : j + 1])[:, 0])
    assign = None
    for _ in range(iters):
        d = _sq_dists(x, centers)
        new_assign = d.argmin(1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        own = d[np.arange(n), assign]
        for j in np.flatnonzero(counts == 0):
            # donors must keep at least one member, or they become empty in turn
            far = int(np.where(counts[assign] > 1, own, -np.inf).argmax())
            counts[assign[far]] -= 1
            counts[j] = 1
            assign[far] = j
            own[far] = -np.inf
        for j in range(k):
            centers[j] = x[assign == j].mean(0)
    return centers


def fit_rq(embeddings, M: int, K: int, seed: int = 0, iters: int = 50) -> Codebooks:
    x = np.stack([e.vector for e in embeddings]) if embeddings else np.empty((0, 0))
    if len(x) < K:
        raise ConfigError(f"need at least K={K} items to fit codebooks, got {len(x)}")
    rng = np.random.default_rng(seed)
    levels = []
    resid = x.astype(np.float64)
    for _ in range(M):
        c = kmeans(resid, K, rng, iters)
        levels.append(c)
        resid = resid - c[_sq_dists(resid, c).argmin(1)]
    return Codebooks(levels)


def quantize(x: np.ndarray, codebooks: Codebooks):
    """Greedy residual codes (N, M) and the residual fed to each level (M, N, d)."""
    resid = np.asarray(x, dtype=np.float64)
    codes = np.empty((len(resid), codebooks.M), dtype=np.int64)
    inputs = []
    for lvl, c in enumerate(codebooks.levels):
        inputs.append(resid)
        codes[:, lvl] = _sq_dists(resid, c).argmin(1)
        resid = resid - c[codes[:, lvl]]
    return codes, inputs


def residual_energy(x: np.ndarray, codebooks: Codebooks) -> list[float]:
    """Sum of squared residual norms before any level and after each level."""
    codes, inputs = quantize(x, codebooks)
    last = inputs[-1] - codebooks.levels[-1][codes[:, -1]]
    return [float((r * r).sum()) for r in inputs] + [float((last * last).sum())]


def assign_sids(embeddings, codebooks: Codebooks, taken: dict | None = None) -> dict:
    """Nearest-centroid codes with last-digit collision resolution.

    Items are processed in the given order; an item whose code is already
    used (by ``taken`` or an earlier item) moves to the nearest unused
    last-level centroid, ties toward the lower index.
    """
    used: dict = defaultdict(set)
    for sid in (taken or {}).values():
        used[tuple(sid[:-1])].add(sid[-1])
    if not embeddings:
        return {}
    x = np.stack([e.vector for e in embeddings])
    codes, inputs = quantize(x, codebooks)
    last_c = codebooks.levels[-1]
    K = codebooks.K
    out = {}
    for i, e in enumerate(embeddings):
        prefix = tuple(int(d) for d in codes[i, :-1])
        digit = int(codes[i, -1])
        if digit in used[prefix]:
            if len(used[prefix]) >= K:
                raise DataError(f"more than K={K} items share SID prefix {prefix}; cannot resolve {e.item_id!r}")
            d = _sq_dists(inputs[-1][i : i + 1], last_c)[0]
            for cand in np.lexsort((np.arange(K), d)):
                if int(cand) not in used[prefix]:
                    digit = int(cand)
                    break
        used[prefix].add(digit)
        out[e.item_id] = prefix + (digit,)
    return out


# ---------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class SidLayout:
    """Digit d at position p <-> token p*K + d + n_special."""

    M: int
    K: int
    n_special: int = N_SPECIAL

    @property
    def vocab_size(self) -> int:
        return self.n_special + self.M * self.K

    def token(self, p: int, d: int) -> int:
        return p * self.K + d + self.n_special

    def parse(self, token: int) -> tuple[int, int]:
        t = token - self.n_special
        if not 0 <= t < self.M * self.K:
            raise InputError(f"token {token} is not a semantic-ID token")
        return divmod(t, self.K)

    def position_tokens(self, p: int) -> range:
        start = self.token(p, 0)
        return range(start, start + self.K)

    def sid_tokens(self, sid) -> list[int]:
        return [self.token(p, int(d)) for p, d in enumerate(sid)]

    def tokens_to_sid(self, tokens) -> tuple:
        return tuple(self.parse(t)[1] for t in tokens)


def sid_vocab_layout(M: int, K: int, n_special: int = N_SPECIAL) -> SidLayout:
    return SidLayout(M, K, n_special)


def write_sid_table(table: dict, path):
    with open(path, "w") as fh:
        for item_id in sorted(table):
            fh.write(f"{item_id}\t{','.join(str(d) for d in table[item_id])}\n")


def read_sid_table(path) -> dict:
    table = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            item_id, digits = line.split("\t")
            table[item_id] = tuple(int(d) for d in digits.split(","))
    return table


def history_tokens(items, sid_table: dict, layout: SidLayout, window: int | None = None) -> list[int]:
    """Encoder input: BOS then the SID tokens of the last ``window`` items, most recent first.

    Reading the history backwards gives the latest item a fixed encoder
    position regardless of history length.
    """
    items = list(items)
    if window is not None and window >= 0:
        items = items[len(items) - window :] if window else []
    out = [BOS]
    for it in reversed(items):
        try:
            out.extend(layout.sid_tokens(sid_table[it]))
        except KeyError:
            raise DataError(f"item {it!r} has no semantic ID") from None
    return out
