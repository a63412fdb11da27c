"""Closed-form FFN memory edits.

For every SID position p the edit works on one decoder layer l_p:

1. run each request's context through the frozen model and read the key k_i
   and value z_i of the FFN at (l_p, p);
2. find a value shift delta_i that makes the model emit the request's digit
   when z_i is replaced by z_i + delta_i;
3. solve  dW (lam*C0 + K1 K1^T) = (Z1' - W0 K1) K1^T  for the update of W_out,
   where C0 sums k k^T over keys taken from ordinary training contexts.

The result is stored as an EditBundle next to, never inside, the base weights.
"""
from __future__ import annotations

import hashlib
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F

from .errors import ConditioningError, ConfigError, InputError, NumericalError
from .model import Override, Seq2Seq, pad_batch

log = logging.getLogger(__name__)


@dataclass
class EditOptions:
    lam: float = 1000.0
    jitter_scale: float = 1e-6
    max_steps: int = 25
    target_prob: float = 0.99
    clamp_factor: float = 4.0
    lr_scale: float = 0.5
    cov_samples: int = 2000
    batch_size: int = 256
    seed: int = 0


@dataclass
class EditSite:
    """One tokenized edit request: the context and the digit token to emit at ``position``."""

    enc_tokens: list
    dec_tokens: list  # BOS + prefix tokens, length position + 1
    target: int  # or a tuple of per-position tokens for whole-sequence objectives
    position: int


@dataclass
class KeyMatrixStats:
    C0: np.ndarray
    sample_count: int
    layer: int
    position: int


@dataclass
class EditSolveInput:
    K1: np.ndarray  # d_ff x m
    Zprime1: np.ndarray  # d_model x m
    W0: np.ndarray  # d_model x d_ff
    lam: float

    def __post_init__(self):
        self.K1 = np.atleast_2d(np.asarray(self.K1, dtype=np.float64))
        self.Zprime1 = np.atleast_2d(np.asarray(self.Zprime1, dtype=np.float64))
        self.W0 = np.atleast_2d(np.asarray(self.W0, dtype=np.float64))
        if self.K1.shape[1] != self.Zprime1.shape[1]:
            raise ConfigError(f"K1 has {self.K1.shape[1]} columns but Z'1 has {self.Zprime1.shape[1]}")
        if self.W0.shape != (self.Zprime1.shape[0], self.K1.shape[0]):
            raise ConfigError(f"W0 shape {self.W0.shape} inconsistent with K1 {self.K1.shape} / Z'1 {self.Zprime1.shape}")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")


@dataclass
class BundleEntry:
    layer: int
    delta: np.ndarray  # d_model x d_ff
    lam: float
    m: int


@dataclass
class EditBundle:
    base_hash: str
    entries: dict = field(default_factory=dict)  # position -> BundleEntry
    n_positions: int = 4

    def remove(self, position: int) -> "EditBundle":
        return EditBundle(self.base_hash, {p: e for p, e in self.entries.items() if p != position}, self.n_positions)


# ---------------------------------------------------------------- solver


def _stats_matrix(C0):
    return np.asarray(C0.C0 if isinstance(C0, KeyMatrixStats) else C0, dtype=np.float64)


def solve_update(inp: EditSolveInput, C0, jitter: float | None = None, jitter_scale: float = 1e-6) -> np.ndarray:
    """dW = R K1^T (lam C0 + K1 K1^T + jitter I)^-1 via a Cholesky solve, R = Z'1 - W0 K1."""
    C = _stats_matrix(C0)
    d_ff = inp.K1.shape[0]
    if C.shape != (d_ff, d_ff):
        raise ConfigError(f"C0 shape {C.shape} does not match key dimension {d_ff}")
    A = inp.lam * C + inp.K1 @ inp.K1.T
    if jitter is None:
        jitter = jitter_scale * np.trace(A) / d_ff
    A = A + jitter * np.eye(d_ff)
    rhs = (inp.Zprime1 - inp.W0 @ inp.K1) @ inp.K1.T
    if not np.any(rhs):
        return np.zeros_like(inp.W0)
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
        ev = float(np.linalg.eigvalsh(A).min()) if np.all(np.isfinite(A)) else float("nan")
        raise ConditioningError(f"edit system is not positive definite (smallest eigenvalue {ev:.3e})", ev)
    dW = scipy.linalg.cho_solve(factor, rhs.T).T
    if not np.all(np.isfinite(dW)):
        raise NumericalError("non-finite weight update")
    return dW


def normal_equation_residual(dW, inp: EditSolveInput, C0, jitter: float) -> float:
    C = _stats_matrix(C0)
    A = inp.lam * C + inp.K1 @ inp.K1.T + jitter * np.eye(C.shape[0])
    rhs = (inp.Zprime1 - inp.W0 @ inp.K1) @ inp.K1.T
    return float(np.linalg.norm(dW @ A - rhs) / max(1.0, np.linalg.norm(rhs)))


def default_jitter(inp: EditSolveInput, C0, jitter_scale: float = 1e-6) -> float:
    C = _stats_matrix(C0)
    return jitter_scale * float(np.trace(inp.lam * C) + np.sum(inp.K1 * inp.K1)) / C.shape[0]


# ---------------------------------------------------------------- captures


def _encode_batch(model: Seq2Seq, sites):
    enc = model.encode(pad_batch([s.enc_tokens for s in sites]))
    dec = torch.as_tensor([list(s.dec_tokens) for s in sites], dtype=torch.long)
    return enc, dec


@torch.no_grad()
def capture_site_keys(model: Seq2Seq, sites, layers, position: int, batch_size: int = 512) -> dict:
    """layer -> (keys (n, d_ff), values (n, d_model)) at decoder ``position`` for each site."""
    keys = {l: [] for l in layers}
    vals = {l: [] for l in layers}
    for start in range(0, len(sites), batch_size):
        chunk = sites[start : start + batch_size]
        enc, dec = _encode_batch(model, chunk)
        cap: dict = {}
        model.decode(enc, dec[:, : position + 1], capture=cap)
        for l in layers:
            keys[l].append(cap[l]["key"][:, position].double().numpy())
            vals[l].append(cap[l]["value"][:, position].double().numpy())
    return {l: (np.concatenate(keys[l]), np.concatenate(vals[l])) for l in layers}


def collect_covariance(model: Seq2Seq, samples, layer: int, position: int, sample_size: int = 2000, seed: int = 0) -> KeyMatrixStats:
    """C0 = sum of k k^T over keys at (layer, position) from a sample of training contexts.

    ``samples`` are EditSites built from ordinary training examples.
    """
    if sample_size < 1 or not samples:
        raise InputError("covariance needs at least one sample")
    rng = np.random.default_rng(seed)
    n = min(sample_size, len(samples))
    idx = np.sort(rng.choice(len(samples), size=n, replace=False))
    keys, _ = capture_site_keys(model, [samples[i] for i in idx], [layer], position)[layer]
    C0 = keys.T @ keys
    C0 = 0.5 * (C0 + C0.T)
    return KeyMatrixStats(C0, n, layer, position)


# ---------------------------------------------------------------- value shifts


def edit_loss(model: Seq2Seq, enc, dec, targets, layer: int, position: int, z, delta):
    """Per-request cross-entropy of the target digit with the FFN output at the site set to z + delta.

    With 2-D ``targets`` (one token per decoder position) the loss is the
    summed cross-entropy of the whole sequence, all driven by the one site.
    """
    logits = model.decode(enc, dec, override=Override(layer, position, z + delta))
    if targets.dim() == 2:
        ce = F.cross_entropy(logits.transpose(1, 2), targets, reduction="none")
        return ce.sum(1)
    return F.cross_entropy(logits[:, position], targets, reduction="none")


def optimize_deltas(model: Seq2Seq, sites, layer: int, opts: EditOptions | None = None):
    """Batched value-shift search for requests that share one position.

    Plain gradient descent on -log p(target); the step size of each request is
    fixed at lr_scale * |z| / |grad| from its first step, and |delta| is
    projected onto the ball of radius clamp_factor * |z| after every step.
    Returns (keys, z, delta, ok) with one row per site.
    """
    opts = opts or EditOptions()
    if not sites:
        return np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0, bool)
    position = sites[0].position
    if any(s.position != position for s in sites):
        raise InputError("optimize_deltas needs sites from a single position")
    parts = []
    flags = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    try:
        for start in range(0, len(sites), opts.batch_size):
            parts.append(_delta_chunk(model, sites[start : start + opts.batch_size], layer, position, opts))
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
    return tuple(np.concatenate(col) for col in zip(*parts))


def _delta_chunk(model, chunk, layer, position, opts):
    with torch.no_grad():
        enc, dec = _encode_batch(model, chunk)
        cap: dict = {}
        model.decode(enc, dec, capture=cap)
        z = cap[layer]["value"][:, position].clone()
        k = cap[layer]["key"][:, position].clone()
    targets = torch.as_tensor([s.target for s in chunk], dtype=torch.long)
    delta = torch.zeros_like(z)
    active = torch.ones(len(chunk), dtype=torch.bool)
    ok = torch.ones(len(chunk), dtype=torch.bool)
    lr = None
    z_norm = z.norm(dim=1)
    for _ in range(opts.max_steps):
        d = delta.clone().requires_grad_(True)
        loss = edit_loss(model, enc, dec, targets, layer, position, z, d)
        finite = torch.isfinite(loss)
        if not finite.all():
            bad = ~finite & active
            log.warning("non-finite edit loss for %d request(s); dropping them", int(bad.sum()))
            ok &= finite
            active &= finite
            delta[bad] = 0.0
        prob = torch.exp(-loss.detach())
        active &= prob < opts.target_prob
        if not active.any():
            break
        (grad,) = torch.autograd.grad(loss[active].sum(), d)
        if lr is None:
            lr = opts.lr_scale * z_norm / grad.norm(dim=1).clamp_min(1e-12)
        with torch.no_grad():
            step = lr[:, None] * grad * active[:, None]
            delta = delta - step
            n = delta.norm(dim=1)
            cap_n = opts.clamp_factor * z_norm
            scale = torch.where(n > cap_n, cap_n / n.clamp_min(1e-30), torch.ones_like(n))
            delta = delta * scale[:, None]
    return k.double().numpy(), z.double().numpy(), delta.detach().double().numpy(), ok.numpy()


def optimize_delta(model: Seq2Seq, site: EditSite, layer: int, opts: EditOptions | None = None) -> np.ndarray:
    _, _, delta, ok = optimize_deltas(model, [site], layer, opts)
    if not ok[0]:
        raise NumericalError("non-finite loss while optimizing the value shift")
    return delta[0]


# ---------------------------------------------------------------- bundles


def install_edits(model: Seq2Seq, base_hash: str, choices: dict, updates: dict, lams=None, counts=None, n_positions: int = 4) -> EditBundle:
    """Package per-position updates; the model's own weights are not touched."""
    bundle = EditBundle(base_hash, {}, n_positions)
    for p, dW in updates.items():
        layer = choices[p]
        layer = getattr(layer, "layer", layer)
        shape = tuple(model.w_out(layer).shape)
        dW = np.asarray(dW, dtype=np.float64)
        if dW.shape != shape:
            raise ConfigError(f"update for position {p} has shape {dW.shape}, W_out is {shape}")
        if not np.all(np.isfinite(dW)):
            raise NumericalError(f"update for position {p} is not finite")
        bundle.entries[p] = BundleEntry(int(layer), dW, float((lams or {}).get(p, 0.0)), int((counts or {}).get(p, 0)))
    return bundle


BUNDLE_MAGIC = b"GRBD"


def save_bundle(bundle: EditBundle, path):
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<II", 1, bundle.n_positions))
        fh.write(bundle.base_hash.encode().ljust(64, b"\0"))
        fh.write(struct.pack("<I", len(bundle.entries)))
        for p in sorted(bundle.entries):
            e = bundle.entries[p]
            r, c = e.delta.shape
            fh.write(struct.pack("<HHdIII", p, e.layer, e.lam, e.m, r, c))
            fh.write(np.ascontiguousarray(e.delta, dtype="<f8").tobytes())


def load_bundle(path, base_checkpoint=None) -> EditBundle:
    data = Path(path).read_bytes()
    if data[:4] != BUNDLE_MAGIC:
        raise InputError(f"{path}: not an edit bundle")
    _, n_pos = struct.unpack_from("<II", data, 4)
    base_hash = data[12:76].rstrip(b"\0").decode()
    if base_checkpoint is not None:
        actual = hashlib.sha256(Path(base_checkpoint).read_bytes()).hexdigest()
        if actual != base_hash:
            raise InputError(f"{path}: bundle was built for checkpoint {base_hash[:12]}, got {actual[:12]}")
    (n,) = struct.unpack_from("<I", data, 76)
    off = 80
    bundle = EditBundle(base_hash, {}, n_pos)
    size = struct.calcsize("<HHdIII")
    for _ in range(n):
        p, layer, lam, m, r, c = struct.unpack_from("<HHdIII", data, off)
        off += size
        dW = np.frombuffer(data[off : off + 8 * r * c], dtype="<f8").reshape(r, c).copy()
        off += 8 * r * c
        bundle.entries[p] = BundleEntry(layer, dW, lam, m)
    return bundle


# ---------------------------------------------------------------- pipeline


@dataclass
class PreparedEdit:
    """Everything the solver needs for one position; re-solvable at any lambda."""

    position: int
    layer: int
    K1: np.ndarray
    Zprime1: np.ndarray
    W0: np.ndarray
    stats: KeyMatrixStats
    z: np.ndarray
    delta: np.ndarray


def prepare_position(model, sites, layer, cov_samples, opts: EditOptions, timing: dict) -> PreparedEdit:
    position = sites[0].position
    t = time.perf_counter()
    keys, z, delta, ok = optimize_deltas(model, sites, layer, opts)
    timing["delta"] = timing.get("delta", 0.0) + time.perf_counter() - t
    keys, z, delta = keys[ok], z[ok], delta[ok]
    t = time.perf_counter()
    stats = collect_covariance(model, cov_samples, layer, position, opts.cov_samples, opts.seed + position)
    timing["covariance"] = timing.get("covariance", 0.0) + time.perf_counter() - t
    W0 = model.w_out(layer).detach().double().numpy()
    return PreparedEdit(position, layer, keys.T, (z + delta).T, W0, stats, z, delta)


def solve_prepared(prepared: dict, lam: float, opts: EditOptions) -> dict:
    out = {}
    for p, prep in prepared.items():
        inp = EditSolveInput(prep.K1, prep.Zprime1, prep.W0, lam)
        out[p] = solve_update(inp, prep.stats, jitter_scale=opts.jitter_scale)
    return out


def run_edit_pipeline(model: Seq2Seq, sites_by_position: dict, choices: dict, cov_samples_by_position: dict,
                      opts: EditOptions | None = None, base_hash: str = "", n_positions: int = 4):
    """Optimize value shifts, gather key statistics, solve and install, per position.

    Returns (bundle, timing, prepared) where ``prepared`` allows re-solving at
    other lambdas without repeating the value-shift search.
    """
    opts = opts or EditOptions()
    timing: dict = {"delta": 0.0, "covariance": 0.0, "solve": 0.0, "install": 0.0}
    t_all = time.perf_counter()
    prepared = {}
    for p in sorted(sites_by_position):
        sites = sites_by_position[p]
        if not sites:
            continue
        layer = getattr(choices[p], "layer", choices[p])
        prepared[p] = prepare_position(model, sites, layer, cov_samples_by_position[p], opts, timing)
    t = time.perf_counter()
    updates = solve_prepared(prepared, opts.lam, opts)
    timing["solve"] = time.perf_counter() - t
    t = time.perf_counter()
    bundle = install_edits(
        model, base_hash, {p: prepared[p].layer for p in prepared}, updates,
        {p: opts.lam for p in prepared}, {p: prepared[p].K1.shape[1] for p in prepared}, n_positions,
    )
    timing["install"] = time.perf_counter() - t
    timing["total"] = time.perf_counter() - t_all
    return bundle, timing, prepared
