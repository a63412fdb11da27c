"""In-memory pipeline stages shared by the CLI and the acceptance suite."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import evalkit
from .config import RunConfig
from .data import Dataset, SyntheticSpec, gen_synthetic, ingest_jsonl
from .decoding import SidTrie
from .editor import EditOptions, EditSite, install_edits, run_edit_pipeline, solve_prepared
from .errors import ConfigError, PrerequisiteMissing
from .knowledge import prepare_knowledge, request_sites
from .locator import LayerChoice, locate
from .model import BOS, ModelConfig, Seq2Seq, TrainConfig, train
from .tokenizer import SidLayout, assign_sids, embed_items, fit_rq, history_tokens

log = logging.getLogger(__name__)


@dataclass
class Tokenized:
    dataset: Dataset
    split: evalkit.SplitSpec
    embeddings: dict  # item_id -> ItemEmbedding
    codebooks: object
    sid_table: dict
    layout: SidLayout


# ---------------------------------------------------------------- data + tokens


def synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    d = cfg.data
    return SyntheticSpec(d.n_items, d.n_cold, d.n_users, d.seq_len_min, d.seq_len_max, d.n_clusters, d.noise,
                         d.horizon, takeover=d.takeover)


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.source == "synthetic":
        return gen_synthetic(synthetic_spec(cfg), cfg.data.seed)
    ds = ingest_jsonl(cfg.data.source)
    ds.boundaries = parse_boundaries(cfg.data.boundaries, ds)
    return ds


def parse_boundaries(text: str, ds: Dataset) -> tuple:
    if text.strip():
        try:
            a, b = (float(x) for x in text.split(","))
        except ValueError:
            raise ConfigError(f"data.boundaries must be 'valid_start,test_start', got {text!r}") from None
        return (a, b)
    ts = np.sort(np.concatenate([s.timestamps for s in ds.sequences.values()]))
    return (float(np.quantile(ts, 0.8)), float(np.quantile(ts, 0.9)))


def build_sids(embeddings: dict, warm_items, cfg: RunConfig):
    """Codebooks fit on warm items; warm SIDs first, then the rest of the catalog."""
    warm = [embeddings[i] for i in sorted(warm_items)]
    cb = fit_rq(warm, cfg.tokenizer.M, cfg.tokenizer.K, cfg.tokenizer.seed)
    table = assign_sids(warm, cb)
    rest = [embeddings[i] for i in sorted(embeddings) if i not in table]
    table.update(assign_sids(rest, cb, taken=dict(table)))
    return cb, table


def tokenize(cfg: RunConfig, dataset: Dataset | None = None) -> Tokenized:
    ds = dataset if dataset is not None else load_dataset(cfg)
    if ds.boundaries is None:
        ds.boundaries = parse_boundaries(cfg.data.boundaries, ds)
    split = evalkit.make_splits(ds.sequences, ds.boundaries)
    emb = {e.item_id: e for e in embed_items(sorted(ds.items.items()), cfg.tokenizer.d_emb)}
    cb, table = build_sids(emb, split.warm_items, cfg)
    return Tokenized(ds, split, emb, cb, table, SidLayout(cfg.tokenizer.M, cfg.tokenizer.K))


# ---------------------------------------------------------------- corpora


def corpus_from_examples(tk: Tokenized, examples, window: int) -> list:
    return [(history_tokens(e.history, tk.sid_table, tk.layout, window), tk.layout.sid_tokens(tk.sid_table[e.target]))
            for e in examples]


def pseudo_corpus(tk: Tokenized, pairs, window: int) -> list:
    return [(history_tokens(p.history, tk.sid_table, tk.layout, window), tk.layout.sid_tokens(tk.sid_table[p.cold_item]))
            for p in pairs]


def original_sites(tk: Tokenized, window: int, positions=None) -> dict:
    """position -> EditSites built from every training example (label-0 / C0 contexts)."""
    positions = range(tk.layout.M) if positions is None else positions
    examples = tk.split.train_examples()
    encs = [history_tokens(e.history, tk.sid_table, tk.layout, window) for e in examples]
    out = {}
    for p in positions:
        sites = []
        for enc, e in zip(encs, examples):
            sid = tk.sid_table[e.target]
            dec = [BOS] + [tk.layout.token(q, d) for q, d in enumerate(sid[:p])]
            sites.append(EditSite(enc, dec, tk.layout.token(p, sid[p]), p))
        out[p] = sites
    return out


def model_config(cfg: RunConfig, layout: SidLayout) -> ModelConfig:
    m = cfg.model
    return ModelConfig(layout.vocab_size, m.d_model, m.d_ff, m.n_enc_layers, m.n_dec_layers, m.n_heads,
                       activation=m.activation, precision=m.precision, seed=m.seed)


def train_schedule(cfg: RunConfig, **over) -> TrainConfig:
    t = cfg.train
    base = dict(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, weight_decay=t.weight_decay,
                grad_clip=t.grad_clip, seed=t.seed)
    base.update(over)
    return TrainConfig(**base)


def train_base(cfg: RunConfig, tk: Tokenized):
    corpus = corpus_from_examples(tk, tk.split.train_examples(), cfg.model.history_window)
    model = Seq2Seq(model_config(cfg, tk.layout))
    res = train(model, corpus, train_schedule(cfg))
    return model, res


# ---------------------------------------------------------------- evaluation


def sample_examples(examples, n: int, seed: int) -> list:
    if n <= 0 or n >= len(examples):
        return list(examples)
    idx = np.sort(np.random.default_rng(seed).choice(len(examples), size=n, replace=False))
    return [examples[i] for i in idx]


def eval_examples(cfg: RunConfig, tk: Tokenized, which: str = "test") -> list:
    pool = tk.split.test if which == "test" else tk.split.valid
    return sample_examples(pool, cfg.eval.n_eval, cfg.eval.seed + (0 if which == "test" else 1))


def decode_kwargs(cfg: RunConfig, tk: Tokenized, **over) -> dict:
    kw = dict(beam_width=cfg.decode.beam, top_k=cfg.decode.top_k, mode=cfg.decode.mode,
              window=cfg.model.history_window,
              trie=SidTrie(tk.sid_table.values(), tk.layout.K) if cfg.decode.constrain else None)
    kw.update(over)
    return kw


def evaluate_model(cfg: RunConfig, tk: Tokenized, model, examples, bundle=None, **over):
    return evalkit.evaluate(model, tk.layout, tk.split, examples, tk.sid_table, cfg.ks(), bundle=bundle,
                            **decode_kwargs(cfg, tk, **over))


# ---------------------------------------------------------------- knowledge + editing


def build_knowledge(cfg: RunConfig, tk: Tokenized):
    cold = [tk.embeddings[i] for i in sorted(tk.split.cold_items)]
    warm = [tk.embeddings[i] for i in sorted(tk.split.warm_items)]
    if not cold:
        return {}, [], []
    kn = cfg.knowledge
    return prepare_knowledge(cold, warm, tk.split.train, tk.sid_table, kn.k, kn.quota, kn.max_len)


def edit_options(cfg: RunConfig, lam: float | None = None) -> EditOptions:
    e = cfg.edit
    return EditOptions(lam=e.lam if lam is None else lam, jitter_scale=e.jitter_scale, max_steps=e.max_steps,
                       target_prob=e.target_prob, clamp_factor=e.clamp_factor, lr_scale=e.lr_scale,
                       cov_samples=e.cov_samples, seed=e.seed)


def locate_layers(cfg: RunConfig, tk: Tokenized, model, requests, originals=None, seed: int | None = None):
    sites = request_sites(requests, tk.sid_table, tk.layout, cfg.model.history_window)
    originals = originals if originals is not None else original_sites(tk, cfg.model.history_window, sorted(sites))
    n = cfg.locator.n_original or None
    return locate(model, sites, originals, n=n, seed=cfg.locator.seed if seed is None else seed,
                  split_ratio=cfg.locator.split_ratio)


def alternative_choices(accuracies: dict, rule: str, seed: int = 0) -> dict:
    """Layer choices for the classifier ablations: ``random`` or ``worst``."""
    positions = sorted({p for p, _ in accuracies})
    rng = np.random.default_rng(seed)
    out = {}
    for p in positions:
        layers = sorted(l for q, l in accuracies if q == p)
        if rule == "random":
            l = int(rng.choice(layers))
        elif rule == "worst":
            l = min(layers, key=lambda x: (accuracies[(p, x)], x))
        else:
            raise ConfigError(f"unknown layer rule {rule!r}")
        out[p] = LayerChoice(p, l, accuracies[(p, l)])
    return out


def edit_model(cfg: RunConfig, tk: Tokenized, model, requests, choices, base_hash: str = "", lam: float | None = None,
               originals=None):
    sites = request_sites(requests, tk.sid_table, tk.layout, cfg.model.history_window)
    originals = originals if originals is not None else original_sites(tk, cfg.model.history_window, sorted(sites))
    return run_edit_pipeline(model, sites, choices, originals, edit_options(cfg, lam), base_hash, tk.layout.M)


def objectwise_edit(cfg: RunConfig, tk: Tokenized, model, requests, choices, base_hash: str = "", lam: float | None = None):
    """Ablation without position-wise requests: one request per pseudo pair whose object is the whole SID.

    The value shift is optimized at the first decoder position against the
    joint log-probability of every digit, and the single resulting update is
    meant to be active at all positions (decode with mode "all-on").
    """
    window = cfg.model.history_window
    sites = []
    for r in requests.get(0, []):
        toks = tk.layout.sid_tokens(tk.sid_table[r.cold_item])
        enc = history_tokens(r.subject_history, tk.sid_table, tk.layout, window)
        sites.append(EditSite(enc, [BOS] + toks[:-1], tuple(toks), 0))
    if not sites:
        return install_edits(model, base_hash, {}, {}, n_positions=tk.layout.M)
    layer = getattr(choices[0], "layer", choices[0])
    originals = original_sites(tk, window, [0])
    bundle, _, _ = run_edit_pipeline(model, {0: sites}, {0: layer}, originals, edit_options(cfg, lam), base_hash,
                                     tk.layout.M)
    return bundle


def bundle_at(model, prepared: dict, lam: float, cfg: RunConfig, base_hash: str = "", n_positions: int = 4):
    ups = solve_prepared(prepared, lam, edit_options(cfg, lam))
    return install_edits(model, base_hash, {p: pr.layer for p, pr in prepared.items()}, ups,
                         {p: lam for p in prepared}, {p: pr.K1.shape[1] for p, pr in prepared.items()}, n_positions)


def lambda_sweep(cfg: RunConfig, tk: Tokenized, model, prepared: dict, examples, grid=None, base_hash: str = ""):
    """Metrics and update norms per lambda; returns (rows, best lambda by overall NDCG@10)."""
    grid = cfg.lam_grid() if grid is None else list(grid)
    if not grid:
        raise ConfigError("empty lambda grid")
    rows = []
    for lam in grid:
        b = bundle_at(model, prepared, lam, cfg, base_hash, tk.layout.M)
        rep, _ = evaluate_model(cfg, tk, model, examples, bundle=b)
        k = min(cfg.ks())
        rows.append({
            "lambda": lam,
            "dw_norm": float(np.sqrt(sum(np.sum(e.delta ** 2) for e in b.entries.values()))),
            "dw_norm_by_position": {p: float(np.linalg.norm(e.delta)) for p, e in b.entries.items()},
            "overall": rep.values.get(("overall", k, "ndcg"), 0.0),
            "warm": rep.values.get(("warm", k, "ndcg"), 0.0),
            "cold": rep.values.get(("cold", k, "ndcg"), 0.0),
        })
    best = max(rows, key=lambda r: (r["overall"], -r["lambda"]))["lambda"]
    return rows, best


# ---------------------------------------------------------------- update-cost comparison


def compare_update_cost(cfg: RunConfig, tk: Tokenized, base_model, requests, pairs, examples, lam: float | None = None,
                        arms=("retrain", "finetune", "edit"), base_hash: str = ""):
    """Run the retrain / finetune / edit arms from the same prepared knowledge.

    Each arm is timed from the moment the pseudo data exists to the moment an
    updated model is ready; post-update metrics are computed on ``examples``.
    A failing arm is recorded and the others proceed.
    """
    window = cfg.model.history_window
    results = {}
    for arm in arms:
        try:
            t0 = time.perf_counter()
            bundle = None
            phases = {}
            if arm == "retrain":
                model = Seq2Seq(model_config(cfg, tk.layout))
                corpus = corpus_from_examples(tk, tk.split.train_examples(), window) + pseudo_corpus(tk, pairs, window)
                train(model, corpus, train_schedule(cfg))
            elif arm == "finetune":
                model = clone_model(base_model)
                sched = train_schedule(cfg, epochs=cfg.eval.finetune_epochs, lr=cfg.train.lr * cfg.eval.finetune_lr_scale)
                train(model, pseudo_corpus(tk, pairs, window), sched)
            elif arm == "edit":
                model = base_model
                t = time.perf_counter()
                choices, _ = locate_layers(cfg, tk, model, requests)
                phases["locate"] = time.perf_counter() - t
                bundle, timing, _ = edit_model(cfg, tk, model, requests, choices, base_hash, lam)
                phases.update(timing)
            else:
                raise ConfigError(f"unknown arm {arm!r}")
            seconds = time.perf_counter() - t0
            rep, _ = evaluate_model(cfg, tk, model, examples, bundle=bundle)
            results[arm] = {"seconds": seconds, "phases": phases, "report": rep, "model": model, "bundle": bundle,
                            "error": None}
        except Exception as e:  # noqa: BLE001 - an arm failure must not stop the others
            log.error("arm %s failed: %s", arm, e)
            results[arm] = {"seconds": float("nan"), "phases": {}, "report": None, "model": None, "bundle": None,
                            "error": str(e)}
    ref = results.get("retrain", {}).get("seconds")
    for r in results.values():
        r["relative"] = r["seconds"] / ref if ref and np.isfinite(ref) and ref > 0 else None
    return results


def timing_rows(results: dict) -> list:
    rows = []
    for arm, r in results.items():
        rows.append((arm, "total", r["seconds"], r["relative"]))
        for phase, sec in r["phases"].items():
            if phase != "total":
                rows.append((arm, phase, sec, None))
    return rows


def clone_model(model: Seq2Seq) -> Seq2Seq:
    out = Seq2Seq(model.cfg)
    out.load_state_dict(model.state_dict())
    out.eval()
    return out


def set_threads(n: int):
    torch.set_num_threads(max(1, int(n)))


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def require(path, what: str, hint: str):
    path = Path(path)
    if not path.exists():
        raise PrerequisiteMissing(f"missing {what}: {path} (run `{hint}` first)")
    return path
