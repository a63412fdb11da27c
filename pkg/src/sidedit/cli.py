"""Command-line entry point: ``sidedit <command> [options]``.

Every command reads and writes artifacts in one run directory (``--out``)::

    config.ini  data/  sids.tsv  ckpt/model.gred  requests.jsonl  probes.jsonl
    bundle.bin  metrics.csv  timing.csv  manifest.json

Exit codes: 0 success, 2 input error, 3 missing prerequisite, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalkit, pipeline
from .config import RunConfig
from .data import Dataset, ingest_jsonl, write_jsonl
from .decoding import write_recommendations
from .editor import load_bundle, save_bundle
from .errors import ConfigError, PrerequisiteMissing, SidEditError
from .knowledge import PseudoPair, read_requests, write_requests
from .locator import probes_table, read_probes, write_probes
from .model import file_sha256, load_checkpoint, save_checkpoint
from .tokenizer import SidLayout, load_embeddings_csv, read_sid_table, save_embeddings_csv, write_sid_table

log = logging.getLogger("sidedit")

ARMS = ("position-wise-off", "classifier-random", "classifier-worst", "one-one-off")


class Run:
    """Paths and manifest bookkeeping for one run directory."""

    def __init__(self, root, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg

    def path(self, name: str) -> Path:
        return self.root / name

    def require(self, name: str, what: str, hint: str) -> Path:
        return pipeline.require(self.path(name), what, hint)

    def record(self, command: str, inputs, outputs):
        mpath = self.path("manifest.json")
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {"commands": {}, "artifacts": {}}
        manifest["config_hash"] = self.cfg.hash()
        entry = {"inputs": {n: _hash(self.path(n)) for n in inputs}, "outputs": {n: _hash(self.path(n)) for n in outputs}}
        manifest["commands"][command] = entry
        manifest["artifacts"].update(entry["inputs"])
        manifest["artifacts"].update(entry["outputs"])
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _hash(path: Path) -> str:
    if path.is_dir():
        h = hashlib.sha256()
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(f.relative_to(path).as_posix().encode())
            h.update(file_sha256(f).encode())
        return h.hexdigest()
    return file_sha256(path)


# ---------------------------------------------------------------- loading


def load_tokenized(run: Run) -> pipeline.Tokenized:
    inter = run.require("data/interactions.jsonl", "interaction data", "sidedit tokenize")
    sids = run.require("sids.tsv", "SID table", "sidedit tokenize")
    bpath = run.require("data/boundaries.json", "split boundaries", "sidedit tokenize")
    epath = run.require("data/embeddings.csv", "item embeddings", "sidedit tokenize")
    ds = ingest_jsonl(inter)
    b = json.loads(bpath.read_text())
    ds.boundaries = (b["valid_start"], b["test_start"])
    split = evalkit.make_splits(ds.sequences, ds.boundaries)
    emb = {e.item_id: e for e in load_embeddings_csv(epath)}
    table = read_sid_table(sids)
    cfg = run.cfg.tokenizer
    return pipeline.Tokenized(ds, split, emb, None, table, SidLayout(cfg.M, cfg.K))


def load_model(run: Run):
    ck = run.require("ckpt/model.gred", "checkpoint", "sidedit train")
    return load_checkpoint(ck), file_sha256(ck)


def load_requests(run: Run) -> dict:
    return read_requests(run.require("requests.jsonl", "edit requests", "sidedit prepare-knowledge"))


def pairs_from_requests(requests: dict) -> list:
    return [PseudoPair(r.subject_history, r.cold_item, "", float("nan")) for r in requests.get(0, [])]


def load_choices(run: Run):
    return read_probes(run.require("probes.jsonl", "layer choices", "sidedit locate"))


def edit_lambda(run: Run, args) -> float:
    """--lambda if given, else the value picked by ``edit --tune-lambda``, else the config."""
    tuned = run.path("lambda.json")
    if getattr(args, "lam", None) is None and tuned.exists():
        return float(json.loads(tuned.read_text())["lambda"])
    return run.cfg.edit.lam


# ---------------------------------------------------------------- commands


def cmd_tokenize(run: Run, args):
    cfg = run.cfg
    ds = pipeline.load_dataset(cfg)
    tk = pipeline.tokenize(cfg, ds)
    (run.root / "data").mkdir(parents=True, exist_ok=True)
    write_jsonl(Dataset(ds.sequences, ds.items), run.path("data/interactions.jsonl"))
    run.path("data/boundaries.json").write_text(
        json.dumps({"valid_start": ds.boundaries[0], "test_start": ds.boundaries[1]}) + "\n")
    save_embeddings_csv([tk.embeddings[i] for i in sorted(tk.embeddings)], run.path("data/embeddings.csv"))
    write_sid_table(tk.sid_table, run.path("sids.tsv"))
    s = tk.split
    print(f"items {len(tk.sid_table)}  warm {len(s.warm_items)}  cold {len(s.cold_items)}  "
          f"test {len(s.test)} (cold fraction {s.cold_fraction:.3f})")
    run.record("tokenize", [], ["config.ini", "data", "sids.tsv"])


def cmd_train(run: Run, args):
    tk = load_tokenized(run)
    model, res = pipeline.train_base(run.cfg, tk)
    (run.root / "ckpt").mkdir(exist_ok=True)
    digest = save_checkpoint(model, run.path("ckpt/model.gred"))
    with open(run.path("train_log.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, l in enumerate(res.epoch_losses):
            w.writerow([i, f"{l:.6f}"])
    print(f"trained {len(res.epoch_losses)} epochs, final loss {res.epoch_losses[-1]:.4f}, checkpoint {digest[:12]}")
    run.record("train", ["config.ini", "data", "sids.tsv"], ["ckpt/model.gred", "train_log.csv"])


def cmd_diagnose(run: Run, args):
    tk = load_tokenized(run)
    model, _ = load_model(run)
    ex = pipeline.eval_examples(run.cfg, tk)
    rep, lists = pipeline.evaluate_model(run.cfg, tk, model, ex)
    parts = tk.split.partition(ex)
    rows = []
    for split_name in evalkit.SPLITS:
        pn = evalkit.prefix_ndcg(lists, parts[split_name], tk.sid_table, tk.layout.M, k=10)
        for n, v in pn.items():
            rows.append((split_name, n, v))
    with open(run.path("diagnose.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "prefix_len", "prefix_ndcg@10"])
        for r in rows:
            w.writerow([r[0], r[1], f"{r[2]:.6f}"])
    rep.to_csv(run.path("metrics_pre.csv"))
    print(rep.table())
    print("\nprefix-NDCG@10")
    for split_name in evalkit.SPLITS:
        vals = "  ".join(f"n={n}: {v:.4f}" for s, n, v in rows if s == split_name)
        print(f"{split_name:8s} {vals}")
    run.record("diagnose", ["ckpt/model.gred", "sids.tsv", "data"], ["diagnose.csv", "metrics_pre.csv"])


def cmd_prepare_knowledge(run: Run, args):
    tk = load_tokenized(run)
    requests, pairs, excluded = pipeline.build_knowledge(run.cfg, tk)
    write_requests(requests, run.path("requests.jsonl"))
    total = sum(len(v) for v in requests.values())
    print(f"{len(pairs)} pseudo pairs, {total} edit requests, {len(excluded)} cold items excluded")
    run.record("prepare-knowledge", ["sids.tsv", "data"], ["requests.jsonl"])


def cmd_locate(run: Run, args):
    tk = load_tokenized(run)
    model, _ = load_model(run)
    requests = load_requests(run)
    choices, acc = pipeline.locate_layers(run.cfg, tk, model, requests)
    write_probes(choices, acc, run.path("probes.jsonl"))
    print(probes_table(choices, acc))
    run.record("locate", ["ckpt/model.gred", "requests.jsonl"], ["probes.jsonl"])


def cmd_edit(run: Run, args):
    tk = load_tokenized(run)
    model, digest = load_model(run)
    requests = load_requests(run)
    choices, _ = load_choices(run)
    lam = run.cfg.edit.lam
    bundle, timing, prepared = pipeline.edit_model(run.cfg, tk, model, requests, choices, digest, lam)
    outputs = ["bundle.bin", "edit_timing.csv"]
    if args.tune_lambda:
        valid = pipeline.eval_examples(run.cfg, tk, "valid")
        rows, lam = pipeline.lambda_sweep(run.cfg, tk, model, prepared, valid, base_hash=digest)
        with open(run.path("lambda_sweep.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "dw_norm", "valid_overall_ndcg@10", "valid_warm_ndcg@10", "valid_cold_ndcg@10"])
            for r in rows:
                w.writerow([r["lambda"], f"{r['dw_norm']:.6f}", f"{r['overall']:.6f}", f"{r['warm']:.6f}", f"{r['cold']:.6f}"])
        bundle = pipeline.bundle_at(model, prepared, lam, run.cfg, digest, tk.layout.M)
        pipeline.write_json({"lambda": lam}, run.path("lambda.json"))
        outputs += ["lambda_sweep.csv", "lambda.json"]
        print(f"lambda tuned on validation: {lam:g}")
    else:
        run.path("lambda.json").unlink(missing_ok=True)  # a stale tuned value would no longer match the bundle
    save_bundle(bundle, run.path("bundle.bin"))
    evalkit.write_timing_csv([("edit", k, v, None) for k, v in timing.items()], run.path("edit_timing.csv"))
    for p, e in sorted(bundle.entries.items()):
        print(f"position {p}: layer {e.layer}, m={e.m}, lambda={e.lam:g}, |dW|={np.linalg.norm(e.delta):.4f}")
    print(f"edit wall-clock {timing['total']:.2f}s")
    run.record("edit", ["ckpt/model.gred", "requests.jsonl", "probes.jsonl"], outputs)


def cmd_evaluate(run: Run, args):
    tk = load_tokenized(run)
    model, digest = load_model(run)
    bundle = None
    inputs = ["ckpt/model.gred", "sids.tsv", "data"]
    if not args.no_bundle and run.path("bundle.bin").exists():
        bundle = load_bundle(run.path("bundle.bin"), run.path("ckpt/model.gred"))
        inputs.append("bundle.bin")
    ex = pipeline.eval_examples(run.cfg, tk)
    rep, lists = pipeline.evaluate_model(run.cfg, tk, model, ex, bundle=bundle)
    rep.to_csv(run.path("metrics.csv"))
    write_recommendations(list(lists.values()), run.path("recs.jsonl"))
    _print_report(rep, run.cfg.eval.iid_norm)
    run.record("evaluate", inputs, ["metrics.csv", "recs.jsonl"])


def cmd_compare(run: Run, args):
    tk = load_tokenized(run)
    model, digest = load_model(run)
    requests = load_requests(run)
    pairs = pairs_from_requests(requests)
    ex = pipeline.eval_examples(run.cfg, tk)
    lam = edit_lambda(run, args)
    results = pipeline.compare_update_cost(run.cfg, tk, model, requests, pairs, ex, lam=lam, base_hash=digest)
    evalkit.write_timing_csv(pipeline.timing_rows(results), run.path("timing.csv"))
    with open(run.path("compare_metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "split", "K", "metric", "value"])
        for arm, r in results.items():
            if r["report"] is None:
                w.writerow([arm, "", "", "error", r["error"]])
                continue
            for split_name, k, metric, v in r["report"].rows():
                w.writerow([arm, split_name, k, metric, f"{v:.6f}"])
    for arm, r in results.items():
        if r["report"] is None:
            print(f"{arm:9s} FAILED: {r['error']}")
            continue
        rel = "" if r["relative"] is None else f" ({r['relative']:.3f} of retrain)"
        print(f"{arm:9s} {r['seconds']:8.2f}s{rel}  warm NDCG@10 {r['report'].get('warm', 10, 'ndcg'):.4f}  "
              f"cold NDCG@10 {r['report'].values.get(('cold', 10, 'ndcg'), 0.0):.4f}")
    run.record("compare", ["ckpt/model.gred", "requests.jsonl"], ["timing.csv", "compare_metrics.csv"])


def cmd_ablate(run: Run, args):
    tk = load_tokenized(run)
    model, digest = load_model(run)
    requests = load_requests(run)
    choices, acc = load_choices(run)
    ex = pipeline.eval_examples(run.cfg, tk)
    over = {}
    if args.arm == "one-one-off":
        bundle = load_bundle(run.require("bundle.bin", "edit bundle", "sidedit edit"), run.path("ckpt/model.gred"))
        over["mode"] = "all-on"
    elif args.arm in ("classifier-random", "classifier-worst"):
        alt = pipeline.alternative_choices(acc, args.arm.split("-")[1], run.cfg.locator.seed)
        bundle, _, _ = pipeline.edit_model(run.cfg, tk, model, requests, alt, digest, edit_lambda(run, args))
        print("layers:", {p: c.layer for p, c in alt.items()})
    elif args.arm == "position-wise-off":
        bundle = pipeline.objectwise_edit(run.cfg, tk, model, requests, choices, digest, edit_lambda(run, args))
        over["mode"] = "all-on"
    else:
        raise ConfigError(f"unknown ablation arm {args.arm!r}")
    rep, _ = pipeline.evaluate_model(run.cfg, tk, model, ex, bundle=bundle, **over)
    out = f"ablate_{args.arm}.csv"
    rep.to_csv(run.path(out))
    _print_report(rep, run.cfg.eval.iid_norm)
    run.record(f"ablate:{args.arm}", ["ckpt/model.gred", "requests.jsonl", "probes.jsonl"], [out])


def _print_report(rep, iid_norm: str):
    drop = "iid_ratio_paper" if iid_norm == "share" else "iid_share"
    shown = evalkit.MetricsReport({k: v for k, v in rep.values.items() if k[2] != drop}, rep.timing, rep.counts)
    print(shown.table())
    print("examples:", ", ".join(f"{k}={v}" for k, v in rep.counts.items()))


COMMANDS = {
    "tokenize": cmd_tokenize,
    "train": cmd_train,
    "diagnose": cmd_diagnose,
    "prepare-knowledge": cmd_prepare_knowledge,
    "locate": cmd_locate,
    "edit": cmd_edit,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
}


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (default: the run directory's config.ini)")
    common.add_argument("--out", default="runs/default", help="run directory")
    common.add_argument("--seed", type=int, help="seed for every stage")
    common.add_argument("--threads", type=int, help="torch thread budget")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key")
    common.add_argument("--lambda", dest="lam", type=float, help="edit strength")
    common.add_argument("--beam", type=int, help="beam width")
    common.add_argument("--top-k", dest="top_k", type=int, help="length of the recommendation list")
    common.add_argument("--constrain-trie", action="store_true", default=None, help="restrict decoding to catalog SIDs")
    common.add_argument("--iid-norm", choices=("paper", "share"), help="IID ratio normalization shown")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sidedit", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "edit":
            sp.add_argument("--tune-lambda", action="store_true", help="pick lambda from the grid on validation")
        if name == "evaluate":
            sp.add_argument("--no-bundle", action="store_true", help="evaluate the base model even if a bundle exists")
            sp.add_argument("--gating", choices=("one-one", "all-on", "off"), help="edit gating mode")
        if name == "ablate":
            sp.add_argument("--arm", required=True, choices=ARMS)
    return p


def resolve_config(args) -> RunConfig:
    root = Path(args.out)
    if args.config:
        cfg = RunConfig.load(args.config)
    elif (root / "config.ini").exists():
        cfg = RunConfig.load(root / "config.ini")
    else:
        cfg = RunConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    if args.seed is not None:
        for sec in ("data", "tokenizer", "model", "train", "locator", "edit", "eval", "run"):
            cfg.set(f"{sec}.seed", args.seed)
    if args.threads is not None:
        cfg.set("run.threads", args.threads)
    for flag, key in (("lam", "edit.lam"), ("beam", "decode.beam"), ("top_k", "decode.top_k"),
                      ("constrain_trie", "decode.constrain"), ("iid_norm", "eval.iid_norm"),
                      ("gating", "decode.mode")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg.set(key, val)
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        pipeline.set_threads(cfg.run.threads)
        run = Run(args.out, cfg)
        run.root.mkdir(parents=True, exist_ok=True)
        cfg_path = run.path("config.ini")
        if args.command == "tokenize" or not cfg_path.exists():
            cfg.save(cfg_path)
        elif cfg_path.read_text() != cfg.to_ini():
            # per-command overrides are recorded next to the outputs they produced
            cfg.save(run.path(f"config.{args.command}.ini"))
        COMMANDS[args.command](run, args)
    except SidEditError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return PrerequisiteMissing.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
