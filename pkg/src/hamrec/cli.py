"""``hamrec`` command line: prep, train, export, eval, retrieve and bench.

Exit status is 0 on success, 1 when inputs or settings are invalid and 2
when a run fails after validation (for example a diverging loss).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import config as C
from .graph import (
    build_graph, dataset_summary, load_interactions, load_prepared, save_prepared, split,
)
from .hamming import CodeMatrix, read_codes
from .metrics import evaluate
from .retrieval import bench, build_index, topk_probe, topk_scan, write_results
from .trainer import (
    CheckpointError, TrainReport, Trainer, TrainingDiverged, TrainState, export_codes,
    load_checkpoint, save_checkpoint, stream, validation_split, write_exported,
)

MODEL_KEYS = ("K", "L", "self_weight", "normalize_neighbors", "readout", "beta0", "beta_growth",
              "beta_period", "beta_max", "score_scale")
TRAIN_KEYS = ("epochs", "triples_per_epoch", "batch_size", "lr", "reg", "eval_every", "patience",
              "eval_k", "sampling")
COMMON = ("seed", "workers", "log_level")


def _exported_graph(data_dir):
    """The graph codes are computed on: train events minus the validation hold-out."""
    train, test, _ = load_prepared(data_dir)
    inner, val = validation_split(train)
    return train, test, inner, val, build_graph(inner)


def _model_file(run_dir) -> Path:
    return Path(run_dir) / "model.hsck"


def cmd_prep(cfg):
    ds = load_interactions(cfg["input"], cfg["format"])
    train, test, info = split(ds, C.split_spec(cfg))
    summary = dataset_summary(ds, info)
    save_prepared(cfg["out"], train, test, summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_train(cfg):
    mc, tc = C.model_config(cfg), C.train_config(cfg)
    _, _, _, val, graph = _exported_graph(cfg["data"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(C.format_config(cfg))
    trainer = Trainer(graph, mc, tc, validation=val, workers=cfg["workers"])
    state, report = None, TrainReport()
    if cfg["resume"]:
        ck = load_checkpoint(cfg["resume"])
        if (ck.n_users, ck.n_items, ck.K) != (graph.n_users, graph.n_items, mc.K):
            raise C.ConfigError(f"{cfg['resume']}: checkpoint shape does not match the dataset and K")
        if ck.model_config(mc) != mc:
            raise C.ConfigError(f"{cfg['resume']}: checkpoint model settings differ from the run config")
        state = ck.state
        old = out / "report.jsonl"
        if old.is_file():
            report.records = [r for r in TrainReport.read(old).records if r.epoch < state.epoch]
    state, report = trainer.run(state, report, checkpoint_path=out / "checkpoint.hsck")
    report.write(out / "report.jsonl")
    best = trainer.result(state)
    final = TrainState(best, np.zeros_like(best), np.zeros_like(best), epoch=state.epoch, beta=state.beta,
                       best_epoch=state.best_epoch, best_score=state.best_score)
    save_checkpoint(_model_file(out), final, mc, graph.n_users)
    write_exported(out / "codes", *export_codes(best, graph, mc))
    summary = {"epochs_run": state.epoch, "best_epoch": report.best_epoch,
               "stopped_early": report.stopped_early, "best_recall": None}
    if state.best_epoch >= 0:
        summary["best_recall"] = state.best_score
    print(json.dumps(summary, sort_keys=True))


def cmd_export(cfg):
    ck = load_checkpoint(_model_file(cfg["run"]))
    _, _, _, _, graph = _exported_graph(cfg["data"])
    if (ck.n_users, ck.n_items) != (graph.n_users, graph.n_items):
        raise C.ConfigError("model and dataset disagree on user or item counts")
    users, items = export_codes(ck.state.embeddings, graph, ck.model_config())
    write_exported(cfg["out"], users, items)
    print(json.dumps({"users": len(users), "items": len(items), "K": users.K}))


def _load_codes(directory):
    d = Path(directory)
    return read_codes(d / "users.hsgc"), read_codes(d / "items.hsgc")


def cmd_eval(cfg):
    users, items = _load_codes(cfg["codes"])
    train, test, inner, val, inner_graph = _exported_graph(cfg["data"])
    if cfg["target"] == "validation":
        events, seen = val, inner_graph
    else:
        events, seen = test, build_graph(train)
    table = evaluate(users, items, events, seen, ks=cfg["ks"], workers=cfg["workers"])
    print(table.to_text())
    if cfg["out"]:
        Path(cfg["out"]).write_text(table.to_json() + "\n")


def cmd_retrieve(cfg):
    users, items = _load_codes(cfg["codes"])
    train, _, _ = load_prepared(cfg["data"])
    graph = build_graph(train)
    umap = train.user_map()
    if cfg["user"] is not None:
        if cfg["user"] not in umap:
            raise C.ConfigError(f"unknown user {cfg['user']!r}")
        wanted = [umap[cfg["user"]]]
    else:
        wanted = range(train.n_users)
    index = build_index(items, cfg["bands"])
    results = []
    for u in wanted:
        ex = graph.items_of(u) if cfg["exclude_train"] else None
        if cfg["bands"] is None:
            results.append(topk_scan(index, users[u], cfg["k"], exclude=ex))
        else:
            results.append(topk_probe(index, users[u], cfg["k"], radius=cfg["radius"], exclude=ex))
    tokens = np.array(train.item_tokens, dtype=object)
    named = [type(r)(tokens[r.items], r.scores, r.candidates) for r in results]
    qids = [train.user_tokens[u] for u in wanted]
    with (open(cfg["out"], "w") if cfg["out"] else nullcontext(sys.stdout)) as fh:
        write_results(fh, qids, named)


def cmd_bench(cfg):
    rng = stream(cfg["seed"], "bench")
    if cfg["codes"]:
        users, items = _load_codes(cfg["codes"])
        pick = rng.integers(0, len(users), cfg["queries"])
        queries = CodeMatrix(users.words[pick], users.K)
    else:
        K = cfg["K"]
        items = CodeMatrix.from_signs(rng.choice(np.array([-1, 1], np.int8), size=(cfg["items"], K)))
        queries = CodeMatrix.from_signs(rng.choice(np.array([-1, 1], np.int8), size=(cfg["queries"], K)))
    report = bench(build_index(items), queries, k=cfg["k"], repeats=cfg["repeats"])
    print(report.to_text())
    if cfg["out"]:
        Path(cfg["out"]).write_text(report.to_json() + "\n")


COMMANDS = {
    "prep": (cmd_prep, "read an interaction log, split it and write a prepared dataset",
             ("input", "format", "split", "split_k", "split_ratio", "out") + COMMON, ("input", "out")),
    "train": (cmd_train, "train a model on a prepared dataset and export its codes",
              ("data", "out", "resume") + MODEL_KEYS + TRAIN_KEYS + COMMON, ("data", "out")),
    "export": (cmd_export, "write hard codes for a trained model",
               ("run", "data", "out") + COMMON, ("run", "data", "out")),
    "eval": (cmd_eval, "full-ranking Recall, NDCG and HitRate of exported codes",
             ("codes", "data", "target", "ks", "out") + COMMON, ("codes", "data")),
    "retrieve": (cmd_retrieve, "top-k items per user by Hamming similarity",
                 ("codes", "data", "user", "k", "bands", "radius", "exclude_train", "out") + COMMON,
                 ("codes", "data")),
    "bench": (cmd_bench, "time packed popcount scans against real-valued inner products",
              ("codes", "K", "items", "queries", "k", "repeats", "out") + COMMON, ()),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hamrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text, keys, required) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="file of 'key = value' settings; flags win (default: none)")
        C.add_options(p, keys, required)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return 0 if exc.code == 0 else 1
    func, _, keys, required = COMMANDS[args.command]
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = C.resolve(keys, flags, args.config, required)
        if args.command == "train":
            C.model_config(cfg), C.train_config(cfg)
    except ValueError as exc:
        print(f"hamrec {args.command}: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=cfg["log_level"].upper(), format="%(message)s", stream=sys.stderr)
    sys.stderr.write(f"# hamrec {args.command}\n" + "".join("# " + l + "\n" for l in C.format_config(cfg).splitlines()))
    try:
        func(cfg)
    except (ValueError, FileNotFoundError, CheckpointError) as exc:
        print(f"hamrec {args.command}: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, OSError, RuntimeError) as exc:
        print(f"hamrec {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
