"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command writes ``<output>.manifest.csv`` next to its main output.
"""
from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .ablation import ablate, parse_axis
from .autodiff import NumericError
from .corpus import (KEYPOINT_NAMES, ClassLabel, CorpusFormatError, group_stratified_kfold,
                     parse_corpus, split_disjoint_subjects, write_corpus)
from .graph import HETERO_AGGREGATORS, NODE_AGGREGATORS, extract_disfluency_keywords
from .model import FUSION_KINDS, MODALITY_SUBSETS, AphasiaModel, ModelConfig, export_attention
from .stats import anova_oneway, grouped_wer, pose_std_report, write_pose_std_report
from .synthetic import SyntheticConfig, generate_synthetic
from .training import PUBLISHED_GAMMA, TrainConfig, evaluate, history_rows, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def write_table(rows: Sequence[Sequence], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return path


def manifest_path(output) -> Path:
    p = Path(output)
    return p / "manifest.csv" if p.is_dir() else p.with_name(p.name + ".manifest.csv")


def write_manifest(output, command: str, settings: dict, seed) -> Path:
    rows = [["key", "value"], ["command", command], ["seed", seed],
            ["package_version", __version__], ["python_version", platform.python_version()],
            ["numpy_version", np.__version__], ["scipy_version", scipy.__version__]]
    for k in sorted(settings):
        v = settings[k]
        rows.append([k, json.dumps(v, sort_keys=True) if isinstance(v, (dict, list)) else v])
    return write_table(rows, manifest_path(output))


# ---------------------------------------------------------------------------
# config from flags
# ---------------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with a TrainConfig (flags override it)")
    p.add_argument("--preset", choices=("desk", "large"), default="desk",
                   help="model size; large is 768 wide with lr 1e-5 (config and flags override)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--published-gamma", action="store_true",
                   help=f"use the schedule gamma {PUBLISHED_GAMMA} instead of --gamma")
    p.add_argument("--seed", type=int)
    p.add_argument("--m", type=int, help="number of disfluency keywords")
    p.add_argument("--node-agg", choices=NODE_AGGREGATORS)
    p.add_argument("--hetero-agg", choices=HETERO_AGGREGATORS)
    p.add_argument("--fusion", choices=FUSION_KINDS)
    p.add_argument("--modalities", choices=MODALITY_SUBSETS)
    p.add_argument("--no-graph", action="store_true")
    p.add_argument("--no-update", action="store_true")
    p.add_argument("--dropout", type=float)
    p.add_argument("--quiet", action="store_true", help="no per-epoch or per-run progress")


def _train_config(args) -> TrainConfig:
    base = TrainConfig(lr=1e-5, model=ModelConfig.large()) if args.preset == "large" \
        else TrainConfig()
    if args.config:
        base = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    d = base.to_dict()
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("patience", "patience"), ("lr", "lr"), ("gamma", "gamma"),
                      ("seed", "seed"), ("m", "n_keywords")):
        v = getattr(args, flag)
        if v is not None:
            d[key] = v
    if args.published_gamma:
        d["published_gamma"] = True
    md = d["model"]
    for flag, key in (("node_agg", "node_agg"), ("hetero_agg", "hetero_agg"),
                      ("fusion", "fusion"), ("modalities", "modalities"), ("dropout", "dropout")):
        v = getattr(args, flag)
        if v is not None:
            md[key] = v
    if args.no_graph:
        md["use_graph"] = False
    if args.no_update:
        md["update_embeddings"] = False
    try:
        cfg = TrainConfig.from_dict(d)
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid training configuration: {e}") from e
    return cfg


def _train_settings(cfg: TrainConfig) -> dict:
    s = {"train_config": cfg.to_dict(), "schedule_gamma": cfg.effective_gamma}
    s["schedule_note"] = (f"published gamma {PUBLISHED_GAMMA} in use" if cfg.published_gamma else
                          f"desk-scale gamma {cfg.gamma}; published value {PUBLISHED_GAMMA} "
                          "decays lr to ~0 after one epoch (enable with --published-gamma)")
    return s


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = SyntheticConfig()
    if args.config:
        cfg = SyntheticConfig.from_dict(json.loads(Path(args.config).read_text()))
    d = cfg.to_dict()
    for flag, key in (("seed", "seed"), ("subjects_per_class", "subjects_per_class"),
                      ("sessions_per_subject", "sessions_per_subject"), ("chunk", "chunk_size")):
        v = getattr(args, flag)
        if v is not None:
            d[key] = v
    cfg = SyntheticConfig.from_dict(d)
    corpus = generate_synthetic(cfg)
    write_corpus(corpus, args.out)
    write_manifest(args.out, "generate", {"synthetic_config": cfg.to_dict(),
                                          "samples": len(corpus)}, cfg.seed)
    print(f"wrote {len(corpus)} samples to {args.out}")
    return EXIT_OK


def cmd_keywords(args) -> int:
    corpus = parse_corpus(args.corpus)
    vocab = extract_disfluency_keywords(corpus.samples, args.m)
    vocab.save(args.out)
    write_manifest(args.out, "keywords", {"corpus": args.corpus, "m": args.m}, "")
    print("\n".join(vocab.keywords))
    return EXIT_OK


def cmd_split(args) -> int:
    corpus = parse_corpus(args.corpus)
    tr, te = split_disjoint_subjects(corpus, args.ratio, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(tr, out / "train.jsonl")
    write_corpus(te, out / "test.jsonl")
    write_manifest(out, "split", {"corpus": args.corpus, "ratio": args.ratio,
                                  "train_samples": len(tr), "test_samples": len(te),
                                  "test_subjects": te.subjects()}, args.seed)
    print(f"train {len(tr)} samples, test {len(te)} samples")
    return EXIT_OK


def cmd_kfold(args) -> int:
    corpus = parse_corpus(args.corpus)
    folds = group_stratified_kfold(corpus, args.k, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    settings = {"corpus": args.corpus, "k": args.k}
    for i, (tr, va) in enumerate(folds):
        write_corpus(tr, out / f"fold{i}_train.jsonl")
        write_corpus(va, out / f"fold{i}_val.jsonl")
        settings[f"fold{i}_val_subjects"] = va.subjects()
    write_manifest(out, "kfold", settings, args.seed)
    print(f"wrote {len(folds)} folds to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    corpus = parse_corpus(args.corpus)
    val = parse_corpus(args.val) if args.val else None
    result = train(corpus, cfg, val, log=(lambda r: print(
        f"epoch {r['epoch']:3d} loss {r['train_loss']:.4f} val_f1 {r['val_f1']:.4f}"))
        if not args.quiet else None)
    result.model.save(args.out)
    write_table(history_rows(result.history), str(args.out) + ".history.csv")
    settings = _train_settings(cfg)
    settings.update({"corpus": args.corpus, "val": args.val or "",
                     "best_epoch": result.best_epoch, "best_val_f1": repr(result.best_val_f1),
                     "stopped_epoch": result.stopped_epoch})
    write_manifest(args.out, "train", settings, cfg.seed)
    print(f"best validation weighted F1 {result.best_val_f1:.4f} at epoch {result.best_epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = AphasiaModel.load(args.model)
    corpus = parse_corpus(args.corpus)
    rep = evaluate(model, corpus)
    rows = rep.rows()
    write_table(rows, args.out)
    conf = [["true\\pred"] + [c.display for c in ClassLabel]]
    conf += [[ClassLabel(i).display] + list(map(int, r)) for i, r in enumerate(rep.confusion)]
    write_table(conf, str(args.out) + ".confusion.csv")
    write_manifest(args.out, "eval", {"model": args.model, "corpus": args.corpus,
                                      "weighted_f1": repr(rep.weighted_f1)}, "")
    for r in rows:
        print(",".join(map(str, r)))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    corpus = parse_corpus(args.corpus)
    try:
        grid = dict(parse_axis(a) for a in args.axis)
    except ValueError as e:
        raise UsageError(str(e)) from e
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rows = ablate(corpus, grid, cfg, seeds, args.split_seed,
                  log=None if args.quiet else
                  (lambda r: print(", ".join(f"{k}={v}" for k, v in r.items()))))
    cols = list(grid) + ["seed", "n_train", "n_test", "best_epoch", "val_f1", "precision",
                         "recall", "f1"]
    table = [cols] + [[r[c] if not isinstance(r[c], float) else repr(r[c]) for c in cols]
                      for r in rows]
    write_table(table, args.out)
    settings = _train_settings(cfg)
    settings.update({"corpus": args.corpus, "grid": {k: [str(v) for v in vs]
                                                     for k, vs in grid.items()},
                     "seeds": seeds, "split_seed": args.split_seed})
    write_manifest(args.out, "ablate", settings, cfg.seed)
    return EXIT_OK


def _read_wer_pairs(path) -> list[tuple]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"group", "reference", "hypothesis"} <= set(rows[0]):
        raise ValueError("WER input needs columns group,reference,hypothesis")
    return [(r["group"], r["reference"].split(), r["hypothesis"].split()) for r in rows]


def cmd_analyze(args) -> int:
    if args.analysis == "wer":
        res = grouped_wer(_read_wer_pairs(args.input), preprocess=args.preprocess)
        rows = [["group", "n", "wer_sample_weighted", "wer_token_weighted"]]
        rows += [[g, v["n"], repr(v["sample_weighted"]), repr(v["token_weighted"])]
                 for g, v in sorted(res.items())]
        settings = {"input": args.input, "preprocess": args.preprocess}
    elif args.analysis == "anova":
        corpus = parse_corpus(args.input)
        rows = [["feature", "F", "p"]]
        per_sample = {c: [] for c in ClassLabel}
        for s in corpus.samples:
            per_sample[s.label].append(np.std(s.gesture_matrix(), axis=0))
        groups = {c: np.stack(v) for c, v in per_sample.items() if v}
        feats = [f"{k}_{ax}" for k in KEYPOINT_NAMES for ax in "xyz"]
        for j, name in enumerate(feats):
            try:
                F, p = anova_oneway([g[:, j] for g in groups.values()])
                rows.append([name, repr(F), repr(p)])
            except ValueError:
                rows.append([name, "nan", "nan"])
        settings = {"input": args.input, "feature": "per-sample std of each coordinate"}
    else:
        corpus = parse_corpus(args.input)
        write_pose_std_report(pose_std_report(corpus), args.out)
        write_manifest(args.out, "analyze pose-std", {"input": args.input}, "")
        return EXIT_OK
    write_table(rows, args.out)
    write_manifest(args.out, f"analyze {args.analysis}", settings, "")
    for r in rows:
        print(",".join(map(str, r)))
    return EXIT_OK


def cmd_export_attention(args) -> int:
    model = AphasiaModel.load(args.model)
    corpus = parse_corpus(args.corpus)
    if not 0 <= args.sample < len(corpus):
        raise ValueError(f"sample index {args.sample} out of range [0, {len(corpus)})")
    s = corpus.samples[args.sample]
    batch = model.make_batch([s], keys=[f"{s.session_id or s.subject_id}#{args.sample}"])
    _, trace = model.forward(batch, training=False)
    paths = export_attention(trace, batch, 0, args.out_dir)
    write_manifest(Path(args.out_dir), "export-attention",
                   {"model": args.model, "corpus": args.corpus, "sample": args.sample,
                    "files": [p.name for p in paths]}, "")
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aphasiagnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--subjects-per-class", type=int)
    g.add_argument("--sessions-per-subject", type=int)
    g.add_argument("--chunk", type=int)
    g.add_argument("--config", help="JSON file with SyntheticConfig fields")
    g.set_defaults(func=cmd_generate)

    k = sub.add_parser("keywords", help="extract the disfluency vocabulary")
    k.add_argument("--corpus", required=True)
    k.add_argument("--m", type=int, required=True)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_keywords)

    s = sub.add_parser("split", help="subject-disjoint train/test split")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--ratio", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    f = sub.add_parser("kfold", help="group-stratified k-fold")
    f.add_argument("--corpus", required=True)
    f.add_argument("--out-dir", required=True)
    f.add_argument("--k", type=int, default=5)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_kfold)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--corpus", required=True)
    t.add_argument("--val")
    t.add_argument("--out", required=True)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("--corpus", required=True)
    a.add_argument("--axis", action="append", required=True,
                   help="name=v1,v2 with name in node, hetero, fusion, modality, m, chunk, "
                        "graph, update")
    a.add_argument("--seeds")
    a.add_argument("--split-seed", type=int, default=0)
    a.add_argument("--out", required=True)
    _add_train_flags(a)
    a.set_defaults(func=cmd_ablate)

    z = sub.add_parser("analyze", help="WER, ANOVA or pose-std reports")
    z.add_argument("analysis", choices=("wer", "anova", "pose-std"))
    z.add_argument("--input", required=True,
                   help="CSV of group,reference,hypothesis for wer; a corpus otherwise")
    z.add_argument("--out", required=True)
    z.add_argument("--preprocess", action="store_true")
    z.set_defaults(func=cmd_analyze)

    x = sub.add_parser("export-attention", help="write cross-modal attention matrices")
    x.add_argument("--model", required=True)
    x.add_argument("--corpus", required=True)
    x.add_argument("--sample", type=int, default=0)
    x.add_argument("--out-dir", required=True)
    x.set_defaults(func=cmd_export_attention)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusFormatError, OSError, ValueError, KeyError, IndexError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
