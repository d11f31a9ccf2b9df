"""Grid runner over model and data axes, plus the k-fold protocol."""
from __future__ import annotations

import itertools
from dataclasses import replace
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import Corpus, group_stratified_kfold, rechunk, split_disjoint_subjects
from .graph import HETERO_AGGREGATORS, NODE_AGGREGATORS
from .model import FUSION_KINDS, MODALITY_SUBSETS
from .training import TrainConfig, evaluate, train

_BOOL = {"on": True, "true": True, "1": True, "yes": True,
         "off": False, "false": False, "0": False, "no": False}


def _choice(valid):
    def parse(v: str):
        if v not in valid:
            raise ValueError(f"invalid value {v!r}; valid values: {', '.join(valid)}")
        return v
    return parse


def _positive_int(v: str) -> int:
    try:
        n = int(v)
    except ValueError:
        n = 0
    if n < 1:
        raise ValueError(f"invalid value {v!r}; valid values: positive integers")
    return n


def _bool(v: str) -> bool:
    if v.lower() not in _BOOL:
        raise ValueError(f"invalid value {v!r}; valid values: on, off")
    return _BOOL[v.lower()]


AXES = {
    "node": _choice(NODE_AGGREGATORS),
    "hetero": _choice(HETERO_AGGREGATORS),
    "fusion": _choice(FUSION_KINDS),
    "modality": _choice(MODALITY_SUBSETS),
    "m": _positive_int,
    "chunk": _positive_int,
    "graph": _bool,
    "update": _bool,
}


def parse_axis(spec: str) -> tuple[str, list]:
    """``"hetero=min,max"`` to ``("hetero", ["min", "max"])``."""
    if "=" not in spec:
        raise ValueError(f"axis spec {spec!r} must look like name=v1,v2")
    name, values = spec.split("=", 1)
    name = name.strip()
    if name not in AXES:
        raise ValueError(f"unknown axis {name!r}; valid axes: {', '.join(AXES)}")
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not vals:
        raise ValueError(f"axis {name!r} has no values")
    return name, [AXES[name](v) if isinstance(v, str) else v for v in vals]


def normalize_grid(grid: dict) -> dict:
    out = {}
    for name, vals in grid.items():
        if name not in AXES:
            raise ValueError(f"unknown axis {name!r}; valid axes: {', '.join(AXES)}")
        out[name] = [AXES[name](str(v).lower() if isinstance(v, bool) else str(v)) for v in vals]
    return out


def apply_point(base: TrainConfig, point: dict) -> TrainConfig:
    m = base.model
    mk = {}
    if "node" in point:
        mk["node_agg"] = point["node"]
    if "hetero" in point:
        mk["hetero_agg"] = point["hetero"]
    if "fusion" in point:
        mk["fusion"] = point["fusion"]
    if "modality" in point:
        mk["modalities"] = point["modality"]
    if "graph" in point:
        mk["use_graph"] = point["graph"]
    if "update" in point:
        mk["update_embeddings"] = point["update"]
    cfg = replace(base, model=replace(m, **mk))
    if "m" in point:
        cfg = replace(cfg, n_keywords=point["m"])
    return cfg


def run_experiment(corpus: Corpus, config: TrainConfig, split_seed: int = 0,
                   chunk: Optional[int] = None, ratio: float = 0.8) -> dict:
    """Subject-disjoint train/test split, train (inner validation split), test."""
    if chunk is not None:
        corpus = rechunk(corpus, chunk)
    tr, te = split_disjoint_subjects(corpus, ratio, split_seed)
    result = train(tr, config)
    rep = evaluate(result.model, te)
    return {"seed": config.seed, "n_train": len(tr), "n_test": len(te),
            "best_epoch": result.best_epoch, "val_f1": result.best_val_f1,
            "precision": rep.weighted_precision, "recall": rep.weighted_recall,
            "f1": rep.weighted_f1}


def ablate(corpus: Corpus, grid: dict, base: TrainConfig, seeds: Sequence[int] = (0,),
           split_seed: int = 0, log: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """One run per (grid point, seed); rows keyed by the axis values."""
    grid = normalize_grid(grid)
    names = list(grid)
    rows = []
    for values in itertools.product(*(grid[n] for n in names)):
        point = dict(zip(names, values))
        for seed in seeds:
            cfg = replace(apply_point(base, point), seed=int(seed))
            res = run_experiment(corpus, cfg, split_seed, point.get("chunk"))
            row = {**point, **res}
            rows.append(row)
            if log:
                log(row)
    return rows


def summarize(rows: Sequence[dict], axes: Sequence[str]) -> list[dict]:
    """Seed-averaged metrics per configuration."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[a] for a in axes), []).append(r)
    out = []
    for key, rs in groups.items():
        d = dict(zip(axes, key))
        d["runs"] = len(rs)
        for k in ("val_f1", "precision", "recall", "f1"):
            d[k] = float(np.mean([r[k] for r in rs]))
        out.append(d)
    return out


def cross_validate(corpus: Corpus, config: TrainConfig, k: int = 5, seed: int = 0) -> dict:
    """Group-stratified k-fold; each fold's validation part drives early stopping and scoring."""
    folds = group_stratified_kfold(corpus, k, seed)
    scores = []
    for tr, va in folds:
        res = train(tr, config, val_corpus=va)
        scores.append(evaluate(res.model, va).weighted_f1)
    return {"fold_f1": scores, "mean_f1": float(np.mean(scores)),
            "std_f1": float(np.std(scores))}
