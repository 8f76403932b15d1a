"""End-to-end runs shared by the CLI and the acceptance tests."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, RunConfig
from .evaluation import (
    CUTOFFS,
    EvalReport,
    config_digest,
    evaluate,
    format_table,
    popularity_baseline,
    write_report,
)
from .graph import MultiBehaviorGraph
from .interactions import (
    BehaviorSchema,
    DataError,
    IdMaps,
    InteractionTensor,
    Split,
    SynthSpec,
    aux_target_correlation,
    density,
    leave_one_out_split,
    load_events,
    synth_generate,
    write_events,
)
from .model import GNMR
from .pretrain import pretrain_init
from .training import TrainLog, save_log, train

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def synth_to_dir(spec: SynthSpec, seed: int, out_dir) -> dict:
    """Write ``events.tsv`` and ``manifest.json`` for a synthetic dataset."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x = synth_generate(spec, seed)
    schema = spec.schema()
    write_events(out / "events.tsv", x, schema)
    manifest = {
        "generator": spec.to_dict(),
        "seed": seed,
        "schema": schema.to_dict(),
        "shape": list(x.shape),
        "events": len(x),
        "events_per_behavior": x.counts_per_behavior().tolist(),
        "density": density(x),
        "aux_target_correlation": aux_target_correlation(x, schema.target_index),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def resolve_schema(cfg: RunConfig) -> RunConfig:
    """Fill behavior names and target from a manifest next to the data file when not given."""
    if cfg.behavior_names is not None or cfg.data is None:
        return cfg
    manifest = Path(cfg.data).with_name(MANIFEST)
    if not manifest.exists():
        raise ConfigError(["behavior names are unknown; pass --behavior-names (no manifest.json found)"])
    schema = BehaviorSchema.from_dict(json.loads(manifest.read_text(encoding="utf-8"))["schema"])
    return replace(cfg, behavior_names=schema.names, target=cfg.target or schema.target)


@dataclass
class Prepared:
    cfg: RunConfig
    schema: BehaviorSchema
    data: InteractionTensor
    ids: IdMaps
    split: Split
    graph: MultiBehaviorGraph


def prepare(cfg: RunConfig) -> Prepared:
    cfg = resolve_schema(cfg)
    cfg.validate()
    if cfg.data is None:
        raise ConfigError(["--data is required"])
    schema = cfg.schema()
    x, ids = load_events(cfg.data, schema)
    split = leave_one_out_split(x, cfg.seed, schema.target_index, validation=cfg.validation,
                                exclude_auxiliary=cfg.exclude_auxiliary_negatives)
    return Prepared(cfg, schema, x, ids, split, MultiBehaviorGraph.build(split.train))


def fit(cfg: RunConfig, schema: BehaviorSchema, split: Split,
        graph: MultiBehaviorGraph | None = None, verbose: bool = False) -> tuple[GNMR, TrainLog]:
    """Pretrain H0, build the model under ``cfg``'s flags and train it."""
    hyper = cfg.hyper(schema.K)
    flags = cfg.flags(schema)
    # pretraining sees only the behaviors the variant may use
    visible = split.train.restrict_behaviors(flags.active(schema.K, schema.target_index))
    H0 = pretrain_init(visible, cfg.dim, cfg.seed, cfg.init, cfg.pretrain_epochs, scale=cfg.init_scale)
    model = GNMR.create(hyper, split.train.n_users, split.train.n_items, schema.target_index,
                        cfg.seed, flags, H0)
    tcfg = replace(cfg.train_config(), verbose=verbose)
    return train(split, model, tcfg, graph)


def run_train(cfg: RunConfig, verbose: bool = False) -> dict:
    """Train and write ``config.json``, ``split.json``, ``ids.json``, ``best.ckpt``, ``train_log.csv``."""
    prep = prepare(cfg)
    cfg = prep.cfg
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    conf = cfg.to_dict()
    (out / "config.json").write_text(json.dumps({"run_config": conf}, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    prep.split.save(out / "split.json")
    (out / "ids.json").write_text(json.dumps(prep.ids.to_dict()), encoding="utf-8")
    model, tlog = fit(cfg, prep.schema, prep.split, prep.graph, verbose)
    model.save(out / "best.ckpt", conf)
    save_log(tlog, out)
    summary = {"epochs": len(tlog.records), "final_loss": tlog.records[-1].loss,
               "test_hr10": None, "test_ndcg10": None, "test_users": 0, "out": str(out)}
    if len(prep.split.test):
        report = evaluate(model, prep.split, (10,))
        summary.update(test_hr10=report.hr[10], test_ndcg10=report.ndcg[10], test_users=report.n_users)
    return summary


def run_evaluate(ckpt, split_path, out_dir, cutoffs: Sequence[int] = CUTOFFS,
                 baseline: str | None = None) -> tuple[EvalReport, list[EvalReport]]:
    model = GNMR.load(ckpt)
    split = Split.load(split_path)
    if len(split.test) == 0:
        raise DataError(f"{split_path} has no test users (every user lacked 2 target events "
                        "or 99 eligible negatives)")
    conf = json.loads(Path(ckpt).read_text(encoding="utf-8")).get("config", {})
    report = evaluate(model, split, cutoffs, digest=config_digest(conf))
    extra = []
    if baseline == "popularity":
        extra.append(popularity_baseline(split, cutoffs))
    elif baseline is not None:
        raise ConfigError([f"unknown baseline {baseline!r}"])
    write_report(report, out_dir, extra=extra, config=conf)
    return report, extra


def ablation_variants(schema: BehaviorSchema, cfg: RunConfig) -> dict[str, RunConfig]:
    """Every ablation variant as a modified run configuration, in a fixed order."""
    v = {"full": cfg,
         "no-behavior-embedding": replace(cfg, ablate_be=True),
         "no-attention": replace(cfg, ablate_ma=True)}
    for k, name in enumerate(schema.names):
        if k == schema.target_index:
            continue
        keep = [n for n in schema.names if n != name]
        v[f"without-{name}"] = replace(cfg, behaviors_use=",".join(keep))
    v["only-target"] = replace(cfg, behaviors_use="target")
    for depth in range(4):
        v[f"depth-{depth}"] = replace(cfg, layers=depth)
    return v


def run_ablate(cfg: RunConfig, variants: Sequence[str] | None = None, seeds: int = 1,
               verbose: bool = False) -> list[dict]:
    """Train each requested variant for each seed and tabulate HR@10 / NDCG@10."""
    cfg = resolve_schema(cfg)
    cfg.validate()
    schema = cfg.schema()
    grid = ablation_variants(schema, cfg)
    names = list(grid) if not variants else list(variants)
    unknown = [n for n in names if n not in grid]
    if unknown:
        raise ConfigError([f"unknown variant(s) {unknown}; choose from {list(grid)}"])
    x, _ = load_events(cfg.data, schema)
    out = Path(cfg.out)
    rows = []
    splits = {}
    for name in names:
        hr, ndcg, failures = [], [], []
        for i in range(seeds):
            seed = cfg.seed + i
            if seed not in splits:
                splits[seed] = leave_one_out_split(x, seed, schema.target_index,
                                                   validation=cfg.validation,
                                                   exclude_auxiliary=cfg.exclude_auxiliary_negatives)
            split = splits[seed]
            vcfg = replace(grid[name], seed=seed, out=str(out / "variants" / name / f"seed{seed}"))
            try:
                vcfg.validate()
                model, tlog = fit(vcfg, schema, split, verbose=verbose)
                vdir = Path(vcfg.out)
                vdir.mkdir(parents=True, exist_ok=True)
                model.save(vdir / "best.ckpt", vcfg.to_dict())
                save_log(tlog, vdir)
                rep = evaluate(model, split, (10,))
                hr.append(rep.hr[10])
                ndcg.append(rep.ndcg[10])
            except Exception as err:  # recorded, not fatal
                log.error("variant %s seed %d failed: %s", name, seed, err)
                failures.append(f"seed {seed}: {err}")
        rows.append({
            "variant": name,
            "seeds": len(hr),
            "hr10_mean": float(np.mean(hr)) if hr else None,
            "ndcg10_mean": float(np.mean(ndcg)) if ndcg else None,
            "hr10": hr,
            "ndcg10": ndcg,
            "failures": failures,
        })
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(
        json.dumps({"run_config": cfg.to_dict(), "rows": rows}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    (out / "ablation.txt").write_text(ablation_table(rows), encoding="utf-8")
    return rows


def ablation_table(rows: Sequence[dict]) -> str:
    head = ["variant", "HR@10", "NDCG@10", "seeds", "failed"]
    body = [[r["variant"],
             "-" if r["hr10_mean"] is None else f"{r['hr10_mean']:.4f}",
             "-" if r["ndcg10_mean"] is None else f"{r['ndcg10_mean']:.4f}",
             str(r["seeds"]), str(len(r["failures"]))] for r in rows]
    widths = [max(len(x[c]) for x in [head] + body) for c in range(len(head))]
    lines = ["  ".join(v.ljust(w) if c == 0 else v.rjust(w) for c, (v, w) in enumerate(zip(row, widths)))
             for row in [head] + body]
    return "\n".join(lines) + "\n"


__all__ = ["Prepared", "ablation_table", "ablation_variants", "fit", "format_table", "prepare",
           "resolve_schema", "run_ablate", "run_evaluate", "run_train", "synth_to_dir"]
