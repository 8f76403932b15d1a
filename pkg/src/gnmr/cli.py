"""``gnmr`` command line: synth, train, evaluate, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical or
invariant failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig
from .evaluation import CUTOFFS, InvariantError, format_table
from .interactions import DataError, SynthSpec
from .ndgrad import NonFiniteError
from .pipeline import ablation_table, run_ablate, run_evaluate, run_train, synth_to_dir

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("gnmr")

# flag -> RunConfig field, for flags that override a loaded --config
_FIELD = {
    "data": "data", "out": "out", "seed": "seed",
    "behavior_names": "behavior_names", "target": "target",
    "like_min": "like_min", "dislike_max": "dislike_max",
    "dim": "dim", "mem_dims": "mem_dims", "heads": "heads", "gate_hidden": "gate_hidden",
    "layers": "layers", "norm": "norm", "residual": "residual", "score": "score",
    "init": "init", "init_scale": "init_scale", "pretrain_epochs": "pretrain_epochs",
    "behaviors_use": "behaviors_use", "ablate_be": "ablate_be", "ablate_ma": "ablate_ma",
    "epochs": "epochs", "batch": "batch", "pairs": "pairs", "lr": "lr", "decay": "decay",
    "decay_every": "decay_every", "reg": "reg", "mode": "mode", "cap": "cap",
    "validation": "validation", "patience": "patience",
    "exclude_auxiliary_negatives": "exclude_auxiliary_negatives",
}


def _csv_names(text: str) -> tuple[str, ...]:
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    if not names:
        raise argparse.ArgumentTypeError("expected a comma-separated list of names")
    return names


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from err
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("cutoffs must be positive integers")
    return vals


def _cap(text: str) -> int:
    return 0 if text.lower() == "none" else int(text)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    d = RunConfig()
    on = dict(action="store_const", const=True, default=None)
    g = p.add_argument_group("data")
    g.add_argument("--config", help="JSON run config; explicit flags override it")
    g.add_argument("--data", help="events TSV (user, item, behavior, timestamp)")
    g.add_argument("--out", help=f"output directory (default {d.out}, chosen)")
    g.add_argument("--seed", type=int, help=f"random seed (default {d.seed}, chosen)")
    g.add_argument("--behavior-names", type=_csv_names,
                   help="comma-separated behavior names; read from manifest.json when omitted")
    g.add_argument("--target", help="target behavior name (default: last behavior)")
    g.add_argument("--like-min", type=float, help=f"rating >= this is 'like' (default {d.like_min:g})")
    g.add_argument("--dislike-max", type=float,
                   help=f"rating <= this is 'dislike' (default {d.dislike_max:g})")
    g.add_argument("--validation", help="hold out a validation item per user (chosen: off)", **on)
    g.add_argument("--exclude-auxiliary-negatives", help="never sample evaluation negatives from "
                   "items the user touched under any behavior (chosen: off)", **on)

    g = p.add_argument_group("model")
    g.add_argument("--dim", type=int, help=f"embedding dimension (default {d.dim})")
    g.add_argument("--mem-dims", type=int, help=f"memory dimensions C (default {d.mem_dims})")
    g.add_argument("--heads", type=int, help=f"attention heads (default {d.heads})")
    g.add_argument("--gate-hidden", type=int, help=f"gate hidden width (default {d.gate_hidden}, chosen)")
    g.add_argument("--layers", type=int, help=f"propagation layers (default {d.layers})")
    g.add_argument("--norm", choices=("sum", "mean"), help=f"neighbor aggregation (default {d.norm}, chosen)")
    g.add_argument("--residual", choices=("single", "double"),
                   help=f"attention residual (default {d.residual}, chosen)")
    g.add_argument("--score", choices=("layer-sum", "layer-concat"),
                   help=f"multi-order matching (default {d.score}, chosen)")
    g.add_argument("--init", choices=("autoencoder", "random"), help=f"initial embeddings (default {d.init})")
    g.add_argument("--init-scale", type=float,
                   help=f"std of the initial embedding tables (default {d.init_scale:g}, chosen)")
    g.add_argument("--pretrain-epochs", type=int,
                   help=f"autoencoder epochs (default {d.pretrain_epochs}, chosen)")

    g = p.add_argument_group("ablation")
    g.add_argument("--behaviors-use", help="'all', 'target', or comma-separated behavior names "
                   f"(default {d.behaviors_use})")
    g.add_argument("--ablate-be", help="drop the behavior embedding layer (plain neighbor sums)", **on)
    g.add_argument("--ablate-ma", help="drop cross-behavior attention (identity)", **on)

    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, help=f"training epochs (default {d.epochs}, chosen)")
    g.add_argument("--batch", type=int, help=f"users per batch (default {d.batch})")
    g.add_argument("--pairs", type=int, help=f"pairs per user (default {d.pairs})")
    g.add_argument("--lr", type=float, help=f"learning rate (default {d.lr:g})")
    g.add_argument("--decay", type=float, help=f"learning-rate decay factor (default {d.decay:g})")
    g.add_argument("--decay-every", type=int,
                   help=f"epochs between decay steps (default {d.decay_every}, chosen)")
    g.add_argument("--lambda", dest="reg", type=float, help=f"L2 weight (default {d.reg:g})")
    g.add_argument("--mode", choices=("full", "sampled"),
                   help=f"full-graph or sampled-subgraph batches (default {d.mode}, chosen)")
    g.add_argument("--cap", type=_cap, help=f"neighbor cap in sampled mode, 'none' for no cap "
                   f"(default {d.cap}, chosen)")
    g.add_argument("--patience", type=int, help="early-stop patience with --validation (chosen: none)")
    p.add_argument("-v", "--verbose", action="store_true", help="per-epoch progress on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gnmr", description="Multi-behavior graph recommender.")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-behavior dataset")
    spec = SynthSpec(1, 100, 1)  # for its defaults
    s.add_argument("--users", type=int, required=True)
    s.add_argument("--items", type=int, required=True)
    s.add_argument("--behaviors", type=int, required=True, help="behavior count; the last is the target")
    s.add_argument("--rho", type=float, default=spec.rho,
                   help=f"auxiliary/target alignment in [0, 1] (default {spec.rho:g}, chosen)")
    s.add_argument("--noise", type=float, default=spec.noise,
                   help=f"affinity noise std (default {spec.noise:g}, chosen)")
    s.add_argument("--latent-dim", type=int, default=spec.latent_dim,
                   help=f"planted rank (default {spec.latent_dim}, chosen)")
    s.add_argument("--target-per-user", type=float, default=spec.target_per_user,
                   help=f"mean target events per user (default {spec.target_per_user:g}, chosen)")
    s.add_argument("--aux-per-user", type=float, default=spec.aux_per_user,
                   help=f"events per user per auxiliary behavior (default {spec.aux_per_user:g}, chosen)")
    s.add_argument("--seed", type=int, default=0, help="random seed (default 0, chosen)")
    s.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train a model and write best.ckpt, split.json, train_log.csv")
    _add_run_flags(t)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on its split")
    e.add_argument("--ckpt", required=True, help="checkpoint written by train")
    e.add_argument("--split", help="split.json (default: next to the checkpoint)")
    e.add_argument("--out", help="report directory (default: next to the checkpoint)")
    e.add_argument("--cutoffs", type=_csv_ints, default=CUTOFFS,
                   help="comma-separated N for HR@N / NDCG@N (default 1,3,5,7,9,10)")
    e.add_argument("--baseline", choices=("popularity",), help="add a baseline row")

    a = sub.add_parser("ablate", help="train and compare ablation variants")
    _add_run_flags(a)
    a.add_argument("--variants", type=_csv_names,
                   help="comma-separated variant names (default: the whole grid)")
    a.add_argument("--seeds", type=int, default=1, help="seeds per variant, counting up from --seed (default 1)")
    return parser


def run_config(args: argparse.Namespace) -> RunConfig:
    base = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg = base.merged({field: getattr(args, flag) for flag, field in _FIELD.items()})
    # --cap none parses to 0 because None already means "flag not given"
    return replace(cfg, cap=None) if args.cap == 0 else cfg


def cmd_synth(args) -> int:
    try:
        spec = SynthSpec(args.users, args.items, args.behaviors, latent_dim=args.latent_dim,
                         noise=args.noise, rho=args.rho, target_per_user=args.target_per_user,
                         aux_per_user=args.aux_per_user)
    except ValueError as err:
        raise ConfigError([str(err)]) from err
    manifest = synth_to_dir(spec, args.seed, args.out)
    print(f"wrote {manifest['events']} events to {Path(args.out) / 'events.tsv'} "
          f"(density {manifest['density']:.4f}, aux/target correlation "
          f"{manifest['aux_target_correlation']:.3f})")
    return EXIT_OK


def cmd_train(args) -> int:
    summary = run_train(run_config(args), verbose=args.verbose)
    if summary["test_users"]:
        test = (f"test HR@10 {summary['test_hr10']:.4f}, NDCG@10 {summary['test_ndcg10']:.4f} "
                f"over {summary['test_users']} users")
    else:
        test = "no evaluable test users"
    print(f"trained {summary['epochs']} epochs: final loss {summary['final_loss']:.4f}, {test} "
          f"-> {summary['out']}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = Path(args.ckpt)
    split = Path(args.split) if args.split else ckpt.with_name("split.json")
    out = Path(args.out) if args.out else ckpt.parent
    report, extra = run_evaluate(ckpt, split, out, args.cutoffs, args.baseline)
    sys.stdout.write(format_table([report, *extra]))
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.seeds < 1:
        raise ConfigError(["--seeds must be at least 1"])
    rows = run_ablate(run_config(args), args.variants, args.seeds, verbose=args.verbose)
    sys.stdout.write(ablation_table(rows))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        for msg in err.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, InvariantError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, json.JSONDecodeError, KeyError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as err:
        # remaining ValueErrors come from inputs that contradict each other or the checkpoint
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
