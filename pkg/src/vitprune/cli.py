"""Command line entry point: ``vitprune <subcommand> [options]``.

Settings come from the built-in defaults, then ``--config FILE`` (YAML or
JSON), then individual flags.  Exit codes: 0 success, 2 configuration
error, 3 data error, 4 divergence, 5 checkpoint error, 1 any other failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .checkpoint import load_checkpoint
from .errors import CheckpointError, ConfigError, DataFormatError, DivergenceError, VitPruneError
from .harness import (
    ExperimentConfig,
    _budget_for,
    _test_acc,
    ablate_batch_size,
    ablate_rho,
    ablate_soft_vs_hard,
    build_report,
    dry_run_counts,
    load_config,
    make_dataset,
    report,
    rho_rows,
    run_pipeline,
    save_config,
    stage_dense,
    stage_finetune,
    stage_hard,
    stage_rank,
    stage_soft,
    summarize_soft_vs_hard,
    write_csv,
)
from .ranking import HeadMask, load_rankings
from .vit import DEIT_SMALL_CONFIG, DEIT_TINY_CONFIG, DESK_CONFIG, VIT_SMALL_CONFIG

log = logging.getLogger("vitprune")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5

PRESETS = {"desk": DESK_CONFIG, "vit-small": VIT_SMALL_CONFIG,
           "deit-tiny": DEIT_TINY_CONFIG, "deit-small": DEIT_SMALL_CONFIG}

# flag name -> dotted config key
_FLAGS = {
    "out_dir": "out_dir", "seed": "seed", "sparsity": "sparsity", "dtype": "dtype",
    "prune_norm": "prune_norm",
    "rho": "optim.rho", "lam": "optim.lam", "eta": "optim.eta", "epochs": "optim.epochs",
    "batch_size": "optim.batch_size", "finetune_epochs": "optim.finetune_epochs",
    "dense_epochs": "optim.dense_epochs", "placement": "optim.placement",
    "rank_batch": "ranking.batch_size", "rank_tol": "ranking.tol",
    "rank_max_iter": "ranking.max_iter",
    "data": "data.kind", "data_path": "data.path", "data_seed": "data.seed",
    "samples": "data.samples", "test_samples": "data.test_samples",
    "signal": "data.signal", "classes": "data.classes",
}


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _add_config_flags(p):
    g = p.add_argument_group("experiment")
    g.add_argument("--config", help="YAML or JSON experiment file")
    g.add_argument("--out-dir")
    g.add_argument("--seed", type=int)
    g.add_argument("--sparsity", type=float)
    g.add_argument("--dtype", choices=["float32", "float64"])
    g.add_argument("--prune-norm", choices=["l1", "l2"])
    g.add_argument("--rho", type=float)
    g.add_argument("--lam", type=float)
    g.add_argument("--eta", type=float)
    g.add_argument("--epochs", type=int, help="soft-pruning epochs")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--finetune-epochs", type=int)
    g.add_argument("--dense-epochs", type=int)
    g.add_argument("--placement", choices=["full", "printed"])
    g.add_argument("--rank-batch", type=int)
    g.add_argument("--rank-tol", type=float)
    g.add_argument("--rank-max-iter", type=int)
    g.add_argument("--data", choices=["synthetic", "cifar10"])
    g.add_argument("--data-path", help="CIFAR-10 directory (default: $VITPRUNE_DATA)")
    g.add_argument("--data-seed", type=int)
    g.add_argument("--samples", type=int)
    g.add_argument("--test-samples", type=int)
    g.add_argument("--signal", type=float)
    g.add_argument("--classes", type=int)
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. model.num_heads=8")


def build_parser():
    parser = argparse.ArgumentParser(prog="vitprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (
            ("train-dense", "train the dense baseline and save dense.ckpt"),
            ("rank", "rank heads of dense.ckpt and write rankings.jsonl"),
            ("prune", "soft-prune and hard-prune dense.ckpt"),
            ("finetune", "fine-tune pruned.ckpt and write report.json"),
            ("pipeline", "all stages end to end")):
        _add_config_flags(sub.add_parser(name, help=helptext))

    p = sub.add_parser("ablate-soft-hard", help="soft pruning vs hard-prune-then-retrain")
    _add_config_flags(p)
    p.add_argument("--grid", type=_floats, default=[0.0, 0.4, 0.6, 0.8])
    p.add_argument("--seeds", type=_ints, default=None)

    p = sub.add_parser("ablate-batch", help="ranking stability across batch sizes")
    _add_config_flags(p)
    p.add_argument("--grid", type=_ints, default=[16, 64, 256])

    p = sub.add_parser("ablate-rho", help="soft-pruning traces across rho")
    _add_config_flags(p)
    p.add_argument("--grid", type=_floats, default=[1e-4, 1e-3, 1e-2])

    p = sub.add_parser("report", help="collect run directories into CSV and text summaries")
    p.add_argument("runs", nargs="+", help="run directories holding report.json")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("count", help="parameter / FLOP counts after allocation, no training")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--sparsity", type=float, required=True)
    return parser


def resolve_config(args):
    """Defaults, then ``--config``, then flags, then ``--set`` overrides."""
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {key: getattr(args, flag) for flag, key in _FLAGS.items()
                 if getattr(args, flag, None) is not None}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(value)
    return config.with_overrides(overrides) if overrides else config


def _out(config):
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _masks_from_file(config, path):
    cfg = config.model
    return [HeadMask(rec["block"], cfg.num_heads, cfg.head_dim, cfg.embed_dim, rec["keep"])
            for rec in load_rankings(path)]


def cmd_train_dense(config):
    out = _out(config)
    save_config(config, out / "config.yaml")
    data = make_dataset(config)
    dense = stage_dense(config, data, out)
    print(f"dense test accuracy {_test_acc(dense, data):.4f} -> {out / 'dense.ckpt'}")


def cmd_rank(config):
    out = _out(config)
    data = make_dataset(config)
    dense = load_checkpoint(out / "dense.ckpt", config.model)
    budget = _budget_for(config)
    rk = stage_rank(config, dense, data, budget, out)
    write_csv(budget.to_rows(), out / "budget.csv")
    for r in rk:
        print(f"block {r.scores.block}: keep {r.mask.keep.tolist()} "
              f"scores {[round(float(s), 4) for s in r.scores.scores]}")


def cmd_prune(config):
    out = _out(config)
    data = make_dataset(config)
    dense = load_checkpoint(out / "dense.ckpt", config.model)
    budget = _budget_for(config)
    if (out / "rankings.jsonl").is_file():
        masks = _masks_from_file(config, out / "rankings.jsonl")
    else:
        masks = [r.mask for r in stage_rank(config, dense, data, budget, out)]
    soft, _ = stage_soft(config, dense, data, masks, budget, out)
    pruned, structure = stage_hard(config, soft, masks, budget, out)
    print(f"hard-pruned test accuracy {_test_acc(pruned, data):.4f} -> {out / 'pruned.ckpt'}")


def cmd_finetune(config):
    out = _out(config)
    data = make_dataset(config)
    dense = load_checkpoint(out / "dense.ckpt", config.model)
    pruned = load_checkpoint(out / "pruned.ckpt", config.model)
    budget = _budget_for(config)
    masks = _masks_from_file(config, out / "rankings.jsonl")
    final, _ = stage_finetune(config, pruned, data, out)
    rep = build_report(config, dense, pruned, final, budget, masks, data,
                       reverify_path=out / "final.ckpt")
    rep.to_json(out / "report.json")
    print(json.dumps({k: v for k, v in rep.to_dict().items()
                      if k in ("baseline_acc", "pruned_acc", "params_before", "params_after",
                               "realized_sparsity")}))


def cmd_pipeline(config):
    rep = run_pipeline(config)
    print(json.dumps({k: v for k, v in rep.to_dict().items()
                      if k in ("baseline_acc", "hard_prune_acc", "pruned_acc", "params_before",
                               "params_after", "realized_sparsity")}))


def cmd_ablate_soft_hard(config, grid, seeds):
    out = _out(config)
    rows = ablate_soft_vs_hard(config, grid, seeds)
    write_csv(rows, out / "soft_vs_hard.csv")
    for (method, sp), acc in summarize_soft_vs_hard(rows).items():
        print(f"{method:5s} sparsity {sp:.2f}: mean accuracy {acc:.4f}")


def _dense_for(config, data, out):
    return stage_dense(config, data, out)


def cmd_ablate_batch(config, grid):
    out = _out(config)
    data = make_dataset(config)
    rows, _ = ablate_batch_size(config, _dense_for(config, data, out), data, grid)
    write_csv(rows, out / "batch_stability.csv")
    for r in rows:
        print(f"block {r['block']} B={r['batch_a']} vs B={r['batch_b']}: "
              f"tau {r['kendall_tau']:.3f}")


def cmd_ablate_rho(config, grid):
    out = _out(config)
    data = make_dataset(config)
    traces = ablate_rho(config, _dense_for(config, data, out), data, grid)
    write_csv(rho_rows(traces), out / "rho_traces.csv")
    for rho, tr in traces.items():
        last = tr.records[-1] if tr.records else None
        print(f"rho {rho:g}: final masked norm {last.masked_norm if last else float('nan'):.4f}")


def cmd_count(preset, sparsity):
    print(json.dumps(dry_run_counts(PRESETS[preset], sparsity), indent=2))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            for path in report(args.runs, args.out_dir):
                print(path)
            return EXIT_OK
        if args.command == "count":
            cmd_count(args.preset, args.sparsity)
            return EXIT_OK
        config = resolve_config(args)
        if args.command == "train-dense":
            cmd_train_dense(config)
        elif args.command == "rank":
            cmd_rank(config)
        elif args.command == "prune":
            cmd_prune(config)
        elif args.command == "finetune":
            cmd_finetune(config)
        elif args.command == "pipeline":
            cmd_pipeline(config)
        elif args.command == "ablate-soft-hard":
            cmd_ablate_soft_hard(config, args.grid, args.seeds)
        elif args.command == "ablate-batch":
            cmd_ablate_batch(config, args.grid)
        elif args.command == "ablate-rho":
            cmd_ablate_rho(config, args.grid)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as exc:
        if isinstance(exc, FileNotFoundError) and str(exc.filename or "").endswith(".ckpt"):
            print(f"checkpoint error: {exc}", file=sys.stderr)
            return EXIT_CHECKPOINT
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except VitPruneError as exc:
        stage = getattr(exc, "stage", None)
        print(f"error{f' in stage {stage}' if stage else ''}: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
