"""Experiment configuration, the end-to-end pruning pipeline, ablations and
report emission."""

import csv
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import load_checkpoint, save_checkpoint
from .data import CIFAR10_MEAN, CIFAR10_STD, gen_synthetic, load_cifar10, split_validation
from .errors import ConfigError, ContractError
from .optimizer import (
    Dataset,
    Schedule,
    admm_init,
    finetune,
    hard_prune_compact,
    run_soft_pruning,
    structure_of,
    train_sgd,
)
from .ranking import RankingConfig, export_rankings, rank_heads, rank_stability
from .sparsity import er_allocate, full_budget
from .vit import VitConfig, accuracy, block_param_count, count_flops, count_params, init_weights

_DTYPES = {"float32": np.float32, "float64": np.float64}


# --- configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class DataSpec:
    """``kind`` is ``"synthetic"`` or ``"cifar10"``.

    Synthetic data draws ``samples + test_samples`` images from one
    generator call; the last ``test_samples`` form the test split.  For
    CIFAR-10, ``samples`` / ``test_samples`` cap the number of images taken
    from the front of each split (0 = all).
    """
    kind: str = "synthetic"
    path: str = None
    seed: int = 0
    classes: int = 10
    samples: int = 1200
    test_samples: int = 500
    signal: float = 0.5
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar10"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class OptimSpec:
    rho: float = 1e-3
    lam: float = 1e-2
    eta: float = 0.05
    epochs: int = 5
    batch_size: int = 128
    finetune_epochs: int = None
    dense_epochs: int = 10
    placement: str = "full"

    def __post_init__(self):
        if not (self.rho >= 0 and self.lam >= 0 and self.eta > 0):
            raise ConfigError("need rho >= 0, lam >= 0, eta > 0")
        if self.epochs < 0 or self.dense_epochs < 0 or self.batch_size < 1:
            raise ConfigError("epoch counts must be >= 0 and batch_size >= 1")
        if self.placement not in ("full", "printed"):
            raise ConfigError("placement must be 'full' or 'printed'")

    @property
    def finetune(self):
        """Fine-tune epochs; defaults to 20% of the soft-pruning epochs, rounded up."""
        if self.finetune_epochs is not None:
            return int(self.finetune_epochs)
        return math.ceil(0.2 * self.epochs)


@dataclass(frozen=True)
class ExperimentConfig:
    model: VitConfig = field(default_factory=VitConfig)
    data: DataSpec = field(default_factory=DataSpec)
    sparsity: float = 0.4
    ranking: RankingConfig = field(default_factory=RankingConfig)
    optim: OptimSpec = field(default_factory=OptimSpec)
    out_dir: str = "runs/default"
    seed: int = 0
    dtype: str = "float32"
    prune_norm: str = "l2"

    def __post_init__(self):
        if not 0 <= self.sparsity < 1:
            raise ConfigError("sparsity must lie in [0, 1)")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.prune_norm not in ("l1", "l2"):
            raise ConfigError("prune_norm must be 'l1' or 'l2'")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self):
        return {"model": self.model.to_dict(), "data": asdict(self.data),
                "sparsity": self.sparsity, "ranking": asdict(self.ranking),
                "optim": asdict(self.optim), "out_dir": self.out_dir,
                "seed": self.seed, "dtype": self.dtype, "prune_norm": self.prune_norm}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key, typ in (("model", VitConfig), ("data", DataSpec),
                         ("ranking", RankingConfig), ("optim", OptimSpec)):
            if key in d:
                kw[key] = _build(typ, d.pop(key), key)
        kw.update(d)
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, overrides):
        """Apply dotted-key overrides such as ``{"optim.rho": 0.01}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)


def _build(typ, value, key):
    if isinstance(value, typ):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"config section {key!r} must be a mapping")
    names = {f.name for f in fields(typ)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
    return typ(**value)


def load_config(path):
    """Read an :class:`ExperimentConfig` from a YAML or JSON file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        d = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(d)


def save_config(config, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), encoding="utf-8")


# --- data --------------------------------------------------------------------------

def make_dataset(config):
    """Train / val / test splits for ``config`` (validation = last 10% of train)."""
    spec = config.data
    dt = config.np_dtype
    if spec.kind == "synthetic":
        cfg = config.model
        X, y = gen_synthetic(spec.seed, spec.classes, spec.samples + spec.test_samples,
                             image_size=cfg.image_size, channels=cfg.channels,
                             signal=spec.signal, dtype=dt)
        X_test, y_test = X[spec.samples:], y[spec.samples:]
        X, y = X[:spec.samples], y[:spec.samples]
    else:
        X, y = load_cifar10(spec.path, "train", dtype=dt)
        X_test, y_test = load_cifar10(spec.path, "test", dtype=dt)
        if spec.samples:
            X, y = X[:spec.samples], y[:spec.samples]
        if spec.test_samples:
            X_test, y_test = X_test[:spec.test_samples], y_test[:spec.test_samples]
    Xtr, ytr, Xva, yva = split_validation(X, y, spec.val_fraction)
    return Dataset(Xtr, ytr, Xva, yva, X_test, y_test)


def ranking_batch(config, data, batch_size=None):
    """The ranking batch: a seeded sample of training images.

    Batches for different sizes are prefixes of one permutation.
    """
    B = batch_size or config.ranking.batch_size
    perm = np.random.default_rng([config.seed, 7]).permutation(len(data.y_train))
    return data.X_train[perm[:min(B, len(perm))]]


# --- report ------------------------------------------------------------------------

@dataclass
class RunReport:
    """Outcome of one pipeline run.  ``wall_clock`` is excluded from equality."""
    sparsity: float
    baseline_acc: float
    hard_prune_acc: float
    pruned_acc: float
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    realized_sparsity: float
    block_sparsity: list
    keep_sets: list
    budget: list
    structure: list
    normalization: dict = None
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def from_json(cls, path):
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _tag(stage, exc):
    exc.stage = stage
    return exc


def _budget_for(config):
    if config.sparsity == 0:
        return full_budget(config.model)
    return er_allocate(config.model, config.sparsity).validate(config.model)


def stage_dense(config, data, out_dir=None):
    """Train the dense baseline from scratch (or reuse ``dense.ckpt``)."""
    ckpt = Path(out_dir) / "dense.ckpt" if out_dir else None
    if ckpt is not None and ckpt.is_file():
        return load_checkpoint(ckpt, config.model)
    model = init_weights(config.model, config.seed, config.np_dtype)
    model, _ = train_sgd(model, data, config.optim.dense_epochs, config.optim.eta,
                         Schedule(config.optim.batch_size, config.seed))
    if ckpt is not None:
        save_checkpoint(model, ckpt)
    return model


def stage_rank(config, dense, data, budget, out_dir=None):
    rk = rank_heads(dense, ranking_batch(config, data), budget, config.ranking)
    if out_dir:
        export_rankings(rk, Path(out_dir) / "rankings.jsonl")
    return rk


def stage_soft(config, dense, data, masks, budget, out_dir=None):
    o = config.optim
    state = admm_init(dense, o.rho, o.lam, o.eta, o.epochs, o.placement)
    soft, trace = run_soft_pruning(dense, masks, budget, state, data,
                                   Schedule(o.batch_size, config.seed))
    if out_dir:
        save_checkpoint(soft, Path(out_dir) / "soft.ckpt")
        trace.to_csv(Path(out_dir) / "trace.csv")
    return soft, trace


def stage_hard(config, soft, masks, budget, out_dir=None):
    pruned, structure = hard_prune_compact(soft, masks, budget, config.prune_norm)
    if out_dir:
        save_checkpoint(pruned, Path(out_dir) / "pruned.ckpt")
    return pruned, structure


def stage_finetune(config, pruned, data, out_dir=None):
    o = config.optim
    final, history = finetune(pruned, data, o.finetune, o.eta,
                              Schedule(o.batch_size, config.seed), epoch_offset=o.epochs)
    if out_dir:
        save_checkpoint(final, Path(out_dir) / "final.ckpt")
    return final, history


def _test_acc(model, data):
    return accuracy(model, data.X_test, data.y_test)


def build_report(config, dense, pruned, final, budget, masks, data, wall_clock=0.0,
                 reverify_path=None):
    """Assemble a :class:`RunReport`, re-deriving the structure from the
    compacted weights (or the checkpoint at ``reverify_path``)."""
    cfg = config.model
    checked = load_checkpoint(reverify_path, cfg) if reverify_path else final
    structure = structure_of(checked)
    if not structure.matches(budget):
        raise ContractError("compacted model does not realize the budget")
    for s, m in zip(structure.blocks, masks):
        if s.head_ids != [int(h) for h in m.keep]:
            raise ContractError("compacted heads differ from the head mask")
    dense_block = block_param_count(cfg, cfg.num_heads, cfg.embed_dim, cfg.mlp_hidden)
    before, after = count_params(dense), count_params(checked)
    if after != count_params(cfg, structure):
        raise ContractError("parameter recount disagrees with the structure")
    return RunReport(
        sparsity=config.sparsity,
        baseline_acc=_test_acc(dense, data),
        hard_prune_acc=_test_acc(pruned, data),
        pruned_acc=_test_acc(final, data),
        params_before=before, params_after=after,
        flops_before=count_flops(cfg), flops_after=count_flops(cfg, structure),
        realized_sparsity=1.0 - after / before,
        block_sparsity=[1.0 - block_param_count(cfg, s.heads, s.attn_cols, s.mlp_cols)
                        / dense_block for s in structure.blocks],
        keep_sets=[list(s.head_ids) for s in structure.blocks],
        budget=budget.to_rows(),
        structure=structure.to_rows(),
        normalization=({"mean": list(CIFAR10_MEAN), "std": list(CIFAR10_STD)}
                       if config.data.kind == "cifar10" else None),
        wall_clock=wall_clock)


def run_pipeline(config, data=None, dense=None, write=True):
    """Dense baseline, head ranking, budget allocation, soft pruning, hard
    pruning, fine-tuning, report.

    Checkpoints for each stage are written to ``config.out_dir`` when
    ``write`` is true.  A failing stage re-raises its exception with a
    ``stage`` attribute.  Sparsity 0 keeps every head and column; the soft
    pruning and fine-tuning stages still run.
    """
    t0 = time.perf_counter()
    out = Path(config.out_dir) if write else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(config, out / "config.yaml")
    stage = "data"
    try:
        data = data or make_dataset(config)
        stage = "dense"
        dense = dense if dense is not None else stage_dense(config, data, out)
        stage = "budget"
        budget = _budget_for(config)
        stage = "rank"
        rk = stage_rank(config, dense, data, budget, out)
        masks = [r.mask for r in rk]
        stage = "soft-prune"
        soft, trace = stage_soft(config, dense, data, masks, budget, out)
        stage = "hard-prune"
        pruned, _ = stage_hard(config, soft, masks, budget, out)
        stage = "finetune"
        final, _ = stage_finetune(config, pruned, data, out)
        stage = "report"
        report = build_report(config, dense, pruned, final, budget, masks, data,
                              reverify_path=(out / "final.ckpt") if out else None)
    except Exception as exc:
        raise _tag(stage, exc)
    report.wall_clock = time.perf_counter() - t0
    if out is not None:
        report.to_json(out / "report.json")
    return report


def dry_run_counts(model_config, sparsity):
    """Parameter and FLOP counts before / after ER allocation, no training."""
    budget = er_allocate(model_config, sparsity)
    return {"params_before": count_params(model_config),
            "params_after": count_params(model_config, budget),
            "flops_before": count_flops(model_config),
            "flops_after": count_flops(model_config, budget),
            "budget": budget.to_rows()}


# --- ablations ----------------------------------------------------------------------

def hard_leg(config, dense, data, budget, masks):
    """Baseline: prune right away (heads by rank, columns by L1 norm), then
    retrain for as many epochs as soft pruning plus fine-tuning take."""
    pruned, _ = hard_prune_compact(dense, masks, budget, norm="l1")
    o = config.optim
    final, _ = finetune(pruned, data, o.epochs + o.finetune, o.eta,
                        Schedule(o.batch_size, config.seed))
    return final


def soft_leg(config, dense, data, budget, masks):
    soft, _ = stage_soft(config, dense, data, masks, budget)
    pruned, _ = stage_hard(config, soft, masks, budget)
    final, _ = stage_finetune(config, pruned, data)
    return final


def ablate_soft_vs_hard(config, grid, seeds=None, data=None, dense_models=None):
    """Soft (ranking + soft pruning) versus hard-prune-then-retrain.

    Both legs start from the same dense model and use the same head keep-sets,
    budget, learning rate, batch size and seed.  At sparsity 0 nothing is
    pruned and both legs report the dense model.

    Returns
    -------
    list of dict
        One row per (method, sparsity, seed) with test accuracy.
    """
    seeds = [config.seed] if seeds is None else list(seeds)
    data = data or make_dataset(config)
    rows = []
    for seed in seeds:
        cfg_s = replace(config, seed=seed)
        dense = (dense_models or {}).get(seed)
        if dense is None:
            dense = stage_dense(cfg_s, data)
        for sp in grid:
            if sp == 0:
                acc = _test_acc(dense, data)
                rows += [{"method": m, "sparsity": 0.0, "seed": seed, "accuracy": acc}
                         for m in ("soft", "hard")]
                continue
            c = replace(cfg_s, sparsity=sp)
            budget = _budget_for(c)
            masks = [r.mask for r in stage_rank(c, dense, data, budget)]
            for method, leg in (("soft", soft_leg), ("hard", hard_leg)):
                final = leg(c, dense, data, budget, masks)
                rows.append({"method": method, "sparsity": float(sp), "seed": seed,
                             "accuracy": _test_acc(final, data)})
    return rows


def summarize_soft_vs_hard(rows):
    """Mean accuracy per (method, sparsity)."""
    out = {}
    for r in rows:
        out.setdefault((r["method"], r["sparsity"]), []).append(r["accuracy"])
    return {k: float(np.mean(v)) for k, v in sorted(out.items())}


def ablate_batch_size(config, dense, data, grid=(16, 64, 256)):
    """Kendall tau between head rankings at every pair of batch sizes, per block."""
    scores = {}
    for B in grid:
        rc = replace(config.ranking, batch_size=B)
        rk = rank_heads(dense, ranking_batch(config, data, B), None, rc)
        scores[B] = [r.scores for r in rk]
    rows = []
    for a, b in itertools.combinations(grid, 2):
        for l in range(config.model.num_blocks):
            rows.append({"block": l, "batch_a": a, "batch_b": b,
                         "kendall_tau": rank_stability(scores[a][l], scores[b][l])})
    return rows, scores


def ablate_rho(config, dense, data, grid=(1e-4, 1e-3, 1e-2)):
    """Soft-pruning traces for each penalty ``rho`` (shared seed and masks)."""
    budget = _budget_for(config)
    masks = [r.mask for r in stage_rank(config, dense, data, budget)]
    traces = {}
    for rho in grid:
        c = replace(config, optim=replace(config.optim, rho=rho))
        _, traces[rho] = stage_soft(c, dense, data, masks, budget)
    return traces


def rho_rows(traces):
    return [{"rho": rho, **row} for rho, tr in traces.items() for row in tr.to_rows()]


# --- report files -------------------------------------------------------------------

def write_csv(rows, path):
    """Comma-separated, header row, UTF-8.  Floats are written with ``repr``."""
    rows = list(rows)
    keys = list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else
                            json.dumps(v) if isinstance(v, list | dict) else v)
                        for k, v in r.items()})


def report(run_dirs, out_dir):
    """Collect ``report.json`` / ``trace.csv`` / ``rankings.jsonl`` from run
    directories into ``out_dir``.

    Writes ``summary.csv`` (one row per run), ``summary.txt`` (key-value
    text), ``budgets.csv``, ``traces.csv`` and ``scores.csv`` (plot-ready,
    long format).  Returns the list of written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary, budgets, traces, scores = [], [], [], []
    for d in map(Path, run_dirs):
        rep = RunReport.from_json(d / "report.json")
        summary.append({"run": d.name, "sparsity": rep.sparsity,
                        "params_before": rep.params_before, "params_after": rep.params_after,
                        "flops_before": rep.flops_before, "flops_after": rep.flops_after,
                        "flops_reduction": 1 - rep.flops_after / rep.flops_before,
                        "realized_sparsity": rep.realized_sparsity,
                        "baseline_acc": rep.baseline_acc, "hard_prune_acc": rep.hard_prune_acc,
                        "pruned_acc": rep.pruned_acc})
        budgets += [{"run": d.name, **row} for row in rep.budget]
        if (d / "trace.csv").is_file():
            with open(d / "trace.csv", encoding="utf-8") as fh:
                traces += [{"run": d.name, **row} for row in csv.DictReader(fh)]
        if (d / "rankings.jsonl").is_file():
            with open(d / "rankings.jsonl", encoding="utf-8") as fh:
                for line in fh:
                    rec = json.loads(line)
                    scores += [{"run": d.name, "block": rec["block"], "head": h,
                                "score": s, "kept": h in rec["keep"]}
                               for h, s in enumerate(rec["scores"])]
    written = []
    for name, rows in (("summary.csv", summary), ("budgets.csv", budgets),
                       ("traces.csv", traces), ("scores.csv", scores)):
        if rows:
            write_csv(rows, out / name)
            written.append(out / name)
    lines = []
    for row in summary:
        lines.append(f"[{row['run']}]")
        lines += [f"{k} = {v!r}" for k, v in row.items() if k != "run"]
        lines.append("")
    (out / "summary.txt").write_text("\n".join(lines), encoding="utf-8")
    written.append(out / "summary.txt")
    return written


__all__ = [
    "DataSpec", "ExperimentConfig", "OptimSpec", "RunReport",
    "ablate_batch_size", "ablate_rho", "ablate_soft_vs_hard", "build_report",
    "dry_run_counts", "hard_leg", "load_config", "make_dataset",
    "ranking_batch", "report", "rho_rows", "run_pipeline", "save_config",
    "soft_leg", "stage_dense", "stage_finetune", "stage_hard", "stage_rank",
    "stage_soft", "summarize_soft_vs_hard", "write_csv",
]
