import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from vitprune.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, main, resolve_config, build_parser
from vitprune.errors import ConfigError
from vitprune.harness import (
    DataSpec,
    ExperimentConfig,
    OptimSpec,
    RunReport,
    ablate_batch_size,
    ablate_rho,
    ablate_soft_vs_hard,
    dry_run_counts,
    load_config,
    make_dataset,
    ranking_batch,
    report,
    rho_rows,
    run_pipeline,
    save_config,
    stage_dense,
    summarize_soft_vs_hard,
)
from vitprune.sparsity import group_l0_heads
from vitprune.vit import (
    DEIT_TINY_CONFIG,
    VIT_SMALL_CONFIG,
    VitConfig,
    count_params,
)

TINY_MODEL = VitConfig(image_size=16, patch_size=4, embed_dim=16, num_blocks=2,
                       num_heads=4, mlp_hidden=32, num_classes=4)


def tiny_config(tmp_path, **kw):
    base = ExperimentConfig(
        model=TINY_MODEL,
        data=DataSpec(classes=4, samples=240, test_samples=80, signal=1.0),
        optim=OptimSpec(epochs=2, batch_size=32, dense_epochs=3, finetune_epochs=1),
        out_dir=str(tmp_path / "run"))
    return replace(base, **kw)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = tiny_config(tmp, sparsity=0.4)
    return cfg, run_pipeline(cfg)


# --- configuration ---------------------------------------------------------------

def test_config_yaml_round_trip(tmp_path):
    cfg = tiny_config(tmp_path, sparsity=0.6, seed=3)
    save_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"sparsty": 0.4})
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides({"optim.momentum": 0.9})
    with pytest.raises(ConfigError):
        ExperimentConfig(sparsity=1.0)
    with pytest.raises(ConfigError):
        OptimSpec(eta=0)
    with pytest.raises(ConfigError):
        DataSpec(kind="imagenet")


def test_overrides_and_finetune_default():
    cfg = ExperimentConfig().with_overrides({"optim.rho": 0.01, "model.num_heads": 8})
    assert cfg.optim.rho == 0.01 and cfg.model.num_heads == 8
    assert OptimSpec(epochs=5).finetune == 1
    assert OptimSpec(epochs=12).finetune == 3
    assert OptimSpec(epochs=12, finetune_epochs=0).finetune == 0


def test_ranking_batches_are_prefixes(tmp_path):
    cfg = tiny_config(tmp_path)
    data = make_dataset(cfg)
    small, big = ranking_batch(cfg, data, 16), ranking_batch(cfg, data, 64)
    np.testing.assert_array_equal(small, big[:16])


def test_dataset_split_sizes(tmp_path):
    data = make_dataset(tiny_config(tmp_path))
    assert len(data.y_train) == 216 and len(data.y_val) == 24 and len(data.y_test) == 80


# --- counting ----------------------------------------------------------------------

def test_dry_run_vit_small():
    counts = dry_run_counts(VIT_SMALL_CONFIG, 0.4)
    assert round(counts["params_before"] / 1e6, 1) == 48.0
    assert abs(counts["params_after"] / 28.8e6 - 1) < 0.015
    assert counts["flops_after"] < counts["flops_before"]


def test_dry_run_deit_tiny():
    counts = dry_run_counts(DEIT_TINY_CONFIG, 0.3)
    assert round(counts["params_before"] / 1e6, 1) == 5.7
    assert abs(counts["params_after"] / 4.0e6 - 1) < 0.015


# --- pipeline ----------------------------------------------------------------------

def test_pipeline_report_recount(tiny_run):
    cfg, rep = tiny_run
    assert rep.params_after == round((1 - rep.realized_sparsity) * rep.params_before)
    assert rep.params_before == count_params(cfg.model)
    assert [len(k) for k in rep.keep_sets] == [b["kappa_attn_h"] for b in rep.budget]
    assert rep.flops_after < rep.flops_before
    assert 0 < rep.realized_sparsity < 1


def test_pipeline_writes_stage_files(tiny_run):
    cfg, rep = tiny_run
    out = cfg.out_dir
    from pathlib import Path
    names = {p.name for p in Path(out).iterdir()}
    assert {"config.yaml", "dense.ckpt", "rankings.jsonl", "soft.ckpt", "trace.csv",
            "pruned.ckpt", "final.ckpt", "report.json"} <= names
    assert RunReport.from_json(Path(out) / "report.json") == rep
    with open(Path(out) / "trace.csv", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "loss", "masked_norm", "primal_residual_attn",
                             "primal_residual_mlp", "val_acc"]
    assert len(rows) == cfg.optim.epochs


def test_soft_stage_zeroes_removed_heads_before_compaction(tiny_run):
    from vitprune.checkpoint import load_checkpoint
    from pathlib import Path
    cfg, rep = tiny_run
    soft = load_checkpoint(Path(cfg.out_dir) / "soft.ckpt", cfg.model)
    # soft pruning keeps all heads non-zero; the budget only appears after compaction
    assert all(group_l0_heads(b.qkv_w, b.proj_w, 4) == 4 for b in soft.blocks)


def test_pipeline_stage_tag(tmp_path):
    cfg = tiny_config(tmp_path, data=DataSpec(kind="cifar10", path=str(tmp_path / "none")))
    with pytest.raises(Exception) as info:
        run_pipeline(cfg)
    assert info.value.stage == "data"


def test_report_files(tiny_run, tmp_path):
    cfg, rep = tiny_run
    written = report([cfg.out_dir], tmp_path / "rep")
    names = sorted(p.name for p in written)
    assert names == ["budgets.csv", "scores.csv", "summary.csv", "summary.txt", "traces.csv"]
    with open(tmp_path / "rep" / "summary.csv", encoding="utf-8") as fh:
        row = next(csv.DictReader(fh))
    assert int(row["params_after"]) == rep.params_after
    assert float(row["pruned_acc"]) == rep.pruned_acc
    with open(tmp_path / "rep" / "scores.csv", encoding="utf-8") as fh:
        assert len(list(csv.DictReader(fh))) == cfg.model.num_blocks * cfg.model.num_heads


# --- ablations (tiny) -------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_dense(tmp_path_factory):
    cfg = tiny_config(tmp_path_factory.mktemp("abl"))
    data = make_dataset(cfg)
    return cfg, data, stage_dense(cfg, data)


def test_soft_vs_hard_rows(tiny_dense):
    cfg, data, dense = tiny_dense
    rows = ablate_soft_vs_hard(cfg, [0.0, 0.4], data=data, dense_models={0: dense})
    assert [(r["method"], r["sparsity"]) for r in rows] == [
        ("soft", 0.0), ("hard", 0.0), ("soft", 0.4), ("hard", 0.4)]
    assert rows[0]["accuracy"] == rows[1]["accuracy"]
    assert set(summarize_soft_vs_hard(rows)) == {("soft", 0.0), ("hard", 0.0),
                                                 ("soft", 0.4), ("hard", 0.4)}


def test_batch_ablation_pairs(tiny_dense):
    cfg, data, dense = tiny_dense
    rows, scores = ablate_batch_size(cfg, dense, data, (16, 64, 128))
    assert len(rows) == 3 * cfg.model.num_blocks
    assert all(-1 <= r["kendall_tau"] <= 1 for r in rows)


def test_rho_ablation_traces(tiny_dense):
    cfg, data, dense = tiny_dense
    traces = ablate_rho(cfg, dense, data, (1e-3, 1e-1))
    assert set(traces) == {1e-3, 1e-1}
    assert len(rho_rows(traces)) == 2 * cfg.optim.epochs


# --- command line ------------------------------------------------------------------

def test_cli_precedence(tmp_path):
    cfg = tiny_config(tmp_path, seed=5)
    save_config(cfg, tmp_path / "c.yaml")
    args = build_parser().parse_args(
        ["pipeline", "--config", str(tmp_path / "c.yaml"), "--rho", "0.5",
         "--set", "model.mlp_hidden=64"])
    got = resolve_config(args)
    assert got.seed == 5 and got.optim.rho == 0.5 and got.model.mlp_hidden == 64
    assert got.optim.lam == cfg.optim.lam


def test_cli_count(capsys):
    assert main(["count", "--preset", "vit-small", "--sparsity", "0.4"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["params_before"] == count_params(VIT_SMALL_CONFIG)


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["pipeline", "--sparsity", "1.5"]) == EXIT_CONFIG
    assert main(["pipeline", "--set", "nope=1"]) == EXIT_CONFIG
    assert main(["train-dense", "--data", "cifar10", "--data-path", str(tmp_path),
                 "--out-dir", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["rank", "--out-dir", str(tmp_path / "empty")]) == EXIT_CHECKPOINT
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "dense.ckpt").write_bytes(b"garbage")
    assert main(["rank", "--out-dir", str(tmp_path / "bad")]) == EXIT_CHECKPOINT


def test_cli_stagewise_matches_pipeline(tiny_run, tmp_path, capsys):
    cfg, rep = tiny_run
    run = tmp_path / "staged"
    save_config(replace(cfg, out_dir=str(run)), tmp_path / "c.yaml")
    for cmd in ("train-dense", "rank", "prune", "finetune"):
        assert main([cmd, "--config", str(tmp_path / "c.yaml")]) == 0, cmd
    staged = RunReport.from_json(run / "report.json")
    assert staged.pruned_acc == rep.pruned_acc
    assert staged.params_after == rep.params_after
    assert staged.keep_sets == rep.keep_sets
    assert main(["report", str(run), "--out-dir", str(tmp_path / "rep")]) == 0
