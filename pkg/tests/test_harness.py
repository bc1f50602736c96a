import json
from dataclasses import replace

import numpy as np
import pytest

from citune.harness import (
    ExperimentConfig,
    default_benchmark,
    direct_finetune,
    load_datasets,
    run_pairwise,
    run_stream,
    write_run,
)
from citune.harness.cli import cli_main
from citune.harness.runner import _model_config
from citune.metrics import export_report, matrix_to_csv
from citune.similarity import SimilarityVector
from citune.strategies import evaluate, profile
from citune.strategies import loop as loop_mod


def experiment(strategy="seqft", tasks=5, **kw):
    return ExperimentConfig(benchmark=default_benchmark(tasks), strategy=profile("desk", strategy, **kw))


def test_same_seed_byte_identical(tmp_path):
    cfg = experiment("ewc", tir_enabled=True)
    export_report(run_stream(cfg, 0), tmp_path / "a")
    export_report(run_stream(cfg, 0), tmp_path / "b")
    for name in ("A.csv", "summary.json", "table.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seeds_differ():
    cfg = experiment()
    assert run_stream(cfg, 0).matrix.rows != run_stream(cfg, 1).matrix.rows


@pytest.mark.parametrize("strategy", ["ewc", "er", "eproj"])
def test_resume_is_bit_exact(tmp_path, strategy):
    cfg = experiment(strategy)
    full = run_stream(cfg, 0, checkpoint_dir=tmp_path / "ck")
    resumed = run_stream(cfg, 0, resume_from=tmp_path / "ck" / "stage2")
    assert matrix_to_csv(resumed.matrix) == matrix_to_csv(full.matrix)
    assert resumed.stages == full.stages


def test_single_task_stream():
    rep = run_stream(experiment(tasks=1), 0)
    assert rep.matrix.n_stages == 1
    assert rep.forgetting() == [None]


def test_joint_stage_bookkeeping():
    cfg = replace(experiment(tasks=7), joint_stage0=True, joint_tasks=3)
    rep = run_stream(cfg, 0)
    assert rep.matrix.intro == [0, 0, 0, 1, 2, 3, 4]
    assert rep.stream_tasks == [3, 4, 5, 6]
    assert all(v is not None for v in rep.matrix.rows[0][:3])
    assert rep.summary()["F_stream"][1] is None
    assert rep.final_forgetting() is not None


def test_joint_stage_needs_stream_tasks():
    with pytest.raises(ValueError):
        run_stream(replace(experiment(tasks=3), joint_stage0=True, joint_tasks=3), 0)


def test_task_order_subset_and_validation():
    cfg = replace(experiment(tasks=5), task_order=[3, 1])
    tasks, _ = load_datasets(cfg, 0)
    full, _ = load_datasets(experiment(tasks=5), 0)
    assert [d.task_id for d in tasks] == [0, 1]
    assert tasks[0].train == full[3].train
    with pytest.raises(ValueError):
        replace(cfg, task_order=[1, 1]).order()
    with pytest.raises(ValueError):
        replace(cfg, task_order=[9]).order()


def test_pairwise_report():
    cfg = experiment(tasks=3)
    rep = run_pairwise(cfg, 0)
    assert rep.transfer.shape == rep.forgetting.shape == (3, 3)
    tasks, vocab = load_datasets(cfg, 0)
    for a in range(3):
        model, state = direct_finetune(tasks[a], _model_config(cfg, vocab, 0), cfg.strategy, 0, vocab)
        assert rep.transfer[a, a] == evaluate(model, state, tasks[a])
        assert rep.forgetting[a, a] <= 1.0


def test_constant_similarity_injection_matches_ablation(monkeypatch):
    ablation = run_stream(replace(experiment("ewc", tir_enabled=True, tir_constant_weight=0.5)), 0)

    def constant(current, previous):
        return SimilarityVector.constant(current.task_id, [p.task_id for p in previous], 0.5)

    monkeypatch.setattr(loop_mod, "task_similarity", constant)
    injected = run_stream(experiment("ewc", tir_enabled=True), 0)
    assert injected.matrix.rows == ablation.matrix.rows


def test_missing_jsonl_rejected_before_training(tmp_path):
    vocab = tmp_path / "vocab.txt"
    vocab.write_text("a\nb\n")
    cfg = ExperimentConfig(benchmark=None, jsonl=[str(tmp_path / "nope.jsonl")], vocab_path=str(vocab))
    with pytest.raises(FileNotFoundError):
        run_stream(cfg, 0)


def test_experiment_config_json_round_trip(tmp_path):
    cfg = experiment("agem", tasks=4)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.from_json(path) == cfg
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})


def test_write_run_manifest(tmp_path):
    write_run(run_stream(experiment(tasks=2), 0), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert {"config_hash", "seed", "started", "finished", "versions"} <= set(manifest)


# -- command line --------------------------------------------------------------


def test_cli_run_writes_matrix(tmp_path, capsys):
    assert cli_main(["run", "--strategy", "seqft", "--seed", "0", "--output", str(tmp_path)]) == 0
    lines = (tmp_path / "seqft" / "seed0" / "A.csv").read_text().splitlines()
    assert len(lines) == 6
    assert "A_4" in capsys.readouterr().out


def test_cli_oracle_ids_no_forgetting(tmp_path):
    code = cli_main(["run", "--strategy", "eproj", "--eproj-oracle-ids", "--output", str(tmp_path)])
    assert code == 0
    summary = json.loads((tmp_path / "eproj" / "seed0" / "summary.json").read_text())
    assert all(f == 0.0 for f in summary["F"][1:])


def test_cli_report(tmp_path, capsys):
    cli_main(["run", "--strategy", "ewc", "--tasks", "3", "--output", str(tmp_path)])
    capsys.readouterr()
    assert cli_main(["report", str(tmp_path / "ewc" / "seed0"), "--label", "again"]) == 0
    assert "again" in capsys.readouterr().out
    assert cli_main(["report", str(tmp_path / "ewc" / "seed0" / "A.csv")]) == 0
    assert cli_main(["report", str(tmp_path / "missing")]) == 2


def test_cli_gradcheck(capsys):
    assert cli_main(["gradcheck", "--seeds", "5"]) == 0
    out = capsys.readouterr().out
    assert "model_loss" in out and "FAIL" not in out


def test_cli_exit_codes(tmp_path):
    assert cli_main(["run", "--strategy", "bogus"]) == 1
    assert cli_main(["run", "--no-such-flag"]) == 1
    assert cli_main([]) == 1
    assert cli_main(["run", "--tir-constant", "2", "--output", str(tmp_path)]) == 2
    assert cli_main(["run", "--task-order", "0", "0", "--output", str(tmp_path)]) == 2
    assert cli_main(["run", "--config", str(tmp_path / "absent.json")]) == 2


def test_cli_config_file(tmp_path):
    cfg = replace(experiment("er", tasks=3), output_dir=str(tmp_path / "out"), label="fromfile")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert cli_main(["run", "--config", str(path)]) == 0
    assert (tmp_path / "out" / "fromfile" / "seed0" / "A.csv").exists()


def test_cli_pairwise(tmp_path):
    assert cli_main(["pairwise", "--tasks", "2", "--output", str(tmp_path)]) == 0
    rows = (tmp_path / "pairwise" / "seed0" / "transfer.csv").read_text().splitlines()
    assert len(rows) == 3
