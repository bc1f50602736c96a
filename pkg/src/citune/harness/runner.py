"""Experiment orchestration: sequential streams and pairwise transfer runs."""

from __future__ import annotations

import copy
import json
import logging
import os
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .. import __version__
from ..metrics import RunReport, ScoreMatrix, config_hash, export_report, retrieval_accuracy
from ..model import ModelConfig, build_model
from ..strategies import StrategyState, evaluate, load_checkpoint, retrieval_predictions, save_checkpoint, train_task
from ..strategies.config import StrategyConfig
from ..taskstream import TaskDataset, generate_synthetic_benchmark, load_jsonl, load_vocab
from .config import ExperimentConfig

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CITUNE_OUTPUT_ROOT"


def load_datasets(config: ExperimentConfig, seed: int) -> tuple[list[TaskDataset], list[str]]:
    """Tasks in stream order, re-identified 0..n-1, plus the vocabulary."""
    if config.jsonl:
        missing = [p for p in config.jsonl if not Path(p).exists()]
        if missing:
            raise FileNotFoundError(f"missing task files: {missing}")
        if config.vocab_path is None:
            raise ValueError("JSONL tasks need a vocab file")
        vocab = load_vocab(config.vocab_path)
        tasks = [load_jsonl(p, vocab, task_id=k, seed=seed) for k, p in enumerate(config.jsonl)]
    else:
        spec = replace(config.benchmark, seed=config.benchmark.seed + seed)
        tasks = generate_synthetic_benchmark(spec)
        vocab = [f"w{i:02d}" for i in range(spec.vocab_size)]
    ordered = [tasks[k] for k in config.order()]
    return [replace(d, task_id=t) for t, d in enumerate(ordered)], vocab


def _model_config(config: ExperimentConfig, vocab: list[str], seed: int) -> ModelConfig:
    return replace(config.model, vocab_size=len(vocab), seed=config.model.seed + seed)


def _merge(tasks: list[TaskDataset], task_id: int) -> TaskDataset:
    train = tuple(s for d in tasks for s in d.train)
    val = tuple(s for d in tasks for s in d.val)
    return TaskDataset(task_id, "+".join(d.name for d in tasks), train, val)


@dataclass
class _Plan:
    stages: list[TaskDataset]
    columns: list[tuple[TaskDataset, int]]  # (eval dataset, stage that introduces it)
    stream_columns: list[int]


def _plan(config: ExperimentConfig, tasks: list[TaskDataset]) -> _Plan:
    if not config.joint_stage0:
        return _Plan(tasks, [(d, d.task_id) for d in tasks], list(range(len(tasks))))
    k = config.joint_tasks
    if not 1 <= k < len(tasks):
        raise ValueError(f"joint_tasks={k} needs 1 <= k < {len(tasks)} tasks")
    joint = _merge(tasks[:k], 0)
    stream = [replace(d, task_id=t + 1) for t, d in enumerate(tasks[k:])]
    columns = [(d, 0) for d in tasks[:k]] + [(d, d.task_id) for d in stream]
    return _Plan([joint] + stream, columns, list(range(k, k + len(stream))))


def run_stream(
    config: ExperimentConfig,
    seed: int | None = None,
    checkpoint_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> RunReport:
    seed = config.seeds[0] if seed is None else seed
    started = time.perf_counter()
    tasks, vocab = load_datasets(config, seed)
    plan = _plan(config, tasks)
    matrix = ScoreMatrix([intro for _, intro in plan.columns], [d.name for d, _ in plan.columns])
    stage_logs: list[dict] = []

    if resume_from is not None:
        model, state = load_checkpoint(resume_from)
        saved = json.loads((Path(resume_from) / "scores.json").read_text(encoding="utf-8"))
        for row in saved["rows"]:
            matrix.add_row(row)
        stage_logs = saved["stages"]
    else:
        model = build_model(_model_config(config, vocab, seed), vocab)
        state = StrategyState(config.strategy)

    for dataset in plan.stages[state.stage :]:
        stage_log = train_task(model, state, dataset, seed)
        t = stage_log.stage
        row = [
            evaluate(model, state, d, oracle_ids=config.strategy.eproj_oracle_ids, as_task=intro) if intro <= t else None
            for d, intro in plan.columns
        ]
        matrix.add_row(row)
        stage_logs.append(
            {
                "stage": t,
                "task": dataset.name,
                "action": stage_log.action,
                "block": stage_log.block_id,
                "epoch_losses": stage_log.epoch_losses,
                "similarity": stage_log.similarity,
                "notes": stage_log.notes,
            }
        )
        log.info("stage %d (%s): %s", t, dataset.name, [None if v is None else round(v, 2) for v in row])
        if checkpoint_dir is not None:
            target = Path(checkpoint_dir) / f"stage{t}"
            save_checkpoint(model, state, target)
            (target / "scores.json").write_text(json.dumps({"rows": matrix.rows, "stages": stage_logs}), encoding="utf-8")

    retrieval = {}
    if config.strategy.expands:
        for d, intro in plan.columns:
            pred = [state.block_for(k) for k in retrieval_predictions(model, state, d.val)]
            gold = [state.task_to_block[intro]] * len(pred)
            retrieval[d.name] = retrieval_accuracy(pred, gold)

    report = RunReport(
        matrix,
        config.to_dict(),
        seed,
        label=config.run_label(),
        stream_tasks=plan.stream_columns if config.joint_stage0 else None,
        retrieval=retrieval,
        stages=stage_logs,
    )
    report.wall_clock = time.perf_counter() - started
    return report


def write_run(report: RunReport, directory: str | Path, started: datetime | None = None) -> Path:
    """Export a report plus a manifest; only the manifest carries timestamps."""
    directory = Path(directory)
    export_report(report, directory)
    manifest = {
        "config_hash": config_hash(report.config),
        "seed": report.seed,
        "started": (started or datetime.now(timezone.utc)).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "wall_clock_s": report.wall_clock,
        "versions": {"citune": __version__, "numpy": np.__version__},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return directory


def output_root(config: ExperimentConfig) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def direct_finetune(dataset: TaskDataset, model_config: ModelConfig, strategy: StrategyConfig, seed: int, vocab=None):
    """Fine-tune a fresh model on one task; returns (model, state)."""
    model = build_model(model_config, vocab)
    state = StrategyState(replace(strategy, strategy="seqft"))
    train_task(model, state, replace(dataset, task_id=0), seed)
    return model, state


@dataclass
class PairwiseReport:
    names: list[str]
    transfer: np.ndarray
    forgetting: np.ndarray
    seed: int

    def to_csv(self, matrix: np.ndarray) -> str:
        lines = ["first," + ",".join(f"task{i}" for i in range(len(self.names)))]
        for i, row in enumerate(matrix):
            lines.append(f"task{i}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    def export(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "transfer.csv").write_text(self.to_csv(self.transfer), encoding="utf-8")
        (directory / "forgetting.csv").write_text(self.to_csv(self.forgetting), encoding="utf-8")


def run_pairwise(config: ExperimentConfig, seed: int | None = None) -> PairwiseReport:
    """Two-stage runs over every ordered task pair.

    ``transfer[a][x]`` is the accuracy on task x of a model fine-tuned on a
    alone; ``forgetting[a][b]`` is the accuracy drop on a after continuing
    with b.
    """
    seed = config.seeds[0] if seed is None else seed
    tasks, vocab = load_datasets(config, seed)
    n = len(tasks)
    if n < 2:
        raise ValueError("pairwise mode needs at least two tasks")
    strategy = replace(config.strategy, strategy="seqft", tir_enabled=False)
    mcfg = _model_config(config, vocab, seed)
    transfer = np.zeros((n, n))
    forgetting = np.zeros((n, n))
    for a in range(n):
        model_a, state_a = direct_finetune(tasks[a], mcfg, strategy, seed, vocab)
        first = replace(tasks[a], task_id=0)
        for x in range(n):
            transfer[a, x] = evaluate(model_a, state_a, tasks[x])
        for b in range(n):
            model, state = copy.deepcopy(model_a), copy.deepcopy(state_a)
            train_task(model, state, replace(tasks[b], task_id=1), seed)
            forgetting[a, b] = transfer[a, a] - evaluate(model, state, first)
    return PairwiseReport([d.name for d in tasks], transfer, forgetting, seed)
