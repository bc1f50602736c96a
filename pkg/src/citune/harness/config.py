from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..model import ModelConfig
from ..strategies.config import StrategyConfig
from ..taskstream import BenchmarkSpec


def default_similarity(num_tasks: int = 5, off_diagonal: float = 0.1) -> list[list[float]]:
    return [[1.0 if i == j else off_diagonal for j in range(num_tasks)] for i in range(num_tasks)]


def default_benchmark(num_tasks: int = 5, seed: int = 0) -> BenchmarkSpec:
    return BenchmarkSpec(num_tasks=num_tasks, similarity_matrix=default_similarity(num_tasks), seed=seed)


def paired_benchmark(num_tasks: int = 5, pair: tuple[int, int] = (1, 3), similarity: float = 0.9, seed: int = 0) -> BenchmarkSpec:
    """Default stream with one highly similar task pair."""
    m = default_similarity(num_tasks)
    i, j = pair
    m[i][j] = m[j][i] = similarity
    return BenchmarkSpec(num_tasks=num_tasks, similarity_matrix=m, seed=seed)


def joint_stage_benchmark(joint_tasks: int = 3, stream_tasks: int = 4, relatedness: float = 0.5, seed: int = 0) -> BenchmarkSpec:
    """Stream task k relates to joint task k mod joint_tasks at ``relatedness``."""
    n = joint_tasks + stream_tasks
    m = default_similarity(n)
    for k in range(stream_tasks):
        j = k % joint_tasks
        m[joint_tasks + k][j] = m[j][joint_tasks + k] = relatedness
    return BenchmarkSpec(num_tasks=n, similarity_matrix=m, seed=seed)


def duplicate_benchmark(num_tasks: int = 5, seed: int = 0) -> BenchmarkSpec:
    """``num_tasks`` distinct tasks followed by a copy of task 0."""
    m = default_similarity(num_tasks + 1)
    m[num_tasks][0] = m[0][num_tasks] = 1.0
    return BenchmarkSpec(num_tasks=num_tasks + 1, similarity_matrix=m, seed=seed)


@dataclass
class ExperimentConfig:
    benchmark: BenchmarkSpec | None = field(default_factory=default_benchmark)
    jsonl: list[str] = field(default_factory=list)
    vocab_path: str | None = None
    task_order: list[int] | None = None
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str | None = None
    mode: str = "stream"
    joint_stage0: bool = False
    joint_tasks: int = 3
    label: str | None = None
    save_checkpoints: bool = False

    def __post_init__(self):
        if self.mode not in ("stream", "pairwise"):
            raise ValueError(f"mode must be 'stream' or 'pairwise', got {self.mode!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.benchmark is None and not self.jsonl:
            raise ValueError("either a benchmark spec or JSONL task files are required")

    @property
    def num_tasks(self) -> int:
        return len(self.jsonl) if self.jsonl else self.benchmark.num_tasks

    def order(self) -> list[int]:
        """Stream order; a subset of tasks may be selected, each at most once."""
        order = list(range(self.num_tasks)) if self.task_order is None else list(self.task_order)
        if not order or len(set(order)) != len(order) or not all(0 <= k < self.num_tasks for k in order):
            raise ValueError(f"task_order {order} must list distinct tasks out of {self.num_tasks}")
        return order

    def run_label(self) -> str:
        if self.label:
            return self.label
        s = self.strategy
        name = s.strategy
        if s.tir_enabled:
            name += "+tir" if s.tir_constant_weight is None else f"+tir{s.tir_constant_weight:g}"
        return name

    def to_dict(self) -> dict:
        out = asdict(self)
        out["strategy"] = self.strategy.to_dict()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        obj = dict(obj)
        if obj.get("benchmark") is not None:
            obj["benchmark"] = BenchmarkSpec(**obj["benchmark"])
        elif "benchmark" in obj and obj.get("jsonl"):
            obj["benchmark"] = None
        if "strategy" in obj:
            obj["strategy"] = StrategyConfig.from_dict(obj["strategy"])
        if "model" in obj:
            obj["model"] = ModelConfig(**obj["model"])
        return cls(**obj)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
