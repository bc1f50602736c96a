"""Replay buffer, ER merging and A-GEM gradient projection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..taskstream import Sample, TaskDataset


@dataclass
class ReplayBuffer:
    fraction: float
    samples: dict[int, list[Sample]] = field(default_factory=dict)
    indices: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"buffer fraction must lie in [0, 1], got {self.fraction}")

    def __len__(self) -> int:
        return sum(len(v) for v in self.samples.values())

    def all_samples(self) -> list[Sample]:
        return [s for tid in sorted(self.samples) for s in self.samples[tid]]

    def to_json(self) -> dict:
        return {
            "fraction": self.fraction,
            "indices": {str(k): v for k, v in self.indices.items()},
            "samples": {
                str(k): [{"image": list(s.image), "instruction": list(s.instruction), "output": s.output,
                          "task_id": s.task_id} for s in v]
                for k, v in self.samples.items()
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ReplayBuffer":
        samples = {
            int(k): [Sample(tuple(s["image"]), tuple(s["instruction"]), s["output"], s["task_id"]) for s in v]
            for k, v in obj["samples"].items()
        }
        return cls(obj["fraction"], samples, {int(k): list(v) for k, v in obj["indices"].items()})


def buffer_size_for(fraction: float, n: int) -> int:
    # half-up rounding, not Python's banker's rounding
    return int(math.floor(fraction * n + 0.5))


def buffer_update(buffer: ReplayBuffer, dataset: TaskDataset, seed: int) -> None:
    """Store a uniform without-replacement subset of the task's train split."""
    n = buffer_size_for(buffer.fraction, len(dataset.train))
    if n == 0:
        return
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0FF, dataset.task_id]))
    idx = sorted(int(i) for i in rng.choice(len(dataset.train), size=n, replace=False))
    buffer.indices[dataset.task_id] = idx
    buffer.samples[dataset.task_id] = [dataset.train[i] for i in idx]


def er_merge(buffer: ReplayBuffer, current: TaskDataset) -> list[Sample]:
    return buffer.all_samples() + list(current.train)


def agem_project(grad: np.ndarray, ref_grad: np.ndarray) -> np.ndarray:
    """Remove the component of ``grad`` that conflicts with ``ref_grad``."""
    grad = np.asarray(grad, dtype=np.float64)
    ref_grad = np.asarray(ref_grad, dtype=np.float64)
    if grad.shape != ref_grad.shape:
        raise ValueError(f"gradient lengths differ: {grad.shape} vs {ref_grad.shape}")
    dot = float(grad @ ref_grad)
    scale = float(np.max(np.abs(ref_grad))) if ref_grad.size else 0.0
    if dot >= 0.0 or scale == 0.0:
        return grad.copy()
    # the projection does not depend on the scale of ref_grad; normalizing avoids underflow
    ref = ref_grad / scale
    ref_sq = float(ref @ ref)
    out = grad - (float(grad @ ref) / ref_sq) * ref
    step = 2.0
    for _ in range(40):
        residual = float(out @ ref_grad)
        if residual >= 0.0:
            break
        # rounding leaves a residual of order eps*|g|*|r|; grow the correction until it registers
        out = out - (step * residual / scale / ref_sq) * ref
        step *= 4.0
    return out
