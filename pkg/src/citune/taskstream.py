"""Task streams: synthetic benchmark generation, JSONL ingestion, splitting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Sample:
    image: tuple[float, ...]
    instruction: tuple[str, ...]
    output: str
    task_id: int = 0

    def __post_init__(self):
        if not self.instruction:
            raise ValueError("instruction must contain at least one token")


@dataclass(frozen=True)
class TaskDataset:
    task_id: int
    name: str
    train: tuple[Sample, ...]
    val: tuple[Sample, ...]

    def __post_init__(self):
        if not self.train:
            raise ValueError(f"task {self.name!r} has an empty train split")
        if not self.val:
            raise ValueError(f"task {self.name!r} has an empty validation split")

    @property
    def size(self) -> int:
        return len(self.train)


@dataclass
class BenchmarkSpec:
    num_tasks: int = 5
    samples_per_task: int = 512
    similarity_matrix: list[list[float]] | None = None
    seed: int = 0
    vocab_size: int = 24
    input_dim: int = 32
    val_per_task: int = 128
    num_clusters: int = 4
    instruction_length: int = 8
    center_scale: float = 3.0
    offset_scale: float = 3.0
    noise_scale: float = 0.25
    instruction_sharpness: float = 4.0
    names: list[str] = field(default_factory=list)

    def matrix(self) -> np.ndarray:
        if self.similarity_matrix is None:
            return np.eye(self.num_tasks)
        return np.asarray(self.similarity_matrix, dtype=np.float64)

    @classmethod
    def from_json(cls, path: str | Path) -> "BenchmarkSpec":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


SIMILARITY_TOLERANCE = 0.1


def _latent_factors(target: np.ndarray) -> np.ndarray:
    """Unit-norm rows whose Gram matrix approximates ``target``.

    Raises ValueError naming the worst pair if the target is not realizable
    within ``SIMILARITY_TOLERANCE``.
    """
    n = target.shape[0]
    if target.shape != (n, n) or not np.allclose(target, target.T):
        raise ValueError("similarity_matrix must be square and symmetric")
    if not np.allclose(np.diag(target), 1.0):
        raise ValueError("similarity_matrix must have a unit diagonal")
    if np.any(target < 0.0) or np.any(target > 1.0):
        i, j = np.argwhere((target < 0.0) | (target > 1.0))[0]
        raise ValueError(f"similarity_matrix[{i}][{j}] = {target[i, j]} is outside [0, 1]")
    vals, vecs = np.linalg.eigh(target)
    # drop round-off eigenvalues so duplicated tasks get identical rows
    vals = np.where(vals > 1e-10 * vals.max(), vals, 0.0)
    factors = vecs * np.sqrt(vals)
    norms = np.linalg.norm(factors, axis=1, keepdims=True)
    factors = factors / np.where(norms > 0, norms, 1.0)
    achieved = factors @ factors.T
    gap = np.abs(achieved - target)
    if gap.max() > SIMILARITY_TOLERANCE:
        i, j = np.unravel_index(np.argmax(gap), gap.shape)
        raise ValueError(
            f"similarity_matrix is not realizable: pair ({i}, {j}) targets {target[i, j]:.3f} "
            f"but the closest feasible value is {achieved[i, j]:.3f}"
        )
    return factors


def generate_synthetic_benchmark(spec: BenchmarkSpec) -> list[TaskDataset]:
    """Build ``spec.num_tasks`` learnable tasks with controlled relatedness.

    Each task owns an image center, cluster offsets around it, an instruction
    token distribution and a cluster -> output-token map. All four are built
    from shared latent components weighted by a factorization of the
    similarity matrix (the token distribution is a mixture with weights
    mix**2), so related tasks move together on every channel and a
    target of 1.0 yields identical tasks. The label of a sample is the output
    token assigned to its cluster; each cluster copies its answer from the
    most similar earlier task with probability equal to that similarity.
    """
    target = spec.matrix()
    if target.shape != (spec.num_tasks, spec.num_tasks):
        raise ValueError(f"similarity_matrix must be {spec.num_tasks}x{spec.num_tasks}, got {target.shape}")
    factors = _latent_factors(target)
    rank = factors.shape[1]
    if rank > spec.input_dim:
        raise ValueError(f"{spec.num_tasks} tasks cannot be realized in input_dim={spec.input_dim}")
    if spec.samples_per_task < spec.num_clusters:
        raise ValueError("samples_per_task must be at least num_clusters")

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    vocab = [f"w{i:02d}" for i in range(spec.vocab_size)]
    basis, _ = np.linalg.qr(rng.normal(size=(spec.input_dim, rank)))
    offset_latents = rng.normal(size=(rank, spec.num_clusters, spec.input_dim)) / np.sqrt(spec.input_dim)
    instr_logits = spec.instruction_sharpness * rng.normal(size=(rank, spec.vocab_size))
    instr_components = np.exp(instr_logits - instr_logits.max(axis=1, keepdims=True))
    instr_components /= instr_components.sum(axis=1, keepdims=True)
    output_latents = rng.normal(size=(rank, spec.num_clusters, spec.vocab_size))
    copy_draws = rng.uniform(size=(spec.num_tasks, spec.num_clusters))
    out_maps: list[np.ndarray] = []

    names = spec.names or [f"task{k}" for k in range(spec.num_tasks)]
    datasets = []
    n_total = spec.samples_per_task + spec.val_per_task
    for k in range(spec.num_tasks):
        mix = factors[k]
        center = spec.center_scale * basis @ mix
        offsets = spec.offset_scale * np.einsum("m,mcd->cd", mix, offset_latents)
        offsets -= offsets.mean(axis=0)
        instr_p = (mix * mix) @ instr_components
        instr_p /= instr_p.sum()
        out_map = np.argmax(np.einsum("m,mcv->cv", mix, output_latents), axis=1)
        if k > 0:
            # inherit each cluster's answer from the closest earlier task
            # with probability equal to the target similarity
            parent = int(np.argmax(target[k, :k]))
            inherit = copy_draws[k] < target[k, parent]
            out_map = np.where(inherit, out_maps[parent], out_map)
        out_maps.append(out_map)

        task_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x7A5C, k]))
        clusters = task_rng.permutation(np.arange(n_total) % spec.num_clusters)
        noise = task_rng.normal(size=(n_total, spec.input_dim)) * spec.noise_scale / np.sqrt(spec.input_dim)
        noise -= noise.mean(axis=0)
        images = center + offsets[clusters] + noise
        tokens = task_rng.choice(spec.vocab_size, size=(n_total, spec.instruction_length), p=instr_p)
        samples = [
            Sample(
                tuple(images[j].tolist()),
                tuple(vocab[t] for t in tokens[j]),
                vocab[out_map[clusters[j]]],
                k,
            )
            for j in range(n_total)
        ]
        datasets.append(
            TaskDataset(k, names[k], tuple(samples[: spec.samples_per_task]), tuple(samples[spec.samples_per_task :]))
        )
    return datasets


def image_centers(datasets: Sequence[TaskDataset]) -> np.ndarray:
    return np.stack([np.mean([s.image for s in (*d.train, *d.val)], axis=0) for d in datasets])


def split(dataset: TaskDataset, val_fraction: float, seed: int) -> TaskDataset:
    """Deterministic shuffled re-split of all samples of ``dataset``."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    pool = list(dataset.train) + list(dataset.val)
    order = np.random.default_rng(seed).permutation(len(pool))
    n_val = int(round(val_fraction * len(pool)))
    n_val = min(max(n_val, 1), len(pool) - 1)
    val = tuple(pool[i] for i in order[:n_val])
    train = tuple(pool[i] for i in order[n_val:])
    return TaskDataset(dataset.task_id, dataset.name, train, val)


def load_vocab(path: str | Path) -> list[str]:
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def load_jsonl(
    path: str | Path,
    vocab: Sequence[str],
    task_id: int = 0,
    name: str | None = None,
    val_fraction: float = 0.1,
    seed: int = 0,
) -> TaskDataset:
    """Read one task from a JSONL file of {image, instruction, output} objects."""
    path = Path(path)
    known = set(vocab)
    samples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                image = tuple(float(x) for x in obj["image"])
                instruction = tuple(str(obj["instruction"]).split())
                output = str(obj["output"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}, line {lineno}: malformed sample ({exc})") from None
            for tok in (*instruction, output):
                if tok not in known:
                    raise ValueError(f"{path}, line {lineno}: token {tok!r} is not in the vocabulary")
            if not instruction:
                raise ValueError(f"{path}, line {lineno}: empty instruction")
            samples.append(Sample(image, instruction, output, task_id))
    if not samples:
        raise ValueError(f"{path}: no samples")
    if len(samples) < 2:
        raise ValueError(f"{path}: need at least two samples to carve a validation split")
    n_val = min(max(int(round(val_fraction * len(samples))), 1), len(samples) - 1)
    order = np.random.default_rng(seed).permutation(len(samples))
    val = tuple(samples[i] for i in sorted(order[:n_val]))
    train = tuple(samples[i] for i in sorted(order[n_val:]))
    return TaskDataset(task_id, name or path.stem, train, val)


def export_jsonl(samples: Sequence[Sample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"image": list(s.image), "instruction": " ".join(s.instruction), "output": s.output}))
            fh.write("\n")
