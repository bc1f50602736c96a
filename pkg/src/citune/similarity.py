"""Task embeddings, similarity scoring/fusion and answer-free task retrieval."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .model import ModelState, encode_batch, output_embeddings
from .taskstream import Sample, TaskDataset

log = logging.getLogger(__name__)

STD_EPS = 1e-12


@dataclass
class TaskEmbedding:
    task_id: int
    e_v: np.ndarray
    e_t: np.ndarray
    e_o: np.ndarray

    def __post_init__(self):
        for name in ("e_v", "e_t", "e_o"):
            vec = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"task embedding {name} of task {self.task_id} is not finite")
            setattr(self, name, vec)

    def to_json(self) -> dict:
        return {"task_id": self.task_id, "e_v": self.e_v.tolist(), "e_t": self.e_t.tolist(), "e_o": self.e_o.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "TaskEmbedding":
        return cls(obj["task_id"], np.array(obj["e_v"]), np.array(obj["e_t"]), np.array(obj["e_o"]))


@dataclass
class SimilarityVector:
    """Fused similarity of the current task to each previous task.

    ``scores`` are clamped to [0, 1]; ``raw`` is the unclamped product and
    ``channels`` holds the standardized per-channel inputs to the product.
    """

    task_id: int
    previous_ids: list[int]
    scores: list[float]
    raw: list[float]
    channels: tuple[list[float], list[float], list[float]] | None = None

    def __post_init__(self):
        if len(self.scores) != len(self.previous_ids):
            raise ValueError("one similarity score is needed per previous task")

    def score_for(self, task_id: int) -> float:
        try:
            return self.scores[self.previous_ids.index(task_id)]
        except ValueError:
            raise KeyError(f"no similarity score for task {task_id}") from None

    @classmethod
    def constant(cls, task_id: int, previous_ids: Sequence[int], value: float) -> "SimilarityVector":
        n = len(previous_ids)
        return cls(task_id, list(previous_ids), [float(value)] * n, [float(value)] * n)


def embed_task(dataset: TaskDataset | Sequence[Sample], model: ModelState, task_id: int | None = None) -> TaskEmbedding:
    """Dataset-mean image, instruction and output embeddings (train split)."""
    if isinstance(dataset, TaskDataset):
        samples, task_id = dataset.train, dataset.task_id if task_id is None else task_id
    else:
        samples = list(dataset)
    if not samples:
        raise ValueError("cannot embed an empty dataset")
    img, txt = encode_batch(model, samples)
    out = output_embeddings(model, samples)
    return TaskEmbedding(0 if task_id is None else task_id, img.mean(axis=0), txt.mean(axis=0), out.mean(axis=0))


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cosine needs equal lengths, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        if na == 0.0 and nb == 0.0:
            log.warning("cosine of two zero vectors; returning 0")
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def channel_similarities(
    current: TaskEmbedding, previous: Sequence[TaskEmbedding]
) -> tuple[list[float], list[float], list[float]]:
    if not previous:
        raise ValueError("need at least one previous task")
    s_v = [cosine(current.e_v, p.e_v) for p in previous]
    s_t = [cosine(current.e_t, p.e_t) for p in previous]
    s_o = [cosine(current.e_o, p.e_o) for p in previous]
    return s_v, s_t, s_o


def standardize(scores: Sequence[float]) -> list[float]:
    """Z-score with population std; one element or zero spread gives zeros."""
    x = np.asarray(scores, dtype=np.float64)
    if x.size < 2:
        return [0.0] * x.size
    sigma = x.std()
    if sigma <= STD_EPS:
        return [0.0] * x.size
    return ((x - x.mean()) / sigma).tolist()


def fuse(s_v: Sequence[float], s_t: Sequence[float], s_o: Sequence[float], task_id: int = -1,
         previous_ids: Sequence[int] | None = None) -> SimilarityVector:
    if not (len(s_v) == len(s_t) == len(s_o)):
        raise ValueError(f"channel lengths differ: {len(s_v)}, {len(s_t)}, {len(s_o)}")
    raw = (np.asarray(s_v, float) * np.asarray(s_t, float) * np.asarray(s_o, float)).tolist()
    clamped = [min(max(r, 0.0), 1.0) for r in raw]
    ids = list(previous_ids) if previous_ids is not None else list(range(len(raw)))
    return SimilarityVector(task_id, ids, clamped, raw, (list(s_v), list(s_t), list(s_o)))


def task_similarity(current: TaskEmbedding, previous: Sequence[TaskEmbedding]) -> SimilarityVector:
    """Standardize each channel over the previous tasks, then fuse."""
    s_v, s_t, s_o = channel_similarities(current, previous)
    return fuse(standardize(s_v), standardize(s_t), standardize(s_o), current.task_id, [p.task_id for p in previous])


@dataclass
class TaskKey:
    task_id: int
    k_v: nk.Tensor
    k_t: nk.Tensor

    @classmethod
    def from_arrays(cls, task_id: int, k_v, k_t, trainable: bool = True) -> "TaskKey":
        return cls(task_id, nk.Tensor(k_v, trainable, f"k_v[{task_id}]"), nk.Tensor(k_t, trainable, f"k_t[{task_id}]"))

    def params(self) -> list[nk.Tensor]:
        return [self.k_v, self.k_t]

    def freeze(self) -> None:
        for p in self.params():
            p.requires_grad = False
            p.grad = None

    def to_json(self) -> dict:
        return {"task_id": self.task_id, "k_v": self.k_v.values.tolist(), "k_t": self.k_t.values.tolist()}

    @classmethod
    def from_json(cls, obj: dict, trainable: bool = False) -> "TaskKey":
        return cls.from_arrays(obj["task_id"], obj["k_v"], obj["k_t"], trainable)


def _row_cosines(emb: np.ndarray, keys: np.ndarray) -> np.ndarray:
    en = np.linalg.norm(emb, axis=1, keepdims=True)
    kn = np.linalg.norm(keys, axis=1, keepdims=True)
    e = emb / np.where(en > 0, en, 1.0)
    k = keys / np.where(kn > 0, kn, 1.0)
    return e @ k.T


def _standardize_rows(x: np.ndarray) -> np.ndarray:
    if x.shape[1] < 2:
        return np.zeros_like(x)
    sigma = x.std(axis=1, keepdims=True)
    z = (x - x.mean(axis=1, keepdims=True)) / np.where(sigma > STD_EPS, sigma, 1.0)
    return np.where(sigma > STD_EPS, z, 0.0)


RETRIEVAL_MODES = ("cosine", "zproduct")


def retrieval_scores(img: np.ndarray, txt: np.ndarray, keys: Sequence[TaskKey], mode: str = "cosine") -> np.ndarray:
    """Per-sample score of each key, shape (B, n_keys).

    ``cosine`` sums the image and instruction cosines to the key; ``zproduct``
    standardizes each channel across keys and multiplies, as in task fusion.
    """
    if mode not in RETRIEVAL_MODES:
        raise ValueError(f"unknown retrieval mode {mode!r}")
    kv = np.stack([k.k_v.values for k in keys])
    kt = np.stack([k.k_t.values for k in keys])
    cv, ct = _row_cosines(img, kv), _row_cosines(txt, kt)
    if mode == "cosine":
        return cv + ct
    return _standardize_rows(cv) * _standardize_rows(ct)


def retrieve_batch(model: ModelState, samples: Sequence[Sample], keys: Sequence[TaskKey], mode: str = "cosine") -> list[int]:
    img, txt = encode_batch(model, samples)
    return retrieve_from_embeddings(img, txt, keys, mode)


def retrieve_from_embeddings(img: np.ndarray, txt: np.ndarray, keys: Sequence[TaskKey], mode: str = "cosine") -> list[int]:
    """Highest-scoring key per sample; ties go to the lowest task ID."""
    if not keys:
        raise ValueError("retrieval needs at least one key")
    keys = sorted(keys, key=lambda k: k.task_id)
    scores = retrieval_scores(img, txt, keys, mode)
    ids = np.array([k.task_id for k in keys])
    # argmax returns the first maximum, i.e. the lowest id
    return ids[np.argmax(scores, axis=1)].tolist()


def retrieve_task_id(sample: Sample, model: ModelState, keys: Sequence[TaskKey], mode: str = "cosine") -> int:
    return retrieve_batch(model, [sample], keys, mode)[0]
