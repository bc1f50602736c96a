"""Task keys, pull loss and the similarity-gated expansion decision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import numkernel as nk
from ..model import ModelState, encode_batch
from ..similarity import SimilarityVector, TaskKey
from ..taskstream import Sample


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def pull_loss_from_embeddings(img: np.ndarray, txt: np.ndarray, key: TaskKey) -> nk.Tensor:
    """sum_j (1 - cos(img_j, k_v)) + (1 - cos(txt_j, k_t))."""
    if len(img) == 0:
        raise ValueError("pull loss needs a nonempty batch")

    def channel(emb: np.ndarray, k: nk.Tensor) -> nk.Tensor:
        dots = nk.total(nk.matmul(nk.Tensor(_unit_rows(emb)), k))
        return nk.div(dots, nk.sqrt(nk.l2sq(k)))

    cos_sum = nk.add(channel(img, key.k_v), channel(txt, key.k_t))
    return nk.sub(nk.Tensor(2.0 * len(img)), cos_sum)


def pull_loss(batch: Sequence[Sample], model: ModelState, key: TaskKey) -> nk.Tensor:
    if not batch:
        raise ValueError("pull loss needs a nonempty batch")
    img, txt = encode_batch(model, batch)
    return pull_loss_from_embeddings(img, txt, key)


def init_key(task_id: int, img: np.ndarray, txt: np.ndarray) -> TaskKey:
    """Key initialized at the mean embeddings of the first batch."""
    return TaskKey.from_arrays(task_id, img.mean(axis=0), txt.mean(axis=0))


@dataclass(frozen=True)
class GateDecision:
    expand: bool
    reuse_id: int | None = None


def time_gate(sim: SimilarityVector, thres: float) -> GateDecision:
    if not sim.scores:
        raise ValueError("gate needs at least one similarity score")
    scores = np.asarray(sim.scores)
    if scores.max() < thres:
        return GateDecision(True)
    best = scores.max()
    reuse = min(tid for tid, s in zip(sim.previous_ids, sim.scores) if s == best)
    return GateDecision(False, reuse)
