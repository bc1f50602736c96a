"""Parameter importance (EWC, MAS, SI) and the quadratic anchor penalties."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import numkernel as nk
from ..model import SHARED, ModelState, fused_inputs, output_targets
from ..similarity import SimilarityVector
from ..taskstream import TaskDataset

Buffers = list[np.ndarray]


def _check_aligned(params: Sequence[nk.Tensor], buffers: Sequence[np.ndarray], what: str) -> None:
    if len(params) != len(buffers) or any(p.shape != b.shape for p, b in zip(params, buffers)):
        raise nk.ShapeError(
            f"{what} is not aligned with the trainable parameters: "
            f"{[b.shape for b in buffers]} vs {[p.shape for p in params]}"
        )


# -- per-sample gradients of the projection block ---------------------------


def per_sample_grads(model: ModelState, task_id: int, x: np.ndarray, upstream: Callable[[np.ndarray], np.ndarray]) -> Buffers:
    """Per-sample gradients of the block parameters, stacked on axis 0.

    ``upstream`` maps the (B, V) logits to d(loss_i)/d(logits_i).
    """
    block = model.block(task_id)
    w1, b1, w2, b2 = (p.values for p in block.params())
    h = np.tanh(x @ w1 + b1)
    z = h @ w2 + b2
    logits = z @ model.decoder
    dz = upstream(logits) @ model.decoder.T
    dh = (dz @ w2.T) * (1.0 - h * h)
    return [np.einsum("bi,bj->bij", x, dh), dh, np.einsum("bi,bj->bij", h, dz), dz]


def _softmax_ce_upstream(targets: np.ndarray):
    def up(logits):
        g = nk.softmax(logits)
        g[np.arange(len(targets)), targets] -= 1.0
        return g

    return up


def ewc_importance(model: ModelState, dataset: TaskDataset, task_id: int = SHARED) -> Buffers:
    """Empirical Fisher diagonal: mean squared per-sample gradient of the task loss."""
    if not dataset.train:
        raise ValueError("EWC importance needs a nonempty dataset")
    x = fused_inputs(model, dataset.train)
    grads = per_sample_grads(model, task_id, x, _softmax_ce_upstream(output_targets(model, dataset.train)))
    return [np.mean(g * g, axis=0) for g in grads]


def mas_importance(model: ModelState, dataset: TaskDataset, task_id: int = SHARED) -> Buffers:
    """Mean absolute gradient of the squared L2 norm of the output logits."""
    if not dataset.train:
        raise ValueError("MAS importance needs a nonempty dataset")
    x = fused_inputs(model, dataset.train)
    grads = per_sample_grads(model, task_id, x, lambda logits: 2.0 * logits)
    return [np.mean(np.abs(g), axis=0) for g in grads]


def fisher_diagonal(per_sample_loss: Callable[[object], nk.Tensor], params: Sequence[nk.Tensor], samples) -> Buffers:
    """Generic empirical Fisher through the tape, one backward per sample."""
    if not samples:
        raise ValueError("Fisher diagonal needs at least one sample")
    acc = [np.zeros(p.shape) for p in params]
    for s in samples:
        for p in params:
            p.grad = None
        nk.backward(nk.forward_eval(per_sample_loss, s))
        for a, p in zip(acc, params):
            if p.grad is not None:
                a += p.grad * p.grad
    for p in params:
        p.grad = None
    return [a / len(samples) for a in acc]


def output_sensitivity(output_fn: Callable[[object], nk.Tensor], params: Sequence[nk.Tensor], samples) -> Buffers:
    """Generic MAS importance: mean |d ||f(x)||^2 / d theta| over samples."""
    if not samples:
        raise ValueError("MAS importance needs at least one sample")
    acc = [np.zeros(p.shape) for p in params]
    for s in samples:
        for p in params:
            p.grad = None
        nk.backward(nk.forward_eval(lambda s: nk.l2sq(output_fn(s)), s))
        for a, p in zip(acc, params):
            if p.grad is not None:
                a += np.abs(p.grad)
    for p in params:
        p.grad = None
    return [a / len(samples) for a in acc]


@dataclass
class SITrace:
    """Running path integral of -grad * step for every parameter."""

    omega: Buffers
    start: Buffers

    @classmethod
    def begin(cls, params: Sequence[nk.Tensor]) -> "SITrace":
        return cls([np.zeros(p.shape) for p in params], [p.values.copy() for p in params])

    def record(self, grads: Sequence[np.ndarray], before: Sequence[np.ndarray], after: Sequence[np.ndarray]) -> None:
        for w, g, b, a in zip(self.omega, grads, before, after):
            w -= g * (a - b)


def si_importance(trace: SITrace, params_now: Sequence[np.ndarray], params_at_task_start: Sequence[np.ndarray], damping: float) -> Buffers:
    if damping <= 0:
        raise ValueError(f"SI damping must be positive, got {damping}")
    out = []
    for w, now, start in zip(trace.omega, params_now, params_at_task_start):
        delta = np.asarray(now) - np.asarray(start)
        out.append(np.maximum(w / (delta * delta + damping), 0.0))
    return out


def normalize_importance(r: Buffers) -> Buffers:
    """Divide by the global max so that every measure lands in [0, 1]."""
    top = max((float(np.max(b)) for b in r if b.size), default=0.0)
    if top <= 0.0:
        return [np.zeros_like(b) for b in r]
    return [b / top for b in r]


@dataclass
class ImportanceStore:
    """Cumulative-max importance, owning task per parameter, and anchor values."""

    r_max: Buffers = field(default_factory=list)
    owner: list[np.ndarray] = field(default_factory=list)
    anchor: Buffers = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.r_max

    def owner_ids(self) -> set[int]:
        return {int(t) for o in self.owner for t in np.unique(o)}

    def to_json(self) -> dict:
        return {
            "r_max": [b.tolist() for b in self.r_max],
            "owner": [o.tolist() for o in self.owner],
            "anchor": [a.tolist() for a in self.anchor],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ImportanceStore":
        return cls(
            [np.array(b, dtype=np.float64) for b in obj["r_max"]],
            [np.array(o, dtype=np.int64) for o in obj["owner"]],
            [np.array(a, dtype=np.float64) for a in obj["anchor"]],
        )


def update_importance_store(store: ImportanceStore, r_new: Buffers, task_id: int, params: Sequence[nk.Tensor]) -> None:
    """Fold a task's normalized importance into the store.

    The owner becomes ``task_id`` only where the new importance strictly
    exceeds the stored maximum; the anchor is refreshed to ``params``.
    """
    _check_aligned(params, r_new, "new importance")
    if store.empty:
        store.r_max = [np.array(r, dtype=np.float64) for r in r_new]
        store.owner = [np.full(r.shape, task_id, dtype=np.int64) for r in r_new]
    else:
        _check_aligned(params, store.r_max, "importance store")
        for k, r in enumerate(r_new):
            store.owner[k] = np.where(r > store.r_max[k], task_id, store.owner[k])
            store.r_max[k] = np.maximum(store.r_max[k], r)
    store.anchor = [p.values.copy() for p in params]


def penalty_coefficients(store: ImportanceStore, sim: SimilarityVector | None = None) -> Buffers:
    """Per-parameter weight multiplying (theta - anchor)^2."""
    if sim is None:
        return [r.copy() for r in store.r_max]
    table = {tid: s for tid, s in zip(sim.previous_ids, sim.scores)}
    missing = store.owner_ids() - set(table)
    if missing:
        raise KeyError(f"similarity vector has no score for task(s) {sorted(missing)}")
    coeffs = []
    for r, owner in zip(store.r_max, store.owner):
        s = np.vectorize(table.__getitem__, otypes=[np.float64])(owner) if owner.size else np.zeros(owner.shape)
        coeffs.append((1.0 - np.clip(s, 0.0, 1.0)) * r)
    return coeffs


def weighted_drift(params: Sequence[nk.Tensor], coeffs: Buffers, anchor: Buffers) -> nk.Tensor:
    _check_aligned(params, coeffs, "penalty coefficients")
    _check_aligned(params, anchor, "anchor")
    terms = []
    for p, c, a in zip(params, coeffs, anchor):
        d = nk.sub(p, nk.Tensor(a))
        terms.append(nk.total(nk.mul(nk.Tensor(c), nk.mul(d, d))))
    out = terms[0]
    for t in terms[1:]:
        out = nk.add(out, t)
    return out


def reg_loss(params: Sequence[nk.Tensor], store: ImportanceStore) -> nk.Tensor:
    """sum_k r_max_k (theta_k - anchor_k)^2; callers scale by lambda1."""
    return weighted_drift(params, store.r_max, store.anchor)


def tir_reg_loss(params: Sequence[nk.Tensor], store: ImportanceStore, sim: SimilarityVector) -> nk.Tensor:
    """Similarity-weighted penalty: sum_k (1 - s[owner_k]) r_max_k (theta_k - anchor_k)^2."""
    return weighted_drift(params, penalty_coefficients(store, sim), store.anchor)
