"""Common training loop shared by every continual-learning strategy."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import numkernel as nk
from ..model import (
    SHARED,
    ModelState,
    encode_batch,
    expand_projection,
    freeze_all_but,
    fused_inputs,
    load_model,
    output_targets,
    predict_inputs,
    save_model,
    task_loss_from_inputs,
)
from ..similarity import SimilarityVector, TaskEmbedding, TaskKey, embed_task, retrieve_from_embeddings, task_similarity
from ..taskstream import Sample, TaskDataset
from .config import StrategyConfig
from .expansion import init_key, pull_loss_from_embeddings, time_gate
from .importance import (
    ImportanceStore,
    SITrace,
    ewc_importance,
    mas_importance,
    normalize_importance,
    penalty_coefficients,
    si_importance,
    update_importance_store,
    weighted_drift,
)
from .replay import ReplayBuffer, agem_project, buffer_update, er_merge

log = logging.getLogger(__name__)


@dataclass
class StrategyState:
    config: StrategyConfig
    store: ImportanceStore = field(default_factory=ImportanceStore)
    buffer: ReplayBuffer | None = None
    keys: dict[int, TaskKey] = field(default_factory=dict)
    embeddings: list[TaskEmbedding] = field(default_factory=list)
    task_to_block: dict[int, int] = field(default_factory=dict)
    stage: int = 0

    def __post_init__(self):
        if self.buffer is None:
            self.buffer = ReplayBuffer(self.config.buffer_fraction)

    def block_for(self, task_id: int) -> int:
        return self.task_to_block.get(task_id, SHARED)

    def to_json(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "stage": self.stage,
            "store": self.store.to_json(),
            "buffer": self.buffer.to_json(),
            "keys": [k.to_json() for k in self.keys.values()],
            "embeddings": [e.to_json() for e in self.embeddings],
            "task_to_block": [[k, v] for k, v in self.task_to_block.items()],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StrategyState":
        keys = [TaskKey.from_json(k) for k in obj["keys"]]
        return cls(
            StrategyConfig.from_dict(obj["config"]),
            ImportanceStore.from_json(obj["store"]),
            ReplayBuffer.from_json(obj["buffer"]),
            {k.task_id: k for k in keys},
            [TaskEmbedding.from_json(e) for e in obj["embeddings"]],
            {int(k): int(v) for k, v in obj["task_to_block"]},
            obj["stage"],
        )


@dataclass
class StageLog:
    stage: int
    task_id: int
    block_id: int
    action: str
    epoch_losses: list[float]
    similarity: list[float] | None = None
    similarity_ids: list[int] | None = None
    current_score: float | None = None
    notes: list[str] = field(default_factory=list)


def save_checkpoint(model: ModelState, state: StrategyState, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_model(model, directory / "model.json")
    (directory / "state.json").write_text(json.dumps(state.to_json()), encoding="utf-8")


def load_checkpoint(directory: str | Path) -> tuple[ModelState, StrategyState]:
    directory = Path(directory)
    model = load_model(directory / "model.json")
    state = StrategyState.from_json(json.loads((directory / "state.json").read_text(encoding="utf-8")))
    return model, state


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def _proximal_step(params: Sequence[nk.Tensor], coeffs, anchor, lr: float, lam: float) -> None:
    # exact minimizer of the linearized task loss plus the quadratic anchor
    # penalty; stable for any lambda1
    for p, c, a in zip(params, coeffs, anchor):
        k = 2.0 * lr * lam * c
        p.values[...] = (p.values - lr * p.grad + k * a) / (1.0 + k)
        p.grad = None


def _penalty_value(params: Sequence[nk.Tensor], coeffs, anchor) -> float:
    return float(sum(np.sum(c * (p.values - a) ** 2) for p, c, a in zip(params, coeffs, anchor)))


def _regularizer_similarity(state: StrategyState, task_id: int, sim: SimilarityVector | None) -> SimilarityVector | None:
    cfg = state.config
    if not cfg.tir_enabled:
        return None
    owners = sorted(state.store.owner_ids())
    if cfg.tir_constant_weight is not None:
        return SimilarityVector.constant(task_id, owners, cfg.tir_constant_weight)
    return sim


def train_task(model: ModelState, state: StrategyState, dataset: TaskDataset, seed: int) -> StageLog:
    """Train one stage of the stream and run the strategy's after-task hooks.

    Only the current dataset is visible here; earlier tasks are reachable
    through ``state.buffer`` alone.
    """
    cfg = state.config
    tid = dataset.task_id
    rng = np.random.default_rng(np.random.SeedSequence([seed, state.stage]))
    emb = embed_task(dataset, model, tid)
    sim = task_similarity(emb, state.embeddings) if state.embeddings else None
    stage_log = StageLog(
        state.stage, tid, SHARED, "train", [],
        similarity=None if sim is None else list(sim.scores),
        similarity_ids=None if sim is None else list(sim.previous_ids),
    )

    key: TaskKey | None = None
    train = True
    if cfg.expands:
        decision = None
        if state.keys and cfg.strategy == "time":
            decision = time_gate(sim, cfg.time_threshold)
        if decision is None or decision.expand:
            expand_projection(model, tid, cfg.block_init)
            stage_log.block_id, stage_log.action = tid, "expand"
        else:
            reuse = decision.reuse_id
            stage_log.block_id, stage_log.action = state.block_for(reuse), "reuse"
            train = cfg.reuse_retrain
            if train:
                freeze_all_but(model, stage_log.block_id)
                key = state.keys[stage_log.block_id]
                for p in key.params():
                    p.requires_grad = True
        state.task_to_block[tid] = stage_log.block_id
    else:
        freeze_all_but(model, SHARED)

    trace = None
    if train:
        trace, key = _fit(model, state, dataset, stage_log, sim, key, rng)

    # after-task hooks
    block_params = model.block(stage_log.block_id).params()
    if cfg.regularized:
        if cfg.importance_measure == "ewc":
            r = ewc_importance(model, dataset, SHARED)
        elif cfg.importance_measure == "mas":
            r = mas_importance(model, dataset, SHARED)
        else:
            r = si_importance(trace, [p.values for p in block_params], trace.start, cfg.si_damping)
        update_importance_store(state.store, normalize_importance(r), tid, block_params)
    if cfg.replays:
        buffer_update(state.buffer, dataset, seed)
    if cfg.expands:
        if stage_log.action == "expand":
            state.keys[tid] = key
        for k in state.keys.values():
            k.freeze()
        model.block(stage_log.block_id).trainable = False
    state.embeddings.append(emb)
    state.stage += 1
    stage_log.current_score = evaluate(model, state, dataset, oracle_ids=cfg.eproj_oracle_ids)
    return stage_log


def _fit(model, state, dataset, stage_log, sim, key, rng) -> tuple[SITrace | None, TaskKey | None]:
    cfg = state.config
    tid = dataset.task_id
    block_id = stage_log.block_id
    pool: Sequence[Sample] = er_merge(state.buffer, dataset) if cfg.strategy == "er" else dataset.train
    x = fused_inputs(model, pool)
    y = output_targets(model, pool)
    img, txt = encode_batch(model, pool) if cfg.expands else (None, None)
    params = model.block(block_id).params()

    use_reg = cfg.regularized and not state.store.empty and cfg.lambda1 > 0
    if use_reg:
        reg_sim = _regularizer_similarity(state, tid, sim)
        coeffs = penalty_coefficients(state.store, reg_sim)
        anchor = state.store.anchor
    trace = SITrace.begin(params) if cfg.importance_measure == "si" else None

    ref_x = ref_y = None
    if cfg.strategy == "agem":
        replay = state.buffer.all_samples()
        if replay:
            ref_x, ref_y = fused_inputs(model, replay), output_targets(model, replay)
        else:
            stage_log.notes.append("agem: empty buffer, projection skipped")
            log.info("A-GEM at stage %d: empty buffer, gradient projection skipped", state.stage)

    for _ in range(cfg.epochs):
        running = 0.0
        n_batches = 0
        for idx in _batches(len(y), cfg.batch_size, rng):
            if cfg.expands and key is None:
                key = init_key(tid, img[idx], txt[idx])
            loss = task_loss_from_inputs(model, x[idx], y[idx], block_id)
            nk.backward(loss)
            step_loss = loss.item()
            g_task = [p.grad.copy() for p in params] if trace is not None else None

            if ref_x is not None:
                g = np.concatenate([p.grad.ravel() for p in params])
                for p in params:
                    p.grad = None
                ref_idx = rng.choice(len(ref_y), size=min(cfg.batch_size, len(ref_y)), replace=False)
                nk.backward(task_loss_from_inputs(model, ref_x[ref_idx], ref_y[ref_idx], block_id))
                g_ref = np.concatenate([p.grad.ravel() for p in params])
                g = agem_project(g, g_ref)
                offset = 0
                for p in params:
                    p.grad = g[offset : offset + p.size].reshape(p.shape)
                    offset += p.size

            if key is not None and cfg.lambda2 > 0:
                pull = nk.scale(pull_loss_from_embeddings(img[idx], txt[idx], key), cfg.lambda2)
                nk.backward(pull)
                step_loss += pull.item()
                nk.sgd_step(key.params(), cfg.lr)

            before = [p.values.copy() for p in params] if trace is not None else None
            if use_reg:
                step_loss += cfg.lambda1 * _penalty_value(params, coeffs, anchor)
                if cfg.reg_update == "proximal":
                    _proximal_step(params, coeffs, anchor, cfg.lr, cfg.lambda1)
                else:
                    nk.backward(nk.scale(weighted_drift(params, coeffs, anchor), cfg.lambda1))
                    nk.sgd_step(params, cfg.lr)
            else:
                nk.sgd_step(params, cfg.lr)
            if trace is not None:
                trace.record(g_task, before, [p.values for p in params])
            running += step_loss
            n_batches += 1
        stage_log.epoch_losses.append(running / n_batches)

    return trace, key


def evaluate(
    model: ModelState,
    state: StrategyState,
    dataset: TaskDataset,
    oracle_ids: bool = False,
    as_task: int | None = None,
    split: str = "val",
) -> float:
    """Exact-match accuracy (percent) on one split of ``dataset``."""
    samples = getattr(dataset, split)
    tid = dataset.task_id if as_task is None else as_task
    x = fused_inputs(model, samples)
    y = output_targets(model, samples)
    if not state.config.expands:
        pred = predict_inputs(model, x, SHARED).argmax(axis=1)
        return float(100.0 * np.mean(pred == y))
    if oracle_ids:
        blocks = np.full(len(samples), state.task_to_block[tid])
    else:
        img, txt = encode_batch(model, samples)
        blocks = np.array([state.block_for(k) for k in retrieve_from_embeddings(img, txt, list(state.keys.values()))])
    pred = np.empty(len(samples), dtype=np.int64)
    for b in np.unique(blocks):
        mask = blocks == b
        pred[mask] = predict_inputs(model, x[mask], int(b)).argmax(axis=1)
    return float(100.0 * np.mean(pred == y))


def retrieval_predictions(model: ModelState, state: StrategyState, samples: Sequence[Sample]) -> list[int]:
    img, txt = encode_batch(model, samples)
    return retrieve_from_embeddings(img, txt, list(state.keys.values()))
