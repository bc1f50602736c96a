"""Desk-scale multimodal learner.

Frozen image and instruction encoders feed a trainable projection block
(dense -> tanh -> dense); a frozen decoder head maps the projected vector to
logits over the vocabulary. Per-task projection blocks live in a bank keyed
by task ID; strategies that share one block use the reserved ``SHARED`` key.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numkernel as nk
from .taskstream import Sample

SHARED = -1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 32
    embed_dim: int = 32
    hidden_dim: int = 32
    vocab_size: int = 24
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "embed_dim", "hidden_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")


def default_vocab(size: int) -> list[str]:
    return [f"w{i:02d}" for i in range(size)]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass
class FrozenEncoder:
    matrix: np.ndarray
    modality: str

    def __post_init__(self):
        self.matrix = _frozen(self.matrix)


class ProjectionBlock:
    """Two dense layers with a tanh in between (embed -> hidden -> embed)."""

    def __init__(self, w1, b1, w2, b2, trainable: bool = True):
        self.w1 = nk.Tensor(w1, trainable, "w1")
        self.b1 = nk.Tensor(b1, trainable, "b1")
        self.w2 = nk.Tensor(w2, trainable, "w2")
        self.b2 = nk.Tensor(b2, trainable, "b2")
        self._trainable = trainable

    @classmethod
    def random(cls, embed_dim: int, hidden_dim: int, rng: np.random.Generator) -> "ProjectionBlock":
        w1 = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=(embed_dim, hidden_dim))
        w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=(hidden_dim, embed_dim))
        return cls(w1, np.zeros(hidden_dim), w2, np.zeros(embed_dim))

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = flag
        for p in self.params():
            p.requires_grad = flag
            p.grad = None

    def params(self) -> list[nk.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self, trainable: bool = True) -> "ProjectionBlock":
        return ProjectionBlock(
            self.w1.values.copy(), self.b1.values.copy(), self.w2.values.copy(), self.b2.values.copy(), trainable
        )

    def forward(self, x: nk.Tensor) -> nk.Tensor:
        h = nk.tanh(nk.add(nk.matmul(x, self.w1), self.b1))
        return nk.add(nk.matmul(h, self.w2), self.b2)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.values.ravel() for p in self.params()])

    def checksum(self) -> str:
        return hashlib.sha256(self.flat().tobytes()).hexdigest()


@dataclass
class ModelState:
    config: ModelConfig
    image_encoder: FrozenEncoder
    text_encoder: FrozenEncoder
    bank: dict[int, ProjectionBlock]
    decoder: np.ndarray
    vocab: list[str]

    def __post_init__(self):
        self.decoder = _frozen(self.decoder)
        if self.decoder.shape != (self.config.embed_dim, len(self.vocab)):
            raise ValueError(
                f"decoder head shape {self.decoder.shape} does not match (embed_dim, vocab) "
                f"= ({self.config.embed_dim}, {len(self.vocab)})"
            )
        if not self.bank:
            raise ValueError("projection bank must hold at least one block")
        self.token_index = {tok: i for i, tok in enumerate(self.vocab)}
        self._decoder_t = nk.Tensor(self.decoder)

    def trainable_params(self) -> list[nk.Tensor]:
        return [p for block in self.bank.values() if block.trainable for p in block.params()]

    def block(self, task_id: int) -> ProjectionBlock:
        try:
            return self.bank[task_id]
        except KeyError:
            raise KeyError(f"task id {task_id} is not in the projection bank {sorted(self.bank)}") from None

    def token_id(self, token: str) -> int:
        try:
            return self.token_index[token]
        except KeyError:
            raise KeyError(f"token {token!r} is not in the vocabulary") from None


def _semi_orthogonal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Random matrix with orthonormal rows (or columns when rows > cols).

    With rows <= cols the map preserves inner products, standing in for a
    pretrained encoder that keeps task structure intact.
    """
    q, r = np.linalg.qr(rng.normal(size=(max(rows, cols), min(rows, cols))))
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def build_model(config: ModelConfig, vocab: Sequence[str] | None = None) -> ModelState:
    vocab = list(vocab) if vocab is not None else default_vocab(config.vocab_size)
    if len(vocab) != config.vocab_size:
        raise ValueError(f"vocab has {len(vocab)} tokens, config says {config.vocab_size}")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x3E0DE1]))
    d = config.embed_dim
    image = FrozenEncoder(_semi_orthogonal(config.input_dim, d, rng), "image")
    text = FrozenEncoder(np.sqrt(d) * _semi_orthogonal(config.vocab_size, d, rng), "text")
    decoder = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, config.vocab_size))
    shared = ProjectionBlock.random(d, config.hidden_dim, rng)
    return ModelState(config, image, text, {SHARED: shared}, decoder, vocab)


def encode_sample(model: ModelState, sample: Sample) -> tuple[np.ndarray, np.ndarray]:
    """(image embedding, instruction embedding) of one sample."""
    img, txt = encode_batch(model, [sample])
    return img[0], txt[0]


def encode_batch(model: ModelState, samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.array([s.image for s in samples], dtype=np.float64).reshape(len(samples), -1)
    if images.shape[1] != model.config.input_dim:
        raise ValueError(f"image length {images.shape[1]} != input_dim {model.config.input_dim}")
    rows = model.text_encoder.matrix
    txt = np.stack([rows[[model.token_id(t) for t in s.instruction]].mean(axis=0) for s in samples])
    return images @ model.image_encoder.matrix, txt


def output_embeddings(model: ModelState, samples: Sequence[Sample]) -> np.ndarray:
    return model.text_encoder.matrix[[model.token_id(s.output) for s in samples]]


def fused_inputs(model: ModelState, samples: Sequence[Sample]) -> np.ndarray:
    img, txt = encode_batch(model, samples)
    return 0.5 * (img + txt)


def logits_from_inputs(model: ModelState, x: np.ndarray, task_id: int) -> nk.Tensor:
    z = model.block(task_id).forward(nk.Tensor(x))
    return nk.matmul(z, model._decoder_t)


def predict_inputs(model: ModelState, x: np.ndarray, task_id: int) -> np.ndarray:
    with nk.no_grad():
        logits = logits_from_inputs(model, x, task_id)
    return nk.softmax(logits.values)


def predict(model: ModelState, sample: Sample, task_id: int) -> np.ndarray:
    """Output-token distribution for ``sample`` through the block of ``task_id``."""
    return predict_inputs(model, fused_inputs(model, [sample]), task_id)[0]


def output_targets(model: ModelState, samples: Iterable[Sample]) -> np.ndarray:
    return np.array([model.token_id(s.output) for s in samples], dtype=np.int64)


def task_loss_from_inputs(model: ModelState, x: np.ndarray, targets: np.ndarray, task_id: int) -> nk.Tensor:
    if len(targets) == 0:
        raise ValueError("task loss needs a nonempty batch")
    return nk.softmax_cross_entropy(logits_from_inputs(model, x, task_id), targets)


def task_loss(model: ModelState, batch: Sequence[Sample], task_id: int) -> nk.Tensor:
    if not batch:
        raise ValueError("task loss needs a nonempty batch")
    return task_loss_from_inputs(model, fused_inputs(model, batch), output_targets(model, batch), task_id)


def model_loss_gradcheck(n_seeds: int = 100, batch: int = 4) -> float:
    """Worst taped-vs-finite-difference error of the full task loss over seeds."""
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        model = build_model(ModelConfig(input_dim=6, embed_dim=5, hidden_dim=4, vocab_size=7, seed=seed))
        samples = [
            Sample(tuple(rng.normal(size=6)), tuple(rng.choice(model.vocab, size=3)), str(rng.choice(model.vocab)))
            for _ in range(batch)
        ]
        params = model.trainable_params()
        worst = max(worst, nk.check_gradients(lambda _: task_loss(model, samples, SHARED), params))
    return worst


def expand_projection(model: ModelState, task_id: int, init: str = "copy-previous") -> ProjectionBlock:
    """Add a trainable block for ``task_id`` and freeze every other block."""
    if task_id in model.bank:
        raise ValueError(f"task id {task_id} already has a projection block")
    if init == "copy-previous":
        latest = next(reversed(model.bank.values()))
        block = latest.copy()
    elif init == "fresh-seed":
        rng = np.random.default_rng(np.random.SeedSequence([model.config.seed, 0xB10C, task_id + 1]))
        block = ProjectionBlock.random(model.config.embed_dim, model.config.hidden_dim, rng)
    else:
        raise ValueError(f"unknown block init {init!r}")
    for other in model.bank.values():
        other.trainable = False
    model.bank[task_id] = block
    return block


def freeze_all_but(model: ModelState, task_id: int) -> None:
    for key, block in model.bank.items():
        block.trainable = key == task_id


def save_model(model: ModelState, path: str | Path) -> None:
    payload = {
        "config": asdict(model.config),
        "vocab": model.vocab,
        "image_encoder": model.image_encoder.matrix.tolist(),
        "text_encoder": model.text_encoder.matrix.tolist(),
        "decoder": model.decoder.tolist(),
        "bank": [
            {
                "task_id": key,
                "trainable": block.trainable,
                **{name: p.values.tolist() for name, p in zip(("w1", "b1", "w2", "b2"), block.params())},
            }
            for key, block in model.bank.items()
        ],
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_model(path: str | Path) -> ModelState:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    config = ModelConfig(**payload["config"])
    bank = {
        entry["task_id"]: ProjectionBlock(entry["w1"], entry["b1"], entry["w2"], entry["b2"], entry["trainable"])
        for entry in payload["bank"]
    }
    return ModelState(
        config,
        FrozenEncoder(np.array(payload["image_encoder"]), "image"),
        FrozenEncoder(np.array(payload["text_encoder"]), "text"),
        bank,
        np.array(payload["decoder"]),
        payload["vocab"],
    )
