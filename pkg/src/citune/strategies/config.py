from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

STRATEGIES = ("seqft", "ewc", "mas", "si", "er", "agem", "eproj", "time")
REGULARIZED = {"ewc": "ewc", "mas": "mas", "si": "si"}


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = "seqft"
    lambda1: float = 1.0
    lambda2: float = 0.1
    buffer_fraction: float = 0.05
    time_threshold: float = 0.5
    importance_measure: str | None = None
    tir_enabled: bool = False
    tir_constant_weight: float | None = None
    si_damping: float = 1e-3
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.5
    reg_update: str = "proximal"
    block_init: str = "copy-previous"
    eproj_oracle_ids: bool = False
    reuse_retrain: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if not 0.0 <= self.buffer_fraction <= 1.0:
            raise ValueError(f"buffer_fraction must lie in [0, 1], got {self.buffer_fraction}")
        if self.si_damping <= 0:
            raise ValueError("si_damping must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.tir_constant_weight is not None and not 0.0 <= self.tir_constant_weight <= 1.0:
            raise ValueError(f"tir_constant_weight must lie in [0, 1], got {self.tir_constant_weight}")
        if self.time_threshold < 0:
            raise ValueError("time_threshold must be non-negative")
        if self.reg_update not in ("proximal", "gradient"):
            raise ValueError(f"reg_update must be 'proximal' or 'gradient', got {self.reg_update!r}")
        measure = self.importance_measure or REGULARIZED.get(self.strategy)
        if measure is not None and measure not in ("ewc", "mas", "si"):
            raise ValueError(f"unknown importance measure {measure!r}")
        object.__setattr__(self, "importance_measure", measure)

    @property
    def regularized(self) -> bool:
        return self.strategy in REGULARIZED

    @property
    def expands(self) -> bool:
        return self.strategy in ("eproj", "time")

    @property
    def replays(self) -> bool:
        return self.strategy in ("er", "agem")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "StrategyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown strategy config keys: {sorted(unknown)}")
        return cls(**obj)

    def with_(self, **changes) -> "StrategyConfig":
        return replace(self, **changes)


# Hyperparameters reported for the full-scale runs (batch 256, 5 epochs,
# lr 1e-5, lambda1 1e8, lambda2 0.1, 1% replay buffer).
PAPER_PROFILE = dict(lambda1=1e8, lambda2=0.1, buffer_fraction=0.01, epochs=5, batch_size=256, lr=1e-5)

DESK_PROFILE = dict(lambda1=1.0, lambda2=0.1, buffer_fraction=0.05, epochs=5, batch_size=32, lr=0.5)


def profile(name: str, strategy: str = "seqft", **overrides) -> StrategyConfig:
    base = {"paper": PAPER_PROFILE, "desk": DESK_PROFILE}.get(name)
    if base is None:
        raise ValueError(f"unknown profile {name!r}")
    return StrategyConfig(strategy=strategy, **{**base, **overrides})
