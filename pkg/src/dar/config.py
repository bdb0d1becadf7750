"""Dataclass configs and presets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

from .mtbin import DepthRangeConfig


@dataclass(frozen=True)
class StepSchedule:
    """Token-map resolution for each of the K autoregressive steps."""

    steps: tuple[tuple[int, int], ...]
    n_bins: int = 16

    def __post_init__(self):
        steps = tuple(tuple(int(v) for v in s) for s in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ValueError("schedule needs at least one step")
        for (h0, w0), (h1, w1) in zip(steps, steps[1:]):
            if h1 < h0 or w1 < w0 or h1 % h0 or w1 % w0:
                raise ValueError(f"schedule step {(h0, w0)} -> {(h1, w1)} must grow by an integer factor")
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")

    @property
    def K(self) -> int:
        return len(self.steps)

    def truncated(self, k: int) -> "StepSchedule":
        return replace(self, steps=self.steps[:k])

    @classmethod
    def doubling(cls, first: int, k: int, n_bins: int = 16) -> "StepSchedule":
        return cls(tuple((first * 2**i, first * 2**i) for i in range(k)), n_bins)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 10.0
    beta: float = 0.85

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    heads: int = 4
    layers: int = 2
    image_size: tuple[int, int] = (64, 64)
    schedule: StepSchedule = field(default_factory=lambda: StepSchedule.doubling(4, 5))
    depth_range: DepthRangeConfig = field(default_factory=DepthRangeConfig)
    share_blocks: bool = True  # one block stack for all K steps
    carry_state: bool = False  # GRU hidden state carried across steps
    ln_eps: float = 1e-5

    def __post_init__(self):
        h, w = self.image_size
        if h % 8 or w % 8:
            raise ValueError(f"image size {self.image_size} must be divisible by 8")
        if self.hidden % self.heads:
            raise ValueError(f"heads {self.heads} must divide hidden size {self.hidden}")
        fh, fw = self.schedule.steps[-1]
        if fh > h or fw > w:
            raise ValueError(f"final resolution {(fh, fw)} exceeds image size {self.image_size}")
        if h % fh or w % fw:
            raise ValueError(f"final resolution {(fh, fw)} must divide image size {self.image_size}")
        if self.schedule.n_bins != self.depth_range.n_bins:
            raise ValueError("schedule and depth range disagree on n_bins")

    @property
    def n_bins(self) -> int:
        return self.depth_range.n_bins

    @property
    def token_size(self) -> tuple[int, int]:
        return self.image_size[0] // 8, self.image_size[1] // 8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        sched = d.pop("schedule")
        rng = d.pop("depth_range")
        return cls(
            schedule=StepSchedule(tuple(map(tuple, sched["steps"])), sched["n_bins"]),
            depth_range=DepthRangeConfig(**rng),
            image_size=tuple(d.pop("image_size")),
            **d,
        )

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


PRESETS = {
    "test": dict(hidden=64, heads=4, layers=2),
    "train": dict(hidden=256, heads=8, layers=5),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 500
    batch_size: int = 1
    lr_init: float = 3e-5
    lr_peak: float = 5e-4
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    seed: int = 0
