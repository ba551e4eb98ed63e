"""Plain dataclass configs shared by training, attacks and the CLI."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

REG_MODES = ("none", "sigma2", "tanh")


@dataclass
class RegConfig:
    """Penalty on Gabor scales: ``sigma2`` subtracts ``beta*sum(sigma^2)``,
    ``tanh`` subtracts ``beta*sum((mu*tanh(sigma))^2)``."""

    mode: str = "none"
    beta: float = 1e-3
    mu: float = 3.0

    def __post_init__(self):
        if self.mode not in REG_MODES:
            raise ValueError(f"unknown regularizer {self.mode!r}; expected one of {REG_MODES}")
        if not math.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if self.mode == "tanh" and not math.isfinite(self.mu):
            raise ValueError("tanh regularizer needs a finite mu")


@dataclass
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 20
    milestones: tuple[int, ...] = (10, 15)
    seed: int = 0
    reg: RegConfig = field(default_factory=RegConfig)
    sigma_cap: Optional[float] = 25.0
    eval_batch: int = 500

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        self.milestones = tuple(int(m) for m in self.milestones)
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError(f"milestones must be sorted, got {self.milestones}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class FreeAdvConfig:
    replays: int = 8
    epsilon: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        if self.replays < 1:
            raise ValueError(f"replays must be >= 1, got {self.replays}")
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")


@dataclass
class AttackConfig:
    """L-infinity PGD settings; ``step`` defaults to ``epsilon / 10``."""

    epsilon: float
    step: Optional[float] = None
    iters: int = 50
    restarts: int = 2
    seed: int = 0
    max_samples: Optional[int] = None
    batch_size: int = 250

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.step is None:
            self.step = self.epsilon / 10.0
        if self.step < 0 or (self.step == 0 and self.epsilon > 0):
            raise ValueError(f"step must be positive, got {self.step}")
        if self.iters < 1 or self.restarts < 1:
            raise ValueError("iters and restarts must be >= 1")
