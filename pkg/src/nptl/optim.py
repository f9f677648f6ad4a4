"""Minibatch SGD with momentum and best-iterate tracking."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = ["OptimizerConfig", "FitResult", "TrainingDiverged", "sgd_minimize"]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step} (objective {value})")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 0.1
    schedule: str = "cosine"
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    steps: Optional[int] = None  # overrides epochs when set
    seed: int = 0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ValueError("epochs and steps must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)

    def total_steps(self, n_examples: int) -> int:
        if self.steps is not None:
            return self.steps
        per_epoch = max(1, math.ceil(n_examples / self.batch_size)) if n_examples else 1
        return self.epochs * per_epoch

    def lr_at(self, step: int, total: int) -> float:
        if self.schedule == "constant" or total == 0:
            return self.base_lr
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * step / total))


@dataclass
class FitResult:
    values: np.ndarray
    objective: float
    initial_objective: float
    history: list = field(default_factory=list)  # full objective after each epoch
    best_epoch: int = 0  # 0 means the initial point
    steps: int = 0


# batch_objective(values, idx) -> (summed loss over idx, gradient)
BatchObjective = Callable[[np.ndarray, np.ndarray], tuple]
Regulariser = Callable[[np.ndarray], tuple]


def sgd_minimize(
    batch_objective: BatchObjective,
    x0: np.ndarray,
    n_examples: int,
    opt: OptimizerConfig,
    rng: Optional[np.random.Generator] = None,
    regulariser: Optional[Regulariser] = None,
    on_epoch: Optional[Callable[[int, np.ndarray], None]] = None,
) -> FitResult:
    """Minimise ``sum_i loss_i(x) + regulariser(x)`` by shuffled minibatch SGD.

    The step uses the per-example scale: batch gradient divided by batch size
    plus the regulariser gradient divided by ``n_examples``. The full objective
    is evaluated at the start and after every epoch and the best iterate seen
    is returned, so the result is never worse than ``x0``.
    """
    rng = np.random.default_rng(opt.seed) if rng is None else rng
    x = np.array(x0, dtype=np.float64, copy=True)
    everything = np.arange(n_examples)

    def full(values):
        f = batch_objective(values, everything)[0] if n_examples else 0.0
        if regulariser is not None:
            f += regulariser(values)[0]
        return f

    f0 = full(x)
    if not math.isfinite(f0):
        raise TrainingDiverged(0, f0)
    best_x, best_f, best_epoch = x.copy(), f0, 0
    history = []
    total = opt.total_steps(n_examples)
    vel = np.zeros_like(x)
    step, epoch = 0, 0
    reg_scale = 1.0 / n_examples if n_examples else 1.0
    while step < total:
        epoch += 1
        order = rng.permutation(n_examples) if n_examples else np.empty(0, dtype=np.int64)
        batches = [order[i:i + opt.batch_size] for i in range(0, n_examples, opt.batch_size)] or [order]
        for idx in batches:
            if step >= total:
                break
            g = np.zeros_like(x)
            if idx.size:
                loss, gb = batch_objective(x, idx)
                if not math.isfinite(loss):
                    raise TrainingDiverged(step, loss)
                g += gb / idx.size
            if regulariser is not None:
                g += regulariser(x)[1] * reg_scale
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(step, float("nan"))
            vel = opt.momentum * vel + g
            x = x - opt.lr_at(step, total) * vel
            step += 1
        f = full(x)
        if not math.isfinite(f):
            raise TrainingDiverged(step, f)
        history.append(f)
        if on_epoch is not None:
            on_epoch(epoch, x)
        if f < best_f:
            best_x, best_f, best_epoch = x.copy(), f, epoch
    return FitResult(best_x, best_f, f0, history, best_epoch, step)
