"""Momentum SGD with a step-decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass
from typing import MutableMapping

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    decay_factor: float = 1.0
    decay_interval: int = 1
    momentum: float = 0.9
    batch_size: int = 1
    # whether ``decay_interval`` counts iterations or epochs
    interval_unit: str = "iteration"

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must be in (0, 1]")
        if self.decay_interval < 1:
            raise ConfigError("decay_interval must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.interval_unit not in ("iteration", "epoch"):
            raise ConfigError("interval_unit must be 'iteration' or 'epoch'")

    def lr_at(self, step: int) -> float:
        """``lr0 * factor ** floor(step / interval)``, floored at the smallest positive double."""
        lr = self.learning_rate * self.decay_factor ** (step // self.decay_interval)
        if self.learning_rate > 0:
            lr = max(lr, np.finfo(np.float64).tiny)
        return lr


def sgd_step(params: MutableMapping[str, np.ndarray], grads: MutableMapping[str, np.ndarray],
             config: SgdConfig, step: int,
             velocity: MutableMapping[str, np.ndarray] | None = None) -> MutableMapping[str, np.ndarray]:
    """In-place update ``v = momentum * v + g; w -= lr(step) * v``.

    ``step`` is the iteration or epoch index, matching ``config.interval_unit``.
    ``velocity`` holds the momentum buffers between calls.
    """
    lr = config.lr_at(step)
    if velocity is None:
        velocity = {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(w)
        v *= config.momentum
        v += g
        w -= (lr * v).astype(w.dtype, copy=False)
    return params
