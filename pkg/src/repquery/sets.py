"""Per-sequence target and prediction sets exchanged between matcher, loss and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ContractError
from .geometry import Interval

REPETITIVE = 1
NO_ACTION = 0


@dataclass
class TargetSet:
    """Ground-truth cycles padded with the no-action class to a fixed size."""

    classes: np.ndarray
    midpoints: np.ndarray
    durations: np.ndarray
    true_count: int

    def __post_init__(self) -> None:
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.midpoints = np.asarray(self.midpoints, dtype=np.float64)
        self.durations = np.asarray(self.durations, dtype=np.float64)
        n = len(self.classes)
        if self.midpoints.shape != (n,) or self.durations.shape != (n,):
            raise ContractError("target arrays must share length")
        if int(np.sum(self.classes == REPETITIVE)) != self.true_count:
            raise ContractError("true_count must equal the number of repetitive entries")
        if not np.all(np.isin(self.classes, (NO_ACTION, REPETITIVE))):
            raise ContractError("classes must be 0 or 1")

    @classmethod
    def from_intervals(cls, cycles: Sequence[Interval], size: int) -> "TargetSet":
        n = len(cycles)
        if n > size:
            raise ContractError(f"{n} cycles do not fit in a set of size {size}")
        classes = np.zeros(size, dtype=np.int64)
        classes[:n] = REPETITIVE
        mids = np.full(size, 0.5)
        durs = np.ones(size)
        for i, iv in enumerate(cycles):
            mids[i] = iv.midpoint
            durs[i] = iv.duration
        return cls(classes, mids, durs, n)

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def repetitive_rows(self) -> np.ndarray:
        return np.flatnonzero(self.classes == REPETITIVE)

    def intervals(self) -> list[Interval]:
        return [Interval(float(self.midpoints[i]), float(self.durations[i])) for i in self.repetitive_rows]


@dataclass
class PredictionSet:
    """Repetitive-class probabilities and (m, d) locations for one sequence."""

    probs: np.ndarray
    midpoints: np.ndarray
    durations: np.ndarray
    layer_tag: str = "final"
    extras: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.midpoints = np.asarray(self.midpoints, dtype=np.float64)
        self.durations = np.asarray(self.durations, dtype=np.float64)
        n = len(self.probs)
        if self.midpoints.shape != (n,) or self.durations.shape != (n,):
            raise ContractError("prediction arrays must share length")
        if np.any((self.probs < 0) | (self.probs > 1)):
            raise ContractError("probabilities must lie in [0, 1]")
        if np.any(self.durations <= 0):
            raise ContractError("predicted durations must be positive")

    def __len__(self) -> int:
        return len(self.probs)
