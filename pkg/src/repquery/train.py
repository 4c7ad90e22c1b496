"""Mini-batch training with best-on-validation model selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import AdamW
from .evaluation import evaluate, stack_features
from .geometry import Interval
from .model import ConfigError, ModelConfig, QueryModel
from .objective import LossWeights, total_loss
from .sets import TargetSet
from .synth import SequenceSample

log = logging.getLogger(__name__)

AUGMENTATIONS = ("none", "flip", "rotate")
SCHEDULES = ("constant", "cosine")
MIN_LR_FRACTION = 0.1


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float | None = 1.0
    augment: str = "flip"
    warmup_steps: int = 200
    schedule: str = "cosine"

    def __post_init__(self) -> None:
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.lr > 0:
            raise ConfigError("lr", "must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip", "must be > 0 or null")
        if self.augment not in AUGMENTATIONS:
            raise ConfigError("augment", f"choose from {', '.join(AUGMENTATIONS)}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps", "must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ConfigError("schedule", f"choose from {', '.join(SCHEDULES)}")

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate for the 1-based optimiser step out of ``total``."""
        if step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        if self.schedule == "cosine" and total > self.warmup_steps:
            frac = (step - self.warmup_steps) / (total - self.warmup_steps)
            return self.lr * (MIN_LR_FRACTION + (1 - MIN_LR_FRACTION) * 0.5 * (1 + np.cos(np.pi * frac)))
        return self.lr

    @classmethod
    def paper(cls) -> "OptimConfig":
        return cls(lr=0.002, batch_size=64, epochs=80, augment="none", warmup_steps=0, schedule="constant")


@dataclass
class TrainResult:
    model: QueryModel
    best_epoch: int
    best_val: tuple[float, float] | None
    log: list[dict] = field(default_factory=list)
    steps: int = 0


def targets_for(samples: Sequence[SequenceSample], size: int) -> list[TargetSet]:
    return [TargetSet.from_intervals(s.cycles, size) for s in samples]


def random_rotation(rng: np.random.Generator, n: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix."""
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))[None, :]


def random_signed_permutation(rng: np.random.Generator, n: int) -> np.ndarray:
    m = np.zeros((n, n))
    m[np.arange(n), rng.permutation(n)] = rng.choice((-1.0, 1.0), size=n)
    return m


def augment_batch(
    x: np.ndarray, samples: Sequence[SequenceSample], size: int, rng: np.random.Generator, mode: str = "rotate"
) -> tuple[np.ndarray, list[TargetSet]]:
    """Mix the feature channels and reverse time with probability 1/2, per sequence.

    ``mode="rotate"`` applies a random orthogonal map, ``"flip"`` a signed
    permutation.  Both leave the generator's distribution (nearly) unchanged,
    so they enlarge the training set without changing the task.
    """
    mix = random_rotation if mode == "rotate" else random_signed_permutation
    out = np.empty_like(x)
    targets = []
    for i, s in enumerate(samples):
        xi = x[i] @ mix(rng, x.shape[2])
        cycles = list(s.cycles)
        if rng.random() < 0.5:
            xi = xi[::-1]
            cycles = [Interval(1.0 - c.midpoint, c.duration) for c in reversed(cycles)]
        out[i] = xi
        targets.append(TargetSet.from_intervals(cycles, size))
    return out, targets


def _better(obo: float, mae: float, best: tuple[float, float] | None) -> bool:
    # ties on both metrics go to the later epoch
    if best is None:
        return True
    return (obo, -mae) >= (best[0], -best[1])


def train_model(
    model_cfg: ModelConfig,
    weights: LossWeights,
    optim: OptimConfig,
    train_set: Sequence[SequenceSample],
    val_set: Sequence[SequenceSample] = (),
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from a seeded initialisation; the returned model holds the best-validation parameters.

    Without a validation split, selection falls back to the training set.
    """
    for s in train_set:
        if s.features.shape != (model_cfg.T, model_cfg.C_in):
            raise ConfigError("C_in", f"sample of shape {s.features.shape} does not fit T={model_cfg.T}, C_in={model_cfg.C_in}")
        if s.true_count > model_cfg.Q:
            raise ConfigError("Q", f"a sample has {s.true_count} cycles but only Q={model_cfg.Q} queries")
    model = QueryModel(model_cfg, seed=optim.seed)
    opt = AdamW(model.parameters(), lr=optim.lr, betas=optim.betas, weight_decay=optim.weight_decay, grad_clip=optim.grad_clip)
    rng = np.random.default_rng(optim.seed + 1)
    aug_rng = np.random.default_rng(optim.seed + 2)
    feats = stack_features(train_set) if len(train_set) else None
    targets = targets_for(train_set, model_cfg.Q)
    best_state = model.state()
    best: tuple[float, float] | None = None
    best_epoch = 0
    rows: list[dict] = []
    select_on = val_set if len(val_set) else train_set
    total_steps = optim.epochs * -(-len(train_set) // optim.batch_size)

    for epoch in range(1, optim.epochs + 1):
        order = rng.permutation(len(train_set))
        sums: dict[str, float] = {}
        batches = 0
        for start in range(0, len(order), optim.batch_size):
            idx = order[start : start + optim.batch_size]
            x, batch_targets = feats[idx], [targets[i] for i in idx]
            if optim.augment != "none":
                x, batch_targets = augment_batch(x, [train_set[i] for i in idx], model_cfg.Q, aug_rng, optim.augment)
            out = model(x)
            report = total_loss(batch_targets, out, weights, model_cfg.alpha, use_icl=model_cfg.use_icl)
            opt.zero_grad()
            report.total.backward()
            opt.lr = optim.lr_at(opt.step_count + 1, total_steps)
            opt.step()
            for k, v in report.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        row = {"epoch": epoch, **{k: v / max(batches, 1) for k, v in sums.items()}}
        if len(select_on):
            rep = evaluate(model, select_on)
            row["val_mae"], row["val_obo"] = rep.mae, rep.obo
            if _better(rep.obo, rep.mae, best):
                best, best_epoch, best_state = (rep.obo, rep.mae), epoch, model.state()
        rows.append(row)
        log.debug("epoch %d %s", epoch, row)
        if on_epoch is not None:
            on_epoch(row)

    model.load_state(best_state)
    return TrainResult(model, best_epoch, best, rows, opt.step_count)
