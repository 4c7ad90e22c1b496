"""Counting metrics, period-split reports, threshold sweeps and complexity accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .model import ModelConfig, QueryModel
from .synth import PERIOD_CLASSES, SequenceSample

Pair = tuple[int, int]  # (predicted count, ground-truth count)


def obo(pairs: Sequence[Pair]) -> float:
    """Fraction of sequences whose predicted count is within one of the truth."""
    if len(pairs) == 0:
        raise ContractError("obo needs at least one sequence")
    return float(np.mean([abs(int(n) - int(g)) <= 1 for n, g in pairs]))


def mae(pairs: Sequence[Pair], normalize: str = "gt") -> float:
    """Mean of |N - N_gt| divided by the ground-truth count (``normalize="pred"`` divides by N)."""
    if len(pairs) == 0:
        raise ContractError("mae needs at least one sequence")
    if normalize not in ("gt", "pred"):
        raise ContractError(f"normalize must be 'gt' or 'pred', got {normalize!r}")
    terms = []
    for n, g in pairs:
        denom = g if normalize == "gt" else n
        if denom == 0:
            raise ContractError(f"zero {normalize} count cannot normalise the error")
        terms.append(abs(int(n) - int(g)) / denom)
    return float(np.mean(terms))


@dataclass
class MetricReport:
    mae: float
    obo: float
    M: int
    splits: dict[str, tuple[float, float, int]] = field(default_factory=dict)
    pairs: list[Pair] = field(default_factory=list)

    def get(self, metric: str, split: str):
        """Split value or None when the split has no sequences."""
        if split == "overall":
            return getattr(self, metric)
        entry = self.splits.get(split)
        if entry is None:
            return None
        return entry[0] if metric == "mae" else entry[1]

    def rows(self) -> list[tuple[str, str, float, int]]:
        out = [("overall", "mae", self.mae, self.M), ("overall", "obo", self.obo, self.M)]
        for name in PERIOD_CLASSES:
            if name in self.splits:
                m, o, k = self.splits[name]
                out += [(name, "mae", m, k), (name, "obo", o, k)]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "metric", "value", "M"])
        for split, metric, value, m in self.rows():
            w.writerow([split, metric, f"{value:.6f}", m])
        return buf.getvalue()


def split_metrics(pairs: Sequence[Pair], labels: Sequence[str], normalize: str = "gt") -> MetricReport:
    if len(pairs) != len(labels):
        raise ContractError("one period label per sequence required")
    splits = {}
    for name in PERIOD_CLASSES:
        sub = [p for p, lab in zip(pairs, labels) if lab == name]
        if sub:
            splits[name] = (mae(sub, normalize), obo(sub), len(sub))
    return MetricReport(mae(pairs, normalize), obo(pairs), len(pairs), splits, list(pairs))


def counts_at(probs: np.ndarray, alpha: float) -> np.ndarray:
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"alpha={alpha} must lie in (0, 1)")
    return (np.asarray(probs) > alpha).sum(axis=1)


def evaluate_probs(probs: np.ndarray, samples: Sequence[SequenceSample], alpha: float, normalize: str = "gt") -> MetricReport:
    counts = counts_at(probs, alpha)
    pairs = [(int(n), s.true_count) for n, s in zip(counts, samples)]
    return split_metrics(pairs, [s.period_class for s in samples], normalize)


def stack_features(samples: Sequence[SequenceSample]) -> np.ndarray:
    return np.stack([s.features for s in samples]).astype(np.float64)


def evaluate(model: QueryModel, samples: Sequence[SequenceSample], alpha: float | None = None, normalize: str = "gt") -> MetricReport:
    alpha = model.config.alpha if alpha is None else alpha
    return evaluate_probs(model.predict_probs(stack_features(samples)), samples, alpha, normalize)


def sweep_probs(probs: np.ndarray, samples: Sequence[SequenceSample], alphas: Iterable[float]) -> list[tuple[float, float, float]]:
    table = []
    for a in alphas:
        rep = evaluate_probs(probs, samples, a)
        table.append((float(a), rep.mae, rep.obo))
    return table


def threshold_sweep(model: QueryModel, samples: Sequence[SequenceSample], alphas: Iterable[float]) -> list[tuple[float, float, float]]:
    """(alpha, mae, obo) per threshold; the forward pass runs once."""
    return sweep_probs(model.predict_probs(stack_features(samples)), samples, alphas)


def sweep_csv(table) -> str:
    lines = ["alpha,mae,obo"]
    lines += [f"{a:.4f},{m:.6f},{o:.6f}" for a, m, o in table]
    return "\n".join(lines) + "\n"


# -- complexity -------------------------------------------------------------------------

# multiply-accumulates spent per similarity-matrix entry after it is formed
BASELINE_ENTRY_COST = 32


@dataclass(frozen=True)
class ComplexityRecord:
    T: int
    macs_query_model: int
    macs_similarity_baseline: int


def query_model_macs(cfg: ModelConfig) -> int:
    """Analytic multiply-accumulate count of one forward pass on a single sequence."""
    t, c, q, f = cfg.T, cfg.C, cfg.Q, cfg.C * cfg.ffn_mult
    span = 2 * cfg.window + 1
    head = c * c * (cfg.head_layers - 1) + c * 2  # one MLP head, per token
    macs = t * cfg.C_in * c
    macs += cfg.L_enc * (4 * t * c * c + 2 * t * span * c + 2 * t * c * f)
    macs += 2 * t * c * c
    macs += 2 * t * head
    per_dec = 6 * q * c * c + 3 * q * q * c  # self-attention
    per_dec += 3 * q * c * c + 3 * t * c * c + 3 * q * t * c  # cross-attention
    per_dec += 2 * 2 * q * c * f  # two feed-forward streams
    per_dec += 2 * q * head  # shared heads after the layer
    return macs + cfg.L_dec * per_dec


def similarity_baseline_macs(t: int, c: int, entry_cost: int = BASELINE_ENTRY_COST) -> int:
    return t * t * c + t * t * entry_cost


def similarity_baseline_forward(features: np.ndarray, entry_cost: int = BASELINE_ENTRY_COST, seed: int = 0) -> Tensor:
    """Reference quadratic pipeline: T x T frame similarity, then a per-entry embedding."""
    x = Tensor(features)
    t = x.shape[0]
    sim = ad.matmul(x, x.T)
    proj = Tensor(np.random.default_rng(seed).normal(size=(1, entry_cost)))
    return ad.matmul(sim.reshape(t * t, 1), proj)


def count_macs(cfg: ModelConfig, t: int | None = None) -> ComplexityRecord:
    if t is not None:
        if t < 1:
            raise ContractError(f"T must be positive, got {t}")
        cfg = _with_length(cfg, t)
    return ComplexityRecord(cfg.T, query_model_macs(cfg), similarity_baseline_macs(cfg.T, cfg.C))


def _with_length(cfg: ModelConfig, t: int) -> ModelConfig:
    from dataclasses import replace

    return replace(cfg, T=int(t), Q=min(cfg.Q, int(t)))


def instrumented_macs(cfg: ModelConfig, seed: int = 0) -> tuple[int, int]:
    """Measured (model, baseline) MACs from actually running both pipelines once."""
    rng = np.random.default_rng(seed)
    model = QueryModel(cfg, seed=seed)
    x = rng.normal(size=(1, cfg.T, cfg.C_in))
    with ad.no_grad(), ad.count_macs() as m:
        model(x)
    with ad.no_grad(), ad.count_macs() as b:
        similarity_baseline_forward(rng.normal(size=(cfg.T, cfg.C)))
    return m.macs, b.macs


def complexity_csv(records: Sequence[ComplexityRecord]) -> str:
    lines = ["T,model_macs,baseline_macs"]
    lines += [f"{r.T},{r.macs_query_model},{r.macs_similarity_baseline}" for r in records]
    return "\n".join(lines) + "\n"


def affine_r2(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Coefficient of determination of the least-squares line through (xs, ys)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    coef = np.polyfit(xs, ys, 1)
    resid = ys - np.polyval(coef, xs)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    return 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
