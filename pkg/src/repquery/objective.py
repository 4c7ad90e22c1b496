"""Training objective: Hungarian set loss, inter-query contrastive loss, auxiliary supervision."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .geometry import PositionLossWeights, position_loss_tensor
from .matcher import Assignment, match
from .model import HeadOutput, ModelOutput
from .sets import REPETITIVE, TargetSet

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    hungarian: float = 1.0
    contrastive: float = 1.0
    temperature: float = 0.1
    position: PositionLossWeights = field(default_factory=PositionLossWeights)
    normalize_features: bool = True

    def __post_init__(self) -> None:
        for name in ("hungarian", "contrastive", "temperature"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"{name}={v} must be finite and >= 0")
        if self.temperature <= 0:
            raise ContractError("temperature must be > 0")


@dataclass
class LossReport:
    total: Tensor
    hungarian: float
    contrastive: float
    per_layer_aux: list[float]
    matched_pairs: int

    def as_dict(self) -> dict[str, float]:
        row = {"total": self.total.item(), "hungarian": self.hungarian, "contrastive": self.contrastive}
        for i, v in enumerate(self.per_layer_aux):
            row[f"aux{i}"] = v
        return row


def _aligned_targets(targets: Sequence[TargetSet], assignments: Sequence[Assignment], n: int):
    """Scatter each target onto the prediction slot it was matched to: arrays of shape (B, n)."""
    b = len(targets)
    cls = np.zeros((b, n))
    gm = np.full((b, n), 0.5)
    gd = np.ones((b, n))
    for i, (t, a) in enumerate(zip(targets, assignments)):
        if len(t) != n or len(a.permutation) != n:
            raise ContractError(f"target set of size {len(t)} cannot supervise {n} predictions")
        cls[i, a.permutation] = t.classes
        gm[i, a.permutation] = t.midpoints
        gd[i, a.permutation] = t.durations
    return cls, gm, gd


def hungarian_loss(
    targets: Sequence[TargetSet],
    preds: HeadOutput,
    assignments: Sequence[Assignment],
    w: PositionLossWeights,
) -> Tensor:
    """Batch mean of the per-sequence matched loss.

    Per sequence: sum over slots of the class negative log-likelihood
    (-log p for repetitive targets, -log(1 - p) for padding) plus the
    position loss on repetitive slots.
    """
    b, n = preds.probs.shape
    if len(targets) != b or len(assignments) != b:
        raise ContractError("one target set and one assignment per sequence required")
    cls, gm, gd = _aligned_targets(targets, assignments, n)
    p = ad.clip(preds.probs, PROB_EPS, 1.0 - PROB_EPS)
    nll = -(Tensor(cls) * ad.log(p) + Tensor(1.0 - cls) * ad.log(1.0 - p))
    loss = nll
    if cls.any():
        loss = loss + Tensor(cls) * position_loss_tensor(preds.midpoints, preds.durations, gm, gd, w)
    return ad.scale(loss.sum(), 1.0 / b)


def icl_partition(probs, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices classified repetitive (p > alpha) and the rest."""
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"alpha={alpha} must lie in (0, 1)")
    probs = np.asarray(probs)
    return np.flatnonzero(probs > alpha), np.flatnonzero(probs <= alpha)


def batch_icl_loss(features: Tensor, positive: np.ndarray, tau: float, normalize: bool = True) -> Tensor:
    """Contrastive loss over (B, Q, C) query features given a (B, Q) boolean positive mask.

    Returns the batch mean of the per-sequence sums.
    """
    if tau <= 0:
        raise ContractError("temperature must be > 0")
    b, q, _ = features.shape
    positive = np.asarray(positive, dtype=bool)
    if positive.shape != (b, q):
        raise ContractError(f"positive mask shape {positive.shape} != {(b, q)}")
    d = ad.l2_normalize(features) if normalize else features
    sim = ad.scale(ad.matmul(d, d.transpose(0, 2, 1)), 1.0 / tau)
    e = ad.exp(sim)
    not_self = ~np.eye(q, dtype=bool)[None]
    pair_pos = (positive[:, None, :] & not_self).astype(np.float64)
    pair_neg = np.broadcast_to(~positive[:, None, :], (b, q, q)).astype(np.float64)
    l_pos = (e * Tensor(pair_pos)).sum(axis=2)
    l_neg = (e * Tensor(pair_neg)).sum(axis=2)
    valid = (positive & (positive.sum(axis=1, keepdims=True) >= 2)).astype(np.float64)
    l_pos = l_pos + Tensor(1.0 - valid)
    term = (ad.log(l_pos + l_neg) - ad.log(l_pos)) * Tensor(valid)
    return ad.scale(term.sum(), 1.0 / b)


def icl_loss(features: Tensor, pos_idx, neg_idx, tau: float, normalize: bool = True) -> Tensor:
    """Contrastive loss for one sequence's (Q, C) features and its positive/negative index sets."""
    q = features.shape[0]
    pos_idx = np.asarray(pos_idx, dtype=np.int64)
    neg_idx = np.asarray(neg_idx, dtype=np.int64)
    if len(np.intersect1d(pos_idx, neg_idx)) or len(pos_idx) + len(neg_idx) != q:
        raise ContractError("positive and negative sets must partition the queries")
    mask = np.zeros((1, q), dtype=bool)
    mask[0, pos_idx] = True
    return batch_icl_loss(features.reshape(1, *features.shape), mask, tau, normalize)


def match_batch(targets: Sequence[TargetSet], preds: HeadOutput, w: PositionLossWeights) -> list[Assignment]:
    return [match(t, p, w) for t, p in zip(targets, preds.to_sets())]


def total_loss(
    targets: Sequence[TargetSet],
    output: ModelOutput,
    weights: LossWeights,
    alpha: float,
    use_icl: bool = True,
) -> LossReport:
    """Weighted sum of the final Hungarian loss, every auxiliary Hungarian loss and the ICL term.

    ``targets`` are padded to Q; encoder-side predictions cover all T
    tokens, so their targets are re-padded to T.  Each prediction set gets
    its own matching.
    """
    w = weights.position
    final_assign = match_batch(targets, output.final, w)
    hung = hungarian_loss(targets, output.final, final_assign, w)
    aux_terms = []
    for preds in output.decoder_aux:
        aux_terms.append(hungarian_loss(targets, preds, match_batch(targets, preds, w), w))
    n_enc = output.encoder_aux.probs.shape[1]
    enc_targets = [TargetSet.from_intervals(t.intervals(), n_enc) for t in targets]
    aux_terms.append(hungarian_loss(enc_targets, output.encoder_aux, match_batch(enc_targets, output.encoder_aux, w), w))

    set_loss = hung
    for a in aux_terms:
        set_loss = set_loss + a
    total = ad.scale(set_loss, weights.hungarian)
    contrastive = 0.0
    if use_icl:
        positive = output.final.probs.data > alpha
        ctrs = batch_icl_loss(output.final_act, positive, weights.temperature, weights.normalize_features)
        contrastive = ctrs.item()
        if weights.contrastive:
            total = total + ad.scale(ctrs, weights.contrastive)
    matched = int(sum(int(np.sum(t.classes == REPETITIVE)) for t in targets))
    return LossReport(total, hung.item(), contrastive, [a.item() for a in aux_terms], matched)
