"""Bipartite matching between padded ground truth and predicted cycles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .geometry import Interval, PositionLossWeights, position_loss, position_loss_array
from .sets import REPETITIVE, PredictionSet, TargetSet

# cost of pairing a no-action target with any prediction
NO_ACTION_COST = 0.0


@dataclass(frozen=True)
class Assignment:
    """``permutation[i]`` is the prediction index matched to target ``i``."""

    permutation: np.ndarray
    total_cost: float

    def pairs(self) -> list[tuple[int, int]]:
        return [(i, int(j)) for i, j in enumerate(self.permutation)]


def matching_cost(gt_class: int, gt_loc: Interval | None, pred_prob: float, pred_loc: Interval, w: PositionLossWeights) -> float:
    if not 0.0 <= pred_prob <= 1.0:
        raise ContractError(f"probability {pred_prob} outside [0, 1]")
    if gt_class != REPETITIVE:
        return NO_ACTION_COST
    return -pred_prob + position_loss(gt_loc, pred_loc, w)


def build_cost_matrix(targets: TargetSet, preds: PredictionSet, w: PositionLossWeights) -> np.ndarray:
    """Entry (i, j) is the cost of pairing target i with prediction j."""
    if len(targets) != len(preds):
        raise ContractError(f"target set has {len(targets)} entries, predictions {len(preds)}")
    pos = position_loss_array(
        preds.midpoints[None, :], preds.durations[None, :],
        targets.midpoints[:, None], targets.durations[:, None], w,
    )
    cost = np.where((targets.classes == REPETITIVE)[:, None], pos - preds.probs[None, :], NO_ACTION_COST)
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix has non-finite entries")
    return cost


def assign_rows(cost: np.ndarray) -> np.ndarray:
    """Min-cost assignment of every row of an n x m matrix (n <= m) to distinct columns.

    Shortest augmenting path with dual potentials, O(n^2 m).  Among equally
    short paths the lowest column index is taken, so results are deterministic.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ContractError(f"cannot assign {n} rows to {m} columns")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: 1-based row holding column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row


def hungarian(cost: np.ndarray) -> Assignment:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ContractError(f"hungarian needs a square matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("hungarian needs finite costs")
    n = cost.shape[0]
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    perm = assign_rows(cost)
    return Assignment(perm, float(cost[np.arange(n), perm].sum()))


def match(targets: TargetSet, preds: PredictionSet, w: PositionLossWeights) -> Assignment:
    """Optimal one-to-one matching of the padded target set to the predictions.

    No-action rows cost the same against every prediction, so only the
    repetitive rows are solved; the padding rows take the remaining
    predictions in increasing index order.
    """
    cost = build_cost_matrix(targets, preds, w)
    n = len(targets)
    rows = targets.repetitive_rows
    perm = np.full(n, -1, dtype=np.int64)
    if len(rows):
        perm[rows] = assign_rows(cost[rows])
    taken = np.zeros(n, dtype=bool)
    taken[perm[rows]] = True
    perm[perm < 0] = np.flatnonzero(~taken)
    return Assignment(perm, float(cost[np.arange(n), perm].sum()))
