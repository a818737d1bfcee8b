"""Bipartite set matching between query predictions and ground-truth boxes.

The matching cost combines a focal-loss classification term with L1 and
GIoU box terms, all on normalized center-form boxes. The optimal one-to-one
assignment is found with a shortest-augmenting-path Hungarian solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from lndet.errors import NothingToMatch, ValidationError
from lndet.geometry import NormBox, norm_giou

EPS = 1e-8


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"focal alpha must lie in (0, 1), got {self.alpha}")
        if not (math.isfinite(self.gamma) and self.gamma >= 0.0):
            raise ValidationError(f"focal gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class MatchCostWeights:
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0

    def __post_init__(self) -> None:
        ws = (self.lambda_cls, self.lambda_l1, self.lambda_giou)
        if not all(math.isfinite(w) and w >= 0.0 for w in ws):
            raise ValidationError(f"cost weights must be finite and non-negative, got {ws}")
        if not any(w > 0.0 for w in ws):
            raise ValidationError("at least one cost weight must be positive")


@dataclass(frozen=True)
class QueryPrediction:
    box: NormBox
    prob: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.prob) and 0.0 <= self.prob <= 1.0):
            raise ValidationError(f"query probability must lie in [0, 1], got {self.prob}")


@dataclass(frozen=True)
class Assignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    total_cost: float = 0.0


def focal_cls_cost(prob: float, fp: FocalParams = FocalParams()) -> float:
    """Positive-minus-negative focal cost for labelling a query as a node.

    Strictly decreasing in ``prob``; probabilities are clamped to
    ``[EPS, 1 - EPS]`` before taking logs.
    """
    if not math.isfinite(prob):
        raise ValidationError(f"probability must be finite, got {prob}")
    p = min(max(prob, EPS), 1.0 - EPS)
    pos = fp.alpha * (1.0 - p) ** fp.gamma * -math.log(p)
    neg = (1.0 - fp.alpha) * p**fp.gamma * -math.log(1.0 - p)
    return pos - neg


def _l1(a: NormBox, b: NormBox) -> float:
    return abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h)


def pairwise_cost(
    preds: Sequence[QueryPrediction],
    gts: Sequence[NormBox],
    w: MatchCostWeights = MatchCostWeights(),
    fp: FocalParams = FocalParams(),
) -> np.ndarray:
    """Cost matrix with one row per prediction and one column per ground truth."""
    if not gts:
        raise NothingToMatch("no ground-truth boxes to match against")
    cost = np.empty((len(preds), len(gts)), dtype=np.float64)
    for i, pred in enumerate(preds):
        cls = w.lambda_cls * focal_cls_cost(pred.prob, fp)
        for j, gt in enumerate(gts):
            cost[i, j] = (
                cls
                + w.lambda_l1 * _l1(pred.box, gt)
                + w.lambda_giou * (1.0 - norm_giou(pred.box, gt))
            )
    return cost


def _hungarian(cost: np.ndarray) -> list[int]:
    """Min-cost assignment for an n x m matrix with n <= m.

    Returns the column chosen for each row. Uses potentials and Dijkstra-like
    shortest augmenting paths, O(n^2 m). Deterministic: ties resolve to the
    lowest column index.
    """
    n, m = cost.shape
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    # owner[j] is the 1-based row assigned to column j; column 0 is the virtual root
    owner = [0] * (m + 1)
    way = [0] * (m + 1)
    a = cost.tolist()
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = owner[j0]
            row = a[i0 - 1]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = [0] * n
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row


def solve_assignment(cost: np.ndarray | Sequence[Sequence[float]]) -> Assignment:
    """Minimum-total-cost one-to-one assignment covering min(rows, cols) pairs.

    Rectangular matrices are handled by solving on the transpose when there
    are more rows than columns. Pairs come back sorted by row index.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
        raise ValidationError(f"cost matrix must be 2-D and non-empty, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValidationError("cost matrix contains non-finite entries")

    if c.shape[0] <= c.shape[1]:
        pairs = [(r, col) for r, col in enumerate(_hungarian(c))]
    else:
        pairs = sorted((r, col) for col, r in enumerate(_hungarian(c.T)))
    total = 0.0
    for r, col in pairs:
        total += float(c[r, col])
    return Assignment(pairs=pairs, total_cost=total)


def match(
    preds: Sequence[QueryPrediction],
    gts: Sequence[NormBox],
    w: MatchCostWeights = MatchCostWeights(),
    fp: FocalParams = FocalParams(),
) -> Assignment:
    if not gts:
        raise NothingToMatch("no ground-truth boxes to match against")
    if not preds:
        return Assignment()
    return solve_assignment(pairwise_cost(preds, gts, w, fp))
