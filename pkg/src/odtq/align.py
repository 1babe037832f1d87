"""Path alignment metrics and the alignment reward."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ContractError
from .roadnet import RoadNetwork


@dataclass(frozen=True)
class AlignmentScores:
    lcs_len: int
    lcs_norm: float
    dtw_norm: float


def lcs(a: Sequence[int], b: Sequence[int]) -> int:
    """Length of the longest common subsequence of two node sequences."""
    if len(a) == 0 or len(b) == 0:
        raise ContractError("lcs of an empty path")
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def dtw_cost(a_xy, b_xy) -> float:
    """Total cost of the optimal boundary-aligned warping between two point traces."""
    a_xy = np.asarray(a_xy, dtype=np.float64)
    b_xy = np.asarray(b_xy, dtype=np.float64)
    if len(a_xy) == 0 or len(b_xy) == 0:
        raise ContractError("dtw of an empty trace")
    diff = a_xy[:, None, :] - b_xy[None, :, :]
    cost = np.sqrt((diff * diff).sum(axis=-1)).tolist()
    n, m = len(cost), len(cost[0])
    inf = float("inf")
    prev = [inf] * (m + 1)
    prev[0] = 0.0
    for i in range(n):
        row = cost[i]
        cur = [inf] * (m + 1)
        for j in range(m):
            best = prev[j]
            if prev[j + 1] < best:
                best = prev[j + 1]
            if cur[j] < best:
                best = cur[j]
            cur[j + 1] = row[j] + best
        prev = cur
        prev[0] = inf
    return prev[m]


def dtw(a: Sequence[int], b: Sequence[int], net: RoadNetwork) -> float:
    """DTW cost in normalized coordinates divided by ``len(b)``.

    ``b`` is the reference (ground-truth) path.
    """
    if len(a) == 0 or len(b) == 0:
        raise ContractError("dtw of an empty path")
    for v in (*a, *b):
        if not 0 <= int(v) < net.n_nodes:
            raise IndexError(f"node {v} not in network")
    xy = net.norm_coords
    return dtw_cost(xy[np.asarray(a)], xy[np.asarray(b)]) / len(b)


def alignment_scores(pred: Sequence[int], truth: Sequence[int],
                     net: RoadNetwork) -> AlignmentScores:
    n = lcs(pred, truth)
    return AlignmentScores(n, n / len(truth), dtw(pred, truth, net))


def reward(pred: Sequence[int], truth: Sequence[int], net: RoadNetwork,
           omega: float = 1.0, beta: float = 1.0) -> float:
    """``omega * lcs/|truth| - beta * dtw``; equals ``omega`` for an exact match."""
    s = alignment_scores(pred, truth, net)
    return omega * s.lcs_norm - beta * s.dtw_norm
