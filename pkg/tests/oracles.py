"""Independent brute-force reference implementations used by the tests."""

from itertools import combinations

import numpy as np


def lcs_bruteforce(a, b) -> int:
    """Longest subsequence of ``a`` (by exhaustive subset search) that is also one of ``b``."""
    def is_subseq(s, t):
        it = iter(t)
        return all(x in it for x in s)

    for k in range(min(len(a), len(b)), 0, -1):
        if any(is_subseq(c, b) for c in combinations(a, k)):
            return k
    return 0


def warping_paths(n: int, m: int):
    """Every monotone, boundary-aligned alignment of an n-trace with an m-trace."""
    def walk(i, j, acc):
        acc.append((i, j))
        if i == n - 1 and j == m - 1:
            yield list(acc)
        else:
            if i + 1 < n:
                yield from walk(i + 1, j, acc)
            if j + 1 < m:
                yield from walk(i, j + 1, acc)
            if i + 1 < n and j + 1 < m:
                yield from walk(i + 1, j + 1, acc)
        acc.pop()

    yield from walk(0, 0, [])


def dtw_bruteforce(a_xy, b_xy) -> float:
    """Minimum total cost over every warping path, enumerated without memoisation."""
    a_xy, b_xy = np.asarray(a_xy, float), np.asarray(b_xy, float)
    n, m = len(a_xy), len(b_xy)
    cost = np.sqrt(((a_xy[:, None, :] - b_xy[None, :, :]) ** 2).sum(-1)).tolist()
    best = [float("inf")]

    def walk(i, j, acc):
        acc += cost[i][j]
        if i == n - 1 and j == m - 1:
            if acc < best[0]:
                best[0] = acc
            return
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return best[0]


def interval_score(y_hat, lo, hi, y, rho):
    """Per-sample interval score plus absolute error, written out longhand."""
    s = (hi - lo)
    if y > hi:
        s += 2.0 / rho * (y - hi)
    if y < lo:
        s += 2.0 / rho * (lo - y)
    return s + abs(y - y_hat)
