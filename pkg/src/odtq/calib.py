"""Distribution-free interval scaling with a Hoeffding upper-confidence bound.

A single factor ``lam`` stretches every interval to
``[y_hat - lam * sigma_l, y_hat + lam * sigma_u]``. The miscoverage rate on a
held-out calibration set, inflated by the Hoeffding slack, is an upper
confidence bound on the true miscoverage; the fitted factor is the smallest
grid value from which that bound stays below ``alpha``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ContractError, InfeasibleError
from .validation import as_float_vector, check_paired, check_unit_interval

DEFAULT_GRID_MAX = 4.0
DEFAULT_GRID_STEP = 0.01
LAMBDA_CAP = 1e6


@dataclass
class CalibrationResult:
    lambda_hat: float
    alpha: float
    delta: float
    M: int
    risk_curve: list[tuple[float, float, float]] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        return json.dumps({"lambda_hat": self.lambda_hat, "alpha": self.alpha,
                           "delta": self.delta, "M": self.M}, indent=2)

    def save(self, path, curve_path=None) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")
        if curve_path is not None:
            with open(curve_path, "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["lambda", "empirical_loss", "ucb"])
                w.writerows([repr(a), repr(b), repr(c)] for a, b, c in self.risk_curve)

    @classmethod
    def load(cls, path) -> "CalibrationResult":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(float(d["lambda_hat"]), float(d["alpha"]), float(d["delta"]), int(d["M"]))


def _components(estimates):
    """``(y_hat, sigma_l, sigma_u)`` arrays from estimates or an ``(n, 3)`` array."""
    if isinstance(estimates, np.ndarray):
        arr = estimates.astype(np.float64).reshape(-1, 3)
    else:
        arr = np.array([[e.y_hat, e.sigma_l, e.sigma_u] for e in estimates],
                       dtype=np.float64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def _losses(y_hat, sl, su, y, lams) -> np.ndarray:
    lams = np.asarray(lams, dtype=np.float64)[:, None]
    inside = (y >= y_hat - lams * sl) & (y <= y_hat + lams * su)
    return 1.0 - inside.mean(axis=1)


def coverage_loss(estimates, truths, lam: float) -> float:
    """Fraction of truths outside the closed intervals scaled by ``lam``."""
    y_hat, sl, su = _components(estimates)
    y = as_float_vector(truths, "truths")
    check_paired(y_hat, y, "estimates and truths")
    return float(_losses(y_hat, sl, su, y, [lam])[0])


def hoeffding_slack(M: int, delta: float) -> float:
    return math.sqrt(math.log(1.0 / delta) / (2.0 * M))


def hoeffding_ucb(emp_loss: float, M: int, delta: float) -> float:
    """``emp_loss + sqrt(ln(1/delta) / (2M))``."""
    if M < 1:
        raise ContractError(f"M must be >= 1, got {M}")
    check_unit_interval(delta, "delta")
    if not 0.0 <= emp_loss <= 1.0:
        raise ContractError(f"empirical loss must lie in [0, 1], got {emp_loss}")
    return emp_loss + hoeffding_slack(M, delta)


def default_grid(grid_max: float = DEFAULT_GRID_MAX, step: float = DEFAULT_GRID_STEP):
    n = int(round(grid_max / step))
    return np.arange(n + 1) * step


def fit_lambda(estimates, truths, alpha: float = 0.1, delta: float = 0.1, grid=None,
               cap: float = LAMBDA_CAP) -> CalibrationResult:
    """Smallest grid ``lam`` whose Hoeffding bound, and every larger one's, is <= ``alpha``.

    The grid is extended by doubling its maximum until some point covers
    every calibration truth or ``cap`` is reached.
    """
    y_hat, sl, su = _components(estimates)
    y = as_float_vector(truths, "truths")
    M = check_paired(y_hat, y, "estimates and truths")
    check_unit_interval(alpha, "alpha")
    check_unit_interval(delta, "delta")
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size == 0 or grid[0] < 0 or np.any(np.diff(grid) <= 0):
        raise ContractError("grid must be non-empty, non-negative and strictly increasing")
    slack = hoeffding_slack(M, delta)
    if alpha <= slack:
        raise InfeasibleError(
            f"alpha={alpha} is unreachable with M={M}, delta={delta}: "
            f"the Hoeffding slack alone is {slack:.6g}; need alpha > {slack:.6g}",
            min_alpha=slack)

    lams = [grid]
    losses = [_losses(y_hat, sl, su, y, grid)]
    n_seg = max(grid.size - 1, 1)
    while losses[-1][-1] > 0 and lams[-1][-1] < cap:
        top = lams[-1][-1]
        new_top = min(2.0 * top if top > 0 else 1.0, cap)
        ext = np.linspace(top, new_top, n_seg + 1)[1:]
        lams.append(ext)
        losses.append(_losses(y_hat, sl, su, y, ext))
    lam = np.concatenate(lams)
    emp = np.concatenate(losses)
    ucb = emp + slack
    ok = ucb <= alpha
    if not ok[-1]:
        raise InfeasibleError(
            f"no lambda up to {lam[-1]:.6g} brings the bound below alpha={alpha} "
            f"(best {ucb.min():.6g}); intervals with zero width cannot be stretched",
            min_alpha=float(ucb.min()))
    # first index from which every remaining grid point satisfies the bound
    bad = np.flatnonzero(~ok)
    i = int(bad[-1]) + 1 if bad.size else 0
    curve = [(float(a), float(b), float(c)) for a, b, c in zip(lam, emp, ucb)]
    return CalibrationResult(float(lam[i]), float(alpha), float(delta), int(M), curve)


def apply_calibration(estimate, result: CalibrationResult) -> tuple[float, float]:
    lam = result.lambda_hat
    return (estimate.y_hat - lam * estimate.sigma_l, estimate.y_hat + lam * estimate.sigma_u)


class HoeffdingCalibrator(BaseEstimator, TransformerMixin):
    """Fit a global interval scale on calibration data and apply it.

    ``fit`` takes interval estimates (objects with ``y_hat``, ``sigma_l``,
    ``sigma_u`` or an ``(n, 3)`` array) and true travel times; ``transform``
    returns an ``(n, 2)`` array of calibrated ``[lower, upper]`` bounds.
    """

    def __init__(self, alpha=0.1, delta=0.1, grid_max=DEFAULT_GRID_MAX,
                 grid_step=DEFAULT_GRID_STEP, lambda_cap=LAMBDA_CAP):
        self.alpha = alpha
        self.delta = delta
        self.grid_max = grid_max
        self.grid_step = grid_step
        self.lambda_cap = lambda_cap

    def fit(self, X, y):
        self.result_ = fit_lambda(X, y, self.alpha, self.delta,
                                  default_grid(self.grid_max, self.grid_step), self.lambda_cap)
        self.lambda_hat_ = self.result_.lambda_hat
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "result_")
        y_hat, sl, su = _components(X)
        lam = self.lambda_hat_
        return np.stack([y_hat - lam * sl, y_hat + lam * su], axis=1)
