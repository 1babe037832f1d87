"""Point, interval and path metrics, and the JSON run report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ContractError
from .validation import as_float_vector, check_paired


def compute_point_metrics(preds, truths) -> tuple[float, float, float]:
    """``(rmse, mae, mape)``; MAPE in percent."""
    p = as_float_vector(preds, "predictions")
    y = as_float_vector(truths, "truths")
    check_paired(p, y, "predictions and truths")
    if np.any(y == 0):
        raise ContractError("MAPE is undefined for a zero travel time")
    err = p - y
    return (float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err))),
            float(100.0 * np.mean(np.abs(err) / np.abs(y))))


def compute_interval_metrics(intervals, truths) -> tuple[float, float]:
    """``(picp, iw)``: percent of truths inside the closed intervals, mean width."""
    iv = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
    y = as_float_vector(truths, "truths")
    check_paired(iv, y, "intervals and truths")
    if np.any(iv[:, 1] < iv[:, 0]):
        raise ContractError("interval with upper bound below lower bound")
    inside = (y >= iv[:, 0]) & (y <= iv[:, 1])
    return float(100.0 * inside.mean()), float(np.mean(iv[:, 1] - iv[:, 0]))


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    mape: float
    picp: float
    iw: float
    lcs_mean: float
    lcs_norm_mean: float
    dtw_mean: float
    picp_uncalibrated: float
    iw_uncalibrated: float
    lambda_hat: float
    split_counts: dict = field(default_factory=dict)
    config_digest: str = ""
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.picp <= 100.0 or self.iw < 0 or self.mape < 0:
            raise ContractError("report metrics out of range")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))
