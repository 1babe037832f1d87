"""File-backed pipeline stages.

Each stage reads its inputs from, and writes its outputs to, one output
directory, so stages can be rerun independently::

    out/
      dataset/            network.txt trips.txt queries.txt splits.txt
      policy.ckpt         policy_log.csv
      uq.ckpt             uq_log.csv
      calibration.json    risk_curve.csv
      report.json
      predictions.csv
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .align import alignment_scores
from .calib import CalibrationResult, HoeffdingCalibrator, default_grid, fit_lambda
from .config import RunConfig, load_config
from .exceptions import DependencyError
from .metrics import MetricsReport, compute_interval_metrics, compute_point_metrics
from .pathpolicy import PathPolicy, train_policy
from .roadnet import SPLIT_NAMES, load_queries, fmt_float
from .synthgen import Dataset, build_dataset
from .traffic import TripIndex
from .uqmoe import MoEIntervalRegressor, train_uq

log = logging.getLogger(__name__)

STAGES = ("generate", "train-path", "train-uq", "calibrate", "evaluate", "predict")

DATASET_DIR = "dataset"
POLICY_CKPT = "policy.ckpt"
POLICY_LOG = "policy_log.csv"
UQ_CKPT = "uq.ckpt"
UQ_LOG = "uq_log.csv"
CALIBRATION = "calibration.json"
RISK_CURVE = "risk_curve.csv"
REPORT = "report.json"
PREDICTIONS = "predictions.csv"


@dataclass
class Context:
    config: RunConfig
    out: str

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def require(self, name: str) -> str:
        p = self.path(name)
        if not os.path.exists(p):
            raise DependencyError(f"missing upstream artifact: {p}")
        return p

    def dataset(self) -> Dataset:
        d = self.require(DATASET_DIR)
        for fname in ("network.txt", "trips.txt", "queries.txt", "splits.txt"):
            if not os.path.exists(os.path.join(d, fname)):
                raise DependencyError(f"missing upstream artifact: {os.path.join(d, fname)}")
        return Dataset.load(d)

    def history(self, ds: Dataset) -> TripIndex:
        # only training trips ever feed traffic features
        return TripIndex(ds.network, ds.subset("train")[0])

    def policy(self, ds: Dataset, traffic: TripIndex) -> PathPolicy:
        est = PathPolicy.from_config(self.config.policy)
        return est.load(self.require(POLICY_CKPT), ds.network, traffic)

    def uq(self, ds: Dataset, traffic: TripIndex) -> MoEIntervalRegressor:
        est = MoEIntervalRegressor.from_config(self.config.uq)
        return est.load(self.require(UQ_CKPT), ds.network, traffic)


def _write_log(rows: list[dict], path: str) -> None:
    if not rows:
        return
    keys = list(rows[0])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])


def stage_generate(ctx: Context) -> Dataset:
    ds = build_dataset(ctx.config.data)
    ds.save(ctx.path(DATASET_DIR))
    log.info("generated %d trips on %d nodes", len(ds.trips), ds.network.n_nodes)
    return ds


def stage_train_path(ctx: Context) -> PathPolicy:
    ds = ctx.dataset()
    est, rows = train_policy(ds, ctx.config.policy)
    est.save(ctx.path(POLICY_CKPT))
    _write_log(rows, ctx.path(POLICY_LOG))
    return est


def stage_train_uq(ctx: Context) -> MoEIntervalRegressor:
    ds = ctx.dataset()
    policy = None
    if ctx.config.uq.path_source != "truth":
        policy = ctx.policy(ds, ctx.history(ds))
    est, rows = train_uq(ds, policy, ctx.config.uq)
    est.save(ctx.path(UQ_CKPT))
    _write_log(rows, ctx.path(UQ_LOG))
    return est


def _split_inputs(ds: Dataset, split: str, policy: PathPolicy):
    trips, queries = ds.subset(split)
    paths = policy.predict(queries)
    return trips, queries, paths


def stage_calibrate(ctx: Context) -> CalibrationResult:
    ds = ctx.dataset()
    traffic = ctx.history(ds)
    uq = ctx.uq(ds, traffic)
    policy = ctx.policy(ds, traffic)
    trips, queries, paths = _split_inputs(ds, "calib", policy)
    est = uq.predict_estimates(list(zip(paths, queries)))
    c = ctx.config.calibration
    res = fit_lambda(est, [t.travel_time for t in trips], c.alpha, c.delta,
                     default_grid(c.grid_max, c.grid_step), c.lambda_cap)
    res.save(ctx.path(CALIBRATION), ctx.path(RISK_CURVE))
    log.info("lambda_hat=%.4g on M=%d calibration trips", res.lambda_hat, res.M)
    return res


def stage_evaluate(ctx: Context) -> MetricsReport:
    cfg = ctx.config
    ds = ctx.dataset()
    traffic = ctx.history(ds)
    uq = ctx.uq(ds, traffic)
    policy = ctx.policy(ds, traffic)
    res = CalibrationResult.load(ctx.require(CALIBRATION))
    trips, queries, paths = _split_inputs(ds, cfg.eval.split, policy)
    if not trips:
        raise DependencyError(f"split {cfg.eval.split!r} is empty")
    truths = np.array([t.travel_time for t in trips])
    est = uq.predict_estimates(list(zip(paths, queries)))
    raw = np.array([[e.y_hat, e.sigma_l, e.sigma_u] for e in est])
    cal = HoeffdingCalibrator().set_params(alpha=res.alpha, delta=res.delta)
    cal.lambda_hat_, cal.result_ = res.lambda_hat, res
    intervals = cal.transform(raw)
    rmse, mae, mape = compute_point_metrics(raw[:, 0], truths)
    picp, iw = compute_interval_metrics(intervals, truths)
    picp0, iw0 = compute_interval_metrics(
        np.stack([raw[:, 0] - raw[:, 1], raw[:, 0] + raw[:, 2]], axis=1), truths)
    scores = [alignment_scores(p, t.path, ds.network) for p, t in zip(paths, trips)]
    report = MetricsReport(
        rmse=rmse, mae=mae, mape=mape, picp=picp, iw=iw,
        lcs_mean=float(np.mean([s.lcs_len for s in scores])),
        lcs_norm_mean=float(np.mean([s.lcs_norm for s in scores])),
        dtw_mean=float(np.mean([s.dtw_norm for s in scores])),
        picp_uncalibrated=picp0, iw_uncalibrated=iw0, lambda_hat=res.lambda_hat,
        split_counts={s: len(ds.split(s)) for s in SPLIT_NAMES},
        config_digest=cfg.digest(), seed=cfg.eval.seed)
    with open(ctx.path(REPORT), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    return report


def stage_predict(ctx: Context, queries_path: str | None = None) -> list[tuple]:
    """Calibrated intervals for a queries file (default: the evaluation split)."""
    ds = ctx.dataset()
    traffic = ctx.history(ds)
    uq = ctx.uq(ds, traffic)
    policy = ctx.policy(ds, traffic)
    res = CalibrationResult.load(ctx.require(CALIBRATION))
    if queries_path is None:
        queries = ds.subset(ctx.config.eval.split)[1]
    else:
        if not os.path.exists(queries_path):
            raise DependencyError(f"missing queries file: {queries_path}")
        queries = load_queries(queries_path)
    paths = policy.predict(queries)
    est = uq.predict_estimates(list(zip(paths, queries)))
    rows = []
    for q, e in zip(queries, est):
        lam = res.lambda_hat
        rows.append((q.query_id, e.y_hat, e.y_hat - lam * e.sigma_l, e.y_hat + lam * e.sigma_u))
    with open(ctx.path(PREDICTIONS), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "y_hat", "lower", "upper"])
        w.writerows([qid, fmt_float(a), fmt_float(b), fmt_float(c)] for qid, a, b, c in rows)
    return rows


_RUNNERS = {"generate": stage_generate, "train-path": stage_train_path,
            "train-uq": stage_train_uq, "calibrate": stage_calibrate,
            "evaluate": stage_evaluate, "predict": stage_predict}


def run_pipeline(config_path, stages=STAGES, out: str | None = None, seed: int | None = None,
                 threads: int | None = None, queries: str | None = None):
    """Run ``stages`` in pipeline order; returns the last evaluation report, if any.

    ``out`` defaults to ``out`` next to the working directory; ``seed`` and
    ``threads`` override the ``[eval]`` section of the config.
    """
    cfg = load_config(config_path, seed=seed)
    if threads is not None:
        cfg.eval.threads = int(threads)
        cfg.eval.validate()
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stages: {sorted(unknown)}")
    ctx = Context(cfg, out or "out")
    os.makedirs(ctx.out, exist_ok=True)
    report = None
    with threadpool_limits(limits=cfg.eval.threads):
        for name in [s for s in STAGES if s in stages]:
            log.info("stage %s", name)
            if name == "predict":
                stage_predict(ctx, queries)
            else:
                result = _RUNNERS[name](ctx)
                if name == "evaluate":
                    report = result
    return report
