"""Travel-time intervals from segment-level features with a mixture of experts.

For each edge of a path the model builds a feature vector from the recent
travel-time histogram of that edge, a learned edge embedding and a learned
embedding of the departure time slice. An LSTM runs over the edge sequence;
each encoded segment is routed through a sparsely gated mixture of experts
(noisy top-k gating during training, noiseless at inference), the expert
outputs are summed over the path, and three linear heads produce the point
estimate and the non-negative lower and upper offsets.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import gradcore as gc
from .exceptions import ConfigError, ContractError, TrainingDivergenceError
from .gradcore import Tensor
from .roadnet import OdtQuery, RoadNetwork, check_path, path_edges
from .traffic import TripIndex
from .validation import as_float_vector, check_paired, check_unit_interval

logger = logging.getLogger(__name__)


# ------------------------------------------------------------- histograms

@dataclass(frozen=True)
class SegmentHistogram:
    """``m`` ``(travel_time, frequency)`` pairs, zero-padded, times descending."""

    entries: tuple[tuple[float, float], ...]

    def flat(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=np.float64).reshape(-1)


def segment_histogram(index: TripIndex, edge: int, departure_time: float,
                      window: float = 3600.0, m: int = 5, bin_width: float = 5.0,
                      mode: str = "largest") -> SegmentHistogram:
    """Binned travel times of ``edge`` entered in ``[departure_time - window, departure_time)``.

    ``mode="largest"`` keeps the ``m`` largest occupied bins, ``"frequent"``
    the ``m`` most populated ones (ties to the larger time). Either way the
    kept bins are listed by decreasing time with frequency relative to all
    observations in the window.
    """
    if m < 1:
        raise ContractError("m must be >= 1")
    obs = index.window(edge, departure_time, window)
    pad = [(0.0, 0.0)] * m
    if obs.size == 0:
        return SegmentHistogram(tuple(pad))
    bins, counts = np.unique(np.floor(obs / bin_width) * bin_width, return_counts=True)
    if mode == "largest":
        keep = np.argsort(-bins, kind="stable")[:m]
    elif mode == "frequent":
        keep = np.lexsort((-bins, -counts))[:m]
        keep = keep[np.argsort(-bins[keep], kind="stable")]
    else:
        raise ContractError(f"unknown histogram mode {mode!r}")
    entries = [(float(bins[i]), float(counts[i] / obs.size)) for i in keep]
    return SegmentHistogram(tuple(entries + pad[len(entries):]))


# ------------------------------------------------------------------ gating

def gate_logits(r: Tensor, w_gate: Tensor, w_noise: Tensor, noise=None) -> Tensor:
    """``r W_g + noise * softplus(r W_noise)``; just ``r W_g`` when ``noise`` is None."""
    clean = gc.matmul(r, w_gate)
    if noise is None:
        return clean
    return clean + gc.softplus(gc.matmul(r, w_noise)) * noise


def top_k_mask(h: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries per row (lower index wins ties)."""
    n = h.shape[-1]
    k = min(k, n)
    order = np.argsort(-h, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(h.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def noisy_top_k_gate(r: Tensor, w_gate: Tensor, w_noise: Tensor, k: int, rng=None) -> Tensor:
    """Sparse gate weights: softmax over the top-``k`` (optionally noisy) logits."""
    noise = None if rng is None else rng.standard_normal((r.shape[0], w_gate.shape[1]))
    h = gate_logits(r, w_gate, w_noise, noise)
    return gc.softmax_masked(h, top_k_mask(h.data, k))


def moe_combine(r: Tensor, gate: Tensor, w_expert: Tensor, b_expert: Tensor) -> Tensor:
    """``sum_i gate_i * relu(r A_i + a_i)`` over all experts."""
    out = gc.relu(gc.batched_linear(r, w_expert) + b_expert)
    return gc.sum_(out * gc.reshape(gate, gate.shape + (1,)), axis=1)


# ------------------------------------------------------------------ model

@dataclass
class MoeConfig:
    n_experts: int = 8
    k: int = 2
    expert_width: int = 64
    m: int = 5
    hidden: int = 64
    edge_dim: int = 16
    slice_dim: int = 8
    window: float = 3600.0
    bin_width: float = 5.0
    hist_mode: str = "largest"
    rho: float = 0.1
    epochs: int = 60
    batch_size: int = 32
    lr: float = 3e-3
    grad_clip: float = 5.0
    path_source: str = "predicted"
    n_slices: int = 24
    slice_len: float = 600.0
    start_time: float = 0.0
    seed: int = 0

    def validate(self):
        if not 1 <= self.k <= self.n_experts:
            raise ConfigError("need 1 <= k <= n_experts")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if not 0 < self.rho < 1:
            raise ConfigError("rho must lie in (0, 1)")
        if self.hist_mode not in ("largest", "frequent"):
            raise ConfigError(f"unknown hist_mode {self.hist_mode!r}")
        if self.path_source not in ("predicted", "truth"):
            raise ConfigError(f"unknown path_source {self.path_source!r}")
        if self.n_slices < 1 or self.slice_len <= 0:
            raise ConfigError("n_slices and slice_len must be positive")
        return self


@dataclass(frozen=True)
class IntervalEstimate:
    y_hat: float
    sigma_l: float
    sigma_u: float

    @property
    def lower(self) -> float:
        return self.y_hat - self.sigma_l

    @property
    def upper(self) -> float:
        return self.y_hat + self.sigma_u


def _glorot(rng, shape):
    lim = np.sqrt(6.0 / (shape[-2] + shape[-1]))
    return rng.uniform(-lim, lim, size=shape)


class MoENet:
    """Parameters and batched forward pass of the interval model."""

    def __init__(self, net: RoadNetwork, config: MoeConfig, traffic: TripIndex | None = None):
        self.net = net
        self.config = config
        self.traffic = traffic
        c = config
        rng = np.random.default_rng([c.seed, 111])
        d_in = 2 * c.m + c.edge_dim + c.slice_dim
        H, n, W = c.hidden, c.n_experts, c.expert_width
        s = self.store = gc.ParamStore()
        s.add("uq.edge_emb", rng.normal(0.0, 0.1, size=(net.n_edges, c.edge_dim)))
        s.add("uq.slice_emb", rng.normal(0.0, 0.1, size=(c.n_slices, c.slice_dim)))
        s.add("uq.enc.w", _glorot(rng, (d_in, H)))
        s.add("uq.enc.b", np.zeros(H))
        s.add("uq.lstm.w_x", _glorot(rng, (H, 4 * H)))
        s.add("uq.lstm.w_h", _glorot(rng, (H, 4 * H)))
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0  # forget gate open at start
        s.add("uq.lstm.b", b)
        s.add("uq.gate.w", rng.normal(0.0, 0.1, size=(H, n)))
        s.add("uq.gate.w_noise", rng.normal(0.0, 0.1, size=(H, n)))
        s.add("uq.expert.w", _glorot(rng, (n, H, W)))
        s.add("uq.expert.b", np.zeros((n, W)))
        s.add("uq.head.w", _glorot(rng, (W, 3)) * 0.1)
        s.add("uq.head.b", np.array([0.0, -1.0, -1.0]))
        scale = traffic.mean_edge_time if traffic is not None else 1.0
        s.add("uq.meta.time_scale", np.array(scale), trainable=False)

    @property
    def time_scale(self) -> float:
        return float(self.store["uq.meta.time_scale"].data)

    def slice_of(self, t: float) -> int:
        c = self.config
        return int((t - c.start_time) // c.slice_len) % c.n_slices

    def histograms(self, edges: Sequence[int], departure_time: float) -> list[SegmentHistogram]:
        c = self.config
        if self.traffic is None:
            return [SegmentHistogram(((0.0, 0.0),) * c.m) for _ in edges]
        return [segment_histogram(self.traffic, e, departure_time, c.window, c.m,
                                  c.bin_width, c.hist_mode) for e in edges]

    def featurize(self, paths, queries) -> dict:
        """Padded numpy inputs for a batch of ``(path, query)`` pairs."""
        c = self.config
        edges = [path_edges(self.net, p) for p in paths]
        B, J = len(paths), max(len(e) for e in edges)
        hist = np.zeros((B, J, 2 * c.m))
        eid = np.zeros((B, J), dtype=np.int64)
        valid = np.zeros((B, J), dtype=bool)
        sl = np.zeros((B, J), dtype=np.int64)
        for b, (es, q) in enumerate(zip(edges, queries)):
            n = len(es)
            hs = self.histograms(es, q.departure_time)
            hist[b, :n] = [h.flat() for h in hs]
            eid[b, :n] = es
            valid[b, :n] = True
            sl[b, :] = self.slice_of(q.departure_time)
        hist[..., 0::2] /= self.time_scale
        return {"hist": hist, "edge": eid, "slice": sl, "valid": valid}

    def encode(self, feats: dict, rng=None) -> Tensor:
        """Per-segment mixture outputs ``(B, J, expert_width)``; pads are zeroed."""
        c, s = self.config, self.store
        B, J = feats["edge"].shape
        H = c.hidden
        x = gc.concat([Tensor(feats["hist"]),
                       gc.gather_rows(s["uq.edge_emb"], feats["edge"]),
                       gc.gather_rows(s["uq.slice_emb"], feats["slice"])], axis=-1)
        r = gc.relu(gc.matmul(gc.reshape(x, (B * J, -1)), s["uq.enc.w"]) + s["uq.enc.b"])
        r = gc.reshape(r, (B, J, H))

        h = Tensor(np.zeros((B, H)))
        cell = Tensor(np.zeros((B, H)))
        outs = []
        for j in range(J):
            g = gc.matmul(r[:, j, :], s["uq.lstm.w_x"]) + gc.matmul(h, s["uq.lstm.w_h"]) \
                + s["uq.lstm.b"]
            i_g = gc.sigmoid(g[:, :H])
            f_g = gc.sigmoid(g[:, H:2 * H])
            o_g = gc.sigmoid(g[:, 2 * H:3 * H])
            cand = gc.tanh(g[:, 3 * H:])
            cell = f_g * cell + i_g * cand
            h = o_g * gc.tanh(cell)
            outs.append(h)
        r2 = gc.reshape(gc.stack(outs, axis=1), (B * J, H))

        gate = noisy_top_k_gate(r2, s["uq.gate.w"], s["uq.gate.w_noise"], c.k, rng)
        mixed = moe_combine(r2, gate, s["uq.expert.w"], s["uq.expert.b"])
        mixed = gc.reshape(mixed, (B, J, c.expert_width))
        return mixed * feats["valid"][:, :, None]

    def forward(self, feats: dict, rng=None):
        """``(y_hat, sigma_l, sigma_u)`` tensors in units of ``time_scale``."""
        s = self.store
        pooled = gc.sum_(self.encode(feats, rng), axis=1)
        out = gc.matmul(pooled, s["uq.head.w"]) + s["uq.head.b"]
        return out[:, 0], gc.softplus(out[:, 1]), gc.softplus(out[:, 2])


def mis_loss(estimates, truths, rho: float = 0.1) -> Tensor:
    """Mean interval score plus absolute point error.

    ``estimates`` is either a sequence of :class:`IntervalEstimate` or a
    ``(y_hat, sigma_l, sigma_u)`` triple of tensors.
    """
    check_unit_interval(rho, "rho")
    if isinstance(estimates, tuple) and len(estimates) == 3 and \
            all(isinstance(e, Tensor) for e in estimates):
        y_hat, sl, su = estimates
    else:
        arr = np.array([[e.y_hat, e.sigma_l, e.sigma_u] for e in estimates], dtype=np.float64)
        y_hat, sl, su = Tensor(arr[:, 0]), Tensor(arr[:, 1]), Tensor(arr[:, 2])
    y = np.asarray(truths, dtype=np.float64)
    if y.shape != y_hat.shape or y.size == 0:
        raise ContractError("estimates and truths must be non-empty and aligned")
    upper = y_hat + su
    lower = y_hat - sl
    per = (sl + su) + (2.0 / rho) * (gc.relu(y - upper) + gc.relu(lower - y)) \
        + gc.abs_(y - y_hat)
    return gc.mean(per)


def encode_segments(model: MoENet, path: Sequence[int], query: OdtQuery) -> np.ndarray:
    """Noiseless mixture output for every edge of ``path``: ``(n_edges, width)``."""
    path = check_path(model.net, path)
    with gc.no_grad():
        return model.encode(model.featurize([path], [query])).data[0]


def predict_interval(model: MoENet, path: Sequence[int], query: OdtQuery) -> IntervalEstimate:
    path = check_path(model.net, path)
    return _predict(model, [path], [query])[0]


def _predict(model: MoENet, paths, queries, batch: int = 256) -> list[IntervalEstimate]:
    out = []
    scale = model.time_scale
    for i in range(0, len(paths), batch):
        with gc.no_grad():
            yh, sl, su = model.forward(model.featurize(paths[i:i + batch], queries[i:i + batch]))
        arr = np.stack([yh.data, sl.data, su.data], axis=1) * scale
        if not np.all(np.isfinite(arr)):
            raise TrainingDivergenceError("interval model produced non-finite outputs")
        out.extend(IntervalEstimate(*map(float, row)) for row in arr)
    return out


class MoEIntervalRegressor(BaseEstimator, RegressorMixin):
    """Travel-time interval regressor over ``(path, query)`` inputs.

    ``predict`` returns point estimates in seconds; ``predict_estimates``
    and ``predict_interval`` expose the uncalibrated interval.
    """

    def __init__(self, n_experts=8, k=2, expert_width=64, m=5, hidden=64, edge_dim=16,
                 slice_dim=8, window=3600.0, bin_width=5.0, hist_mode="largest", rho=0.1,
                 epochs=60, batch_size=32, lr=3e-3, grad_clip=5.0, path_source="predicted",
                 n_slices=24, slice_len=600.0, start_time=0.0, random_state=0):
        self.n_experts = n_experts
        self.k = k
        self.expert_width = expert_width
        self.m = m
        self.hidden = hidden
        self.edge_dim = edge_dim
        self.slice_dim = slice_dim
        self.window = window
        self.bin_width = bin_width
        self.hist_mode = hist_mode
        self.rho = rho
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.grad_clip = grad_clip
        self.path_source = path_source
        self.n_slices = n_slices
        self.slice_len = slice_len
        self.start_time = start_time
        self.random_state = random_state

    @classmethod
    def from_config(cls, config: MoeConfig) -> "MoEIntervalRegressor":
        kw = asdict(config)
        kw["random_state"] = kw.pop("seed")
        return cls(**kw)

    def _config(self) -> MoeConfig:
        kw = {k: v for k, v in self.get_params().items() if k != "random_state"}
        return MoeConfig(seed=int(self.random_state), **kw).validate()

    def init_model(self, network: RoadNetwork, traffic: TripIndex | None = None):
        self.network_ = network
        self.model_ = MoENet(network, self._config(), traffic)
        self.log_ = []
        self.best_epoch_ = 0
        return self

    @staticmethod
    def _split(X):
        paths = [tuple(p) for p, _ in X]
        queries = [q for _, q in X]
        return paths, queries

    def fit(self, X, y, *, network: RoadNetwork, traffic: TripIndex | None = None,
            X_val=None, y_val=None):
        """Minimise the interval score on ``X = [(path, query), ...]``, ``y`` in seconds."""
        y = as_float_vector(y, "y")
        check_paired(X, y, "X and y")
        paths, queries = self._split(X)
        for p in paths:
            check_path(network, p)
        self.init_model(network, traffic)
        model, cfg = self.model_, self.model_.config
        if X_val is None:
            X_val, y_val = X, y
        vp, vq = self._split(X_val)
        y_val = np.asarray(y_val, dtype=np.float64)
        scale = model.time_scale
        feats = [model.featurize([p], [q]) for p, q in zip(paths, queries)]
        shuffle_rng = np.random.default_rng([cfg.seed, 212])
        noise_rng = np.random.default_rng([cfg.seed, 313])

        best_val, best_params = np.inf, model.store.snapshot()
        for epoch in range(1, cfg.epochs + 1):
            order = shuffle_rng.permutation(len(paths))
            total, n = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                bi = order[start:start + cfg.batch_size]
                batch = _stack_feats([feats[i] for i in bi])
                loss = mis_loss(model.forward(batch, noise_rng), y[bi] / scale, cfg.rho)
                if not np.isfinite(loss.item()):
                    raise TrainingDivergenceError(f"non-finite interval loss at epoch {epoch}")
                loss.backward()
                if cfg.grad_clip > 0:
                    gc.clip_grad_norm(model.store, cfg.grad_clip)
                gc.optimizer_step(model.store, cfg.lr)
                total += loss.item() * len(bi)
                n += len(bi)
            est = _predict(model, vp, vq)
            val_mis = mis_loss(est, y_val, cfg.rho).item()
            lo = np.array([e.lower for e in est])
            hi = np.array([e.upper for e in est])
            rec = {"epoch": epoch, "train_mis": total / n * scale, "val_mis": val_mis,
                   "val_iw": float(np.mean(hi - lo)),
                   "val_picp": float(100.0 * np.mean((y_val >= lo) & (y_val <= hi)))}
            self.log_.append(rec)
            logger.info("uq epoch %d: %s", epoch, rec)
            if val_mis < best_val:
                best_val, best_params = val_mis, model.store.snapshot()
                self.best_epoch_ = epoch
        model.store.load(best_params)
        return self

    def predict_estimates(self, X) -> list[IntervalEstimate]:
        check_is_fitted(self, "model_")
        paths, queries = self._split(X)
        return _predict(self.model_, paths, queries) if paths else []

    def predict_interval(self, X) -> np.ndarray:
        """``(n, 2)`` array of uncalibrated ``[lower, upper]`` bounds."""
        return np.array([[e.lower, e.upper] for e in self.predict_estimates(X)]).reshape(-1, 2)

    def predict(self, X) -> np.ndarray:
        return np.array([e.y_hat for e in self.predict_estimates(X)])

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        gc.save_checkpoint(self.model_.store, path)

    def load(self, path, network: RoadNetwork, traffic: TripIndex | None = None):
        self.init_model(network, traffic)
        self.model_.store.load(gc.load_checkpoint(path))
        return self


def _stack_feats(items: list[dict]) -> dict:
    J = max(f["edge"].shape[1] for f in items)

    def pad(a, fill=0):
        width = [(0, 0), (0, J - a.shape[1])] + [(0, 0)] * (a.ndim - 2)
        return np.pad(a, width, constant_values=fill)
    return {k: np.concatenate([pad(f[k]) for f in items], axis=0) for k in items[0]}


def train_uq(dataset, policy, config: MoeConfig):
    """Fit the interval model on the train split, selecting on val.

    Paths come from ``policy.predict`` unless ``config.path_source == "truth"``.
    """
    train_trips, train_q = dataset.subset("train")
    val_trips, val_q = dataset.subset("val")
    traffic = TripIndex(dataset.network, train_trips)

    def inputs(trips, queries):
        if config.path_source == "truth" or policy is None:
            paths = [t.path for t in trips]
        else:
            paths = policy.predict(queries)
        return list(zip(paths, queries)), [t.travel_time for t in trips]

    X, y = inputs(train_trips, train_q)
    Xv, yv = inputs(val_trips, val_q) if val_trips else (None, None)
    est = MoEIntervalRegressor.from_config(config)
    est.fit(X, y, network=dataset.network, traffic=traffic, X_val=Xv, y_val=yv)
    return est, est.log_
