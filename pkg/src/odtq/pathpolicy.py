"""Path prediction as a sequential decision process over the road graph.

The agent starts at the origin node and repeatedly picks an out-neighbor of
its current node until it reaches the destination or exhausts the step
budget ``2 * hops(origin, destination) + lmax_slack``. A gated recurrent
encoder summarises the prefix; a two-layer head combines it with recent
traffic on the candidate edges and the distance and direction to the
destination, and a masked softmax over the node vocabulary restricts the
choice to adjacent nodes.

Training mixes teacher-forced cross-entropy with a self-critical policy
gradient whose baseline is the reward of the model's own greedy rollout.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import gradcore as gc
from .align import alignment_scores, reward
from .exceptions import ConfigError, ContractError, DeadEndError, TrainingDivergenceError
from .gradcore import Tensor
from .roadnet import OdtQuery, RoadNetwork, check_path, resolve_query
from .synthgen import hop_distances
from .traffic import TripIndex
from .validation import check_paired

logger = logging.getLogger(__name__)


@dataclass
class PolicyConfig:
    d_model: int = 32
    hidden: int = 64
    fanout: int = 8
    gamma_discount: float = 1.0
    gamma_policy_weight: float = 0.5
    omega: float = 1.0
    beta: float = 1.0
    samples_per_query: int = 4
    lmax_slack: int = 10
    warmup_epochs: int = 3
    epochs: int = 20
    batch_size: int = 32
    lr: float = 5e-3
    standardize_rewards: bool = False
    traffic_window: float = 600.0
    grad_clip: float = 5.0
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.gamma_discount <= 1.0:
            raise ConfigError("gamma_discount must lie in [0, 1]")
        for name in ("gamma_policy_weight", "omega", "beta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.samples_per_query < 1 or self.batch_size < 1:
            raise ConfigError("samples_per_query and batch_size must be positive")
        if self.d_model < 1 or self.hidden < 1 or self.fanout < 1:
            raise ConfigError("layer sizes must be positive")
        if self.warmup_epochs < 0 or self.epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        return self


@dataclass
class PolicyState:
    prefix: tuple[int, ...]
    h: np.ndarray
    traffic: np.ndarray
    dist_to_dest: float
    dir_to_dest: tuple[float, float]


@dataclass
class Episode:
    origin: int
    actions: list[int]
    log_probs: object
    terminal_reward: float
    reached: bool
    truth: tuple[int, ...] | None = None

    @property
    def path(self) -> tuple[int, ...]:
        return (self.origin, *self.actions)


def _glorot(rng, shape):
    lim = np.sqrt(6.0 / (shape[0] + shape[-1]))
    return rng.uniform(-lim, lim, size=shape)


def direction_features(net: RoadNetwork, cur, dest):
    """Normalized distance and ``(sin, cos)`` of the angle from the east axis."""
    delta = net.norm_coords[dest] - net.norm_coords[cur]
    dist = np.sqrt((delta * delta).sum(axis=-1))
    safe = np.where(dist > 0, dist, 1.0)
    sin = np.where(dist > 0, delta[..., 1] / safe, 0.0)
    cos = np.where(dist > 0, delta[..., 0] / safe, 1.0)
    return dist, sin, cos


class PolicyNet:
    """Parameters and differentiable forward pieces of the path policy."""

    def __init__(self, net: RoadNetwork, config: PolicyConfig,
                 traffic: TripIndex | None = None):
        self.net = net
        self.config = config
        self.traffic = traffic
        V, d, H, F = net.n_nodes, config.d_model, config.hidden, config.fanout
        rng = np.random.default_rng([config.seed, 101])
        s = self.store = gc.ParamStore()
        s.add("policy.emb", rng.normal(0.0, 0.3, size=(V, d)))
        s.add("policy.gru.w_x", _glorot(rng, (d, 3 * d)))
        s.add("policy.gru.w_h", _glorot(rng, (d, 3 * d)))
        s.add("policy.gru.b_x", np.zeros(3 * d))
        s.add("policy.gru.b_h", np.zeros(3 * d))
        s.add("policy.head.w1", _glorot(rng, (d + F + 3, H)))
        s.add("policy.head.b1", np.zeros(H))
        s.add("policy.head.w2", _glorot(rng, (H, V)))
        s.add("policy.head.b2", np.zeros(V))
        scale = traffic.mean_edge_time if traffic is not None else 1.0
        s.add("policy.meta.time_scale", np.array(scale), trainable=False)

        self.adj_mask = np.zeros((V, V), dtype=bool)
        self.slot_edges = np.full((V, F), -1, dtype=np.int64)
        for v, nbrs in enumerate(net.adjacency):
            self.adj_mask[v, list(nbrs)] = True
            for k, w in enumerate(nbrs[:F]):
                self.slot_edges[v, k] = net.edge_id(v, w)
        self._traffic_cache: dict[float, np.ndarray] = {}
        self._hops: dict[int, dict[int, int]] = {}

    # -- features -------------------------------------------------------

    def traffic_matrix(self, departure_time: float) -> np.ndarray:
        """``(V, fanout)`` recent mean times of each node's out-edges, scaled."""
        key = float(departure_time)
        out = self._traffic_cache.get(key)
        if out is None:
            if self.traffic is None:
                out = np.zeros(self.slot_edges.shape)
            else:
                mt = self.traffic.mean_times(key, self.config.traffic_window)
                scale = float(self.store["policy.meta.time_scale"].data)
                out = np.where(self.slot_edges >= 0, mt[self.slot_edges], 0.0) / scale
            self._traffic_cache[key] = out
        return out

    def features(self, cur, dest, traffic_rows) -> np.ndarray:
        dist, sin, cos = direction_features(self.net, cur, dest)
        return np.concatenate([traffic_rows, dist[..., None], sin[..., None], cos[..., None]],
                              axis=-1)

    def hops(self, origin: int, dest: int) -> int:
        if origin not in self._hops:
            self._hops[origin] = hop_distances(self.net, origin)
        return self._hops[origin].get(dest, self.net.n_nodes)

    def step_budget(self, origin: int, dest: int) -> int:
        return 2 * self.hops(origin, dest) + self.config.lmax_slack

    # -- differentiable pieces -------------------------------------------

    def gru(self, x: Tensor, h: Tensor) -> Tensor:
        s, d = self.store, self.config.d_model
        gx = gc.matmul(x, s["policy.gru.w_x"]) + s["policy.gru.b_x"]
        gh = gc.matmul(h, s["policy.gru.w_h"]) + s["policy.gru.b_h"]
        r = gc.sigmoid(gx[:, :d] + gh[:, :d])
        z = gc.sigmoid(gx[:, d:2 * d] + gh[:, d:2 * d])
        n = gc.tanh(gx[:, 2 * d:] + r * gh[:, 2 * d:])
        return (1.0 - z) * n + z * h

    def embed(self, nodes) -> Tensor:
        return gc.gather_rows(self.store["policy.emb"], nodes)

    def logits(self, h: Tensor, feats: np.ndarray) -> Tensor:
        s = self.store
        x = gc.concat([h, Tensor(feats)], axis=1)
        hid = gc.relu(gc.matmul(x, s["policy.head.w1"]) + s["policy.head.b1"])
        return gc.matmul(hid, s["policy.head.w2"]) + s["policy.head.b2"]

    def log_policy(self, h: Tensor, feats: np.ndarray, mask: np.ndarray) -> Tensor:
        return gc.log_softmax_masked(self.logits(h, feats), mask)

    # -- batched evaluation ----------------------------------------------

    def step_log_probs(self, paths: Sequence[Sequence[int]], dests, departures):
        """Teacher-forced per-step log-probabilities of following ``paths``.

        Returns a ``(B, T-1)`` tensor and a boolean mask of real steps.
        """
        B = len(paths)
        lens = np.array([len(p) for p in paths])
        T = int(lens.max())
        if T < 2:
            raise ContractError("paths need at least one step")
        X = np.zeros((B, T), dtype=np.int64)
        for b, p in enumerate(paths):
            X[b, :len(p)] = p
        valid = np.arange(T - 1)[None, :] < (lens[:, None] - 1)
        dests = np.asarray(dests, dtype=np.int64)
        traf = np.stack([self.traffic_matrix(t) for t in departures])
        rows = np.arange(B)

        h = Tensor(np.zeros((B, self.config.d_model)))
        hs, feats, masks, targets = [], [], [], []
        for t in range(T - 1):
            cur = X[:, t]
            h = self.gru(self.embed(cur), h)
            hs.append(h)
            feats.append(self.features(cur, dests, traf[rows, cur]))
            m = self.adj_mask[cur].copy()
            m[~valid[:, t]] = True
            tgt = np.where(valid[:, t], X[:, t + 1], 0)
            if not m[rows, tgt].all():
                bad = int(np.flatnonzero(~m[rows, tgt])[0])
                raise ContractError(f"path {list(paths[bad])} leaves the out-neighbor set")
            masks.append(m)
            targets.append(tgt)
        Hs = gc.reshape(gc.stack(hs, axis=1), (B * (T - 1), -1))
        logp = self.log_policy(Hs, np.stack(feats, 1).reshape(B * (T - 1), -1),
                               np.stack(masks, 1).reshape(B * (T - 1), -1))
        picked = gc.pick(logp, np.stack(targets, 1).reshape(-1))
        return gc.reshape(picked, (B, T - 1)), valid

    def rollout(self, origins, dests, departures, mode: str = "greedy", rng=None):
        """Decode one path per row without recording gradients.

        Returns ``(paths, step_log_probs, reached)``.
        """
        if mode not in ("greedy", "sample"):
            raise ContractError(f"unknown decoding mode {mode!r}")
        if mode == "sample" and rng is None:
            raise ContractError("sampling needs an rng")
        B = len(origins)
        cur = np.asarray(origins, dtype=np.int64).copy()
        dests = np.asarray(dests, dtype=np.int64)
        budget = np.array([self.step_budget(o, d) for o, d in zip(cur, dests)])
        traf = np.stack([self.traffic_matrix(t) for t in departures])
        h = np.zeros((B, self.config.d_model))
        paths = [[int(o)] for o in cur]
        lps: list[list[float]] = [[] for _ in range(B)]
        reached = np.zeros(B, dtype=bool)
        active = cur != dests
        has_out = self.adj_mask.any(axis=1)
        with gc.no_grad():
            while active.any():
                idx = np.flatnonzero(active)
                c = cur[idx]
                h[idx] = self.gru(self.embed(c), Tensor(h[idx])).data
                alive = has_out[c]
                active[idx[~alive]] = False
                idx, c = idx[alive], c[alive]
                if idx.size == 0:
                    break
                mask = self.adj_mask[c]
                logp = self.log_policy(Tensor(h[idx]), self.features(c, dests[idx], traf[idx, c]),
                                       mask).data
                if mode == "greedy":
                    nxt = np.argmax(np.where(mask, logp, -np.inf), axis=1)
                else:
                    p = np.where(mask, np.exp(logp), 0.0)
                    cdf = np.cumsum(p, axis=1)
                    u = rng.random(idx.size) * cdf[:, -1]
                    nxt = (cdf <= u[:, None]).sum(axis=1)
                for j, b in enumerate(idx):
                    a = int(nxt[j])
                    paths[b].append(a)
                    lps[b].append(float(logp[j, a]))
                    cur[b] = a
                    if a == dests[b]:
                        reached[b] = True
                        active[b] = False
                    elif len(paths[b]) - 1 >= budget[b]:
                        active[b] = False
        return paths, lps, reached


# ------------------------------------------------------------ module API

def encode_state(model: PolicyNet, dest: int, prefix: Sequence[int],
                 departure_time: float = 0.0) -> PolicyState:
    """Policy input after observing ``prefix`` (origin first)."""
    prefix = tuple(int(v) for v in prefix)
    if not prefix:
        raise ContractError("empty prefix")
    for v in (*prefix, dest):
        if not 0 <= v < model.net.n_nodes:
            raise IndexError(f"node {v} has no embedding")
    with gc.no_grad():
        h = Tensor(np.zeros((1, model.config.d_model)))
        for v in prefix:
            h = model.gru(model.embed([v]), h)
    cur = prefix[-1]
    dist, sin, cos = direction_features(model.net, np.array([cur]), np.array([dest]))
    return PolicyState(prefix, h.data[0].copy(),
                       model.traffic_matrix(departure_time)[cur].copy(),
                       float(dist[0]), (float(sin[0]), float(cos[0])))


def action_distribution(model: PolicyNet, state: PolicyState) -> np.ndarray:
    """Probabilities over all nodes; non-neighbors of the current node get 0."""
    cur = state.prefix[-1]
    mask = model.adj_mask[cur]
    if not mask.any():
        raise DeadEndError(f"node {cur} has no out-neighbors")
    feats = np.concatenate([state.traffic, [state.dist_to_dest], state.dir_to_dest])[None, :]
    with gc.no_grad():
        logits = model.logits(Tensor(state.h[None, :]), feats)
        return gc.softmax_masked(logits, mask[None, :]).data[0]


def sample_path(model: PolicyNet, query: OdtQuery, truth: Sequence[int] | None = None,
                mode: str = "sample", seed=0, omega: float | None = None,
                beta: float | None = None) -> Episode:
    """Roll out one path for ``query``; ``log_probs`` is a differentiable tensor."""
    o, d = resolve_query(model.net, query)
    rng = np.random.default_rng(seed)
    paths, _, reached = model.rollout([o], [d], [query.departure_time], mode, rng)
    path = paths[0]
    if len(path) > 1:
        steps, _ = model.step_log_probs([path], [d], [query.departure_time])
        log_probs = gc.reshape(steps, (-1,))
    else:
        log_probs = Tensor(np.zeros(0))
    r = float("nan")
    if truth is not None:
        cfg = model.config
        r = reward(path, truth, model.net, cfg.omega if omega is None else omega,
                   cfg.beta if beta is None else beta)
    return Episode(o, path[1:], log_probs, r, bool(reached[0]),
                   tuple(truth) if truth is not None else None)


def discount_weights(n_steps: int, gamma: float) -> np.ndarray:
    return gamma ** np.arange(n_steps, dtype=np.float64)


def scst_loss(episodes: Sequence[Episode], greedy: Episode,
              gamma_discount: float = 1.0) -> Tensor:
    """Self-critical policy-gradient surrogate for one query.

    ``-(1/N) sum_i (sum_t gamma^t log pi(a_it)) * (r_i - r_greedy)``; rewards
    are constants, so gradients flow only through the log-probabilities.
    """
    if not episodes:
        raise ContractError("scst_loss needs at least one sampled episode")
    terms = []
    for ep in episodes:
        if not ep.actions:
            raise ContractError("scst_loss got an empty episode")
        lp = ep.log_probs
        w = discount_weights(lp.shape[0], gamma_discount)
        terms.append(gc.sum_(lp * w) * (ep.terminal_reward - greedy.terminal_reward))
    return gc.sum_(gc.stack(terms)) * (-1.0 / len(episodes))


def ce_loss(model: PolicyNet, truth: Sequence[int], departure_time: float = 0.0) -> Tensor:
    """Mean teacher-forced negative log-likelihood of the true next nodes."""
    path = check_path(model.net, truth)
    steps, _ = model.step_log_probs([path], [path[-1]], [departure_time])
    return -gc.mean(steps)


def _batch_ce(model: PolicyNet, paths, departures) -> Tensor:
    steps, valid = model.step_log_probs(paths, [p[-1] for p in paths], departures)
    w = valid / valid.sum(axis=1, keepdims=True)
    return -gc.sum_(steps * w) * (1.0 / len(paths))


def _batch_scst(model: PolicyNet, paths, dests, departures, advantages, gamma) -> Tensor:
    steps, valid = model.step_log_probs(paths, dests, departures)
    w = valid * discount_weights(valid.shape[1], gamma)[None, :] * np.asarray(advantages)[:, None]
    return -gc.sum_(steps * w) * (1.0 / len(paths))


class PathPolicy(BaseEstimator):
    """Predicts the most likely path for an origin-destination-time query.

    Parameters mirror :class:`PolicyConfig`; ``random_state`` seeds
    initialisation, shuffling and sampling.

    Attributes
    ----------
    model_ : PolicyNet
    log_ : list of dict
        One record per epoch (epoch 0 is the untrained policy) with keys
        ``epoch, ce_loss, policy_loss, val_mean_reward, val_lcs, val_dtw``.
    best_epoch_ : int
    """

    def __init__(self, d_model=32, hidden=64, fanout=8, gamma_discount=1.0,
                 gamma_policy_weight=0.5, omega=1.0, beta=1.0, samples_per_query=4,
                 lmax_slack=10, warmup_epochs=3, epochs=20, batch_size=32, lr=5e-3,
                 standardize_rewards=False, traffic_window=600.0, grad_clip=5.0,
                 random_state=0):
        self.d_model = d_model
        self.hidden = hidden
        self.fanout = fanout
        self.gamma_discount = gamma_discount
        self.gamma_policy_weight = gamma_policy_weight
        self.omega = omega
        self.beta = beta
        self.samples_per_query = samples_per_query
        self.lmax_slack = lmax_slack
        self.warmup_epochs = warmup_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.standardize_rewards = standardize_rewards
        self.traffic_window = traffic_window
        self.grad_clip = grad_clip
        self.random_state = random_state

    @classmethod
    def from_config(cls, config: PolicyConfig) -> "PathPolicy":
        kw = asdict(config)
        kw["random_state"] = kw.pop("seed")
        return cls(**kw)

    def _config(self) -> PolicyConfig:
        kw = {k: v for k, v in self.get_params().items() if k != "random_state"}
        return PolicyConfig(seed=int(self.random_state), **kw).validate()

    def init_model(self, network: RoadNetwork, traffic: TripIndex | None = None):
        """Set up fresh (untrained) parameters without fitting."""
        self.network_ = network
        self.model_ = PolicyNet(network, self._config(), traffic)
        self.log_ = []
        self.best_epoch_ = 0
        return self

    def fit(self, X: Sequence[OdtQuery], y: Sequence[Sequence[int]], *, network: RoadNetwork,
            traffic: TripIndex | None = None, X_val=None, y_val=None):
        """Train on queries ``X`` with ground-truth paths ``y``.

        The validation pair (defaults to the training data) picks the
        returned parameters and feeds the per-epoch reward log.
        """
        check_paired(X, y, "X and y")
        paths = [check_path(network, p) for p in y]
        if X_val is None:
            X_val, y_val = X, paths
        self.init_model(network, traffic)
        cfg, model = self.model_.config, self.model_
        deps = [q.departure_time for q in X]
        shuffle_rng = np.random.default_rng([cfg.seed, 202])
        sample_rng = np.random.default_rng([cfg.seed, 303])

        best = (self._validate(X_val, y_val, 0, float("nan"), float("nan")), model.store.snapshot())
        self.best_epoch_ = 0
        for epoch in range(1, cfg.epochs + 1):
            use_pg = epoch > cfg.warmup_epochs and cfg.gamma_policy_weight > 0
            ce_sum = pg_sum = 0.0
            n_batches = 0
            order = shuffle_rng.permutation(len(X))
            for start in range(0, len(order), cfg.batch_size):
                bi = order[start:start + cfg.batch_size]
                bp = [paths[i] for i in bi]
                bd = [deps[i] for i in bi]
                loss = ce = _batch_ce(model, bp, bd)
                if use_pg:
                    pg = self._policy_term(bp, bd, sample_rng)
                    loss = ce + pg * cfg.gamma_policy_weight
                    pg_sum += pg.item()
                if not np.isfinite(loss.item()):
                    raise TrainingDivergenceError(f"non-finite policy loss at epoch {epoch}")
                loss.backward()
                if cfg.grad_clip > 0:
                    gc.clip_grad_norm(model.store, cfg.grad_clip)
                gc.optimizer_step(model.store, cfg.lr)
                ce_sum += ce.item()
                n_batches += 1
            rec = self._validate(X_val, y_val, epoch, ce_sum / n_batches,
                                 pg_sum / n_batches if use_pg else 0.0)
            logger.info("policy epoch %d: %s", epoch, rec)
            if rec["val_mean_reward"] > best[0]["val_mean_reward"]:
                best = (rec, model.store.snapshot())
                self.best_epoch_ = epoch
        model.store.load(best[1])
        return self

    def _policy_term(self, paths, deps, rng) -> Tensor:
        cfg, model = self.model_.config, self.model_
        N = cfg.samples_per_query
        origins = [p[0] for p in paths]
        dests = [p[-1] for p in paths]
        g_paths, _, _ = model.rollout(origins, dests, deps, "greedy")
        g_rew = [reward(gp, tp, model.net, cfg.omega, cfg.beta) for gp, tp in zip(g_paths, paths)]
        rep = np.repeat(np.arange(len(paths)), N)
        s_paths, _, _ = model.rollout([origins[i] for i in rep], [dests[i] for i in rep],
                                      [deps[i] for i in rep], "sample", rng)
        adv = np.array([reward(sp, paths[i], model.net, cfg.omega, cfg.beta) - g_rew[i]
                        for sp, i in zip(s_paths, rep)])
        if cfg.standardize_rewards and adv.std() > 0:
            adv = adv / adv.std()
        keep = [k for k, sp in enumerate(s_paths) if len(sp) > 1]
        if not keep or not np.any(adv[keep]):
            return Tensor(0.0)
        loss = _batch_scst(model, [s_paths[k] for k in keep], [dests[rep[k]] for k in keep],
                           [deps[rep[k]] for k in keep], adv[keep], cfg.gamma_discount)
        # _batch_scst averages over the kept samples; rescale to 1/(B*N)
        return loss * (len(keep) / len(s_paths))

    def _validate(self, X, y, epoch, ce, pg) -> dict:
        preds = self.predict(X)
        scores = [alignment_scores(p, t, self.network_) for p, t in zip(preds, y)]
        cfg = self.model_.config
        rewards = [cfg.omega * s.lcs_norm - cfg.beta * s.dtw_norm for s in scores]
        rec = {"epoch": epoch, "ce_loss": ce, "policy_loss": pg,
               "val_mean_reward": float(np.mean(rewards)),
               "val_lcs": float(np.mean([s.lcs_len for s in scores])),
               "val_dtw": float(np.mean([s.dtw_norm for s in scores]))}
        self.log_.append(rec)
        return rec

    def predict(self, X: Sequence[OdtQuery]) -> list[tuple[int, ...]]:
        """Greedy-decoded path for every query."""
        check_is_fitted(self, "model_")
        if not X:
            return []
        od = [resolve_query(self.network_, q) for q in X]
        paths, _, _ = self.model_.rollout([o for o, _ in od], [d for _, d in od],
                                          [q.departure_time for q in X], "greedy")
        return [tuple(p) for p in paths]

    def score(self, X, y) -> float:
        """Mean alignment reward of greedy paths against ``y``."""
        cfg = self.model_.config
        return float(np.mean([reward(p, t, self.network_, cfg.omega, cfg.beta)
                              for p, t in zip(self.predict(X), y)]))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        gc.save_checkpoint(self.model_.store, path)

    def load(self, path, network: RoadNetwork, traffic: TripIndex | None = None):
        self.init_model(network, traffic)
        self.model_.store.load(gc.load_checkpoint(path))
        self.model_._traffic_cache.clear()
        return self


def train_policy(dataset, config: PolicyConfig) -> tuple[PathPolicy, list[dict]]:
    """Fit a :class:`PathPolicy` on the dataset's train split, selecting on val."""
    train_trips, train_q = dataset.subset("train")
    val_trips, val_q = dataset.subset("val")
    traffic = TripIndex(dataset.network, train_trips)
    est = PathPolicy.from_config(config)
    est.fit(train_q, [t.path for t in train_trips], network=dataset.network, traffic=traffic,
            X_val=val_q or None, y_val=[t.path for t in val_trips] or None)
    return est, est.log_
