"""Online random-forest regression for execution-time prediction.

Trees are variance-minimising CART regressors grown on bootstrap resamples
with a random subset of candidate features at every split.  The forest
predicts the plain average of its trees.  After initial training it keeps a
sliding window of recent observations; every ``retrain_threshold`` new
observations the oldest ``refresh_fraction`` of trees are refitted on the
window.
"""

from __future__ import annotations

import json
import math
import threading
from collections import deque
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from numba import njit

FORMAT = "locsched-forest"
VERSION = 1


class NotTrainedError(RuntimeError):
    pass


@dataclass
class ForestConfig:
    n_trees: int = 50
    max_depth: int = 12
    min_leaf_size: int = 5
    bootstrap: bool = True
    bootstrap_fraction: float = 1.0
    features_per_split: int = 4
    retrain_threshold: int = 50
    window_size: int = 2000
    refresh_fraction: float = 0.3
    seed: int = 0
    floor_ms: float = 1.0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf_size < 1 or self.max_depth < 0:
            raise ValueError("invalid tree size limits")
        if self.bootstrap_fraction <= 0 or (not self.bootstrap and self.bootstrap_fraction > 1):
            raise ValueError("bootstrap_fraction must be > 0, and <= 1 without replacement")
        if self.retrain_threshold < 1 or self.window_size < 1:
            raise ValueError("retrain_threshold and window_size must be >= 1")
        if not 0 < self.refresh_fraction <= 1:
            raise ValueError("refresh_fraction must be in (0, 1]")


class RegressionTree:
    """Array-backed binary tree.  ``feature[i] == -1`` marks a leaf."""

    def __init__(self, feature, threshold, left, right, value, count, max_depth=None, min_leaf_size=None):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)
        self.count = np.asarray(count, dtype=np.int64)
        self.max_depth = max_depth
        self.min_leaf_size = min_leaf_size

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def depth(self):
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict_one(self, x) -> float:
        i = 0
        while self.feature[i] >= 0:
            i = self.left[i] if x[self.feature[i]] <= self.threshold[i] else self.right[i]
        return float(self.value[i])

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            go_left = X[rows, np.maximum(f, 0)] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "count": self.count.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["feature"], d["threshold"], d["left"], d["right"], d["value"], d["count"])


@njit(cache=True)
def _grow(X, y, rows, keys, m, max_depth, min_leaf):
    """Depth-first growth over index ranges of ``rows`` (partitioned in
    place).  ``keys[j]`` orders the candidate features of the j-th node
    created, so the feature subsets are fixed before growth starts."""
    cap = keys.shape[0]
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, np.int64)
    st_node = np.zeros(cap, np.int64)
    st_lo = np.zeros(cap, np.int64)
    st_hi = np.zeros(cap, np.int64)
    st_depth = np.zeros(cap, np.int64)
    buf = np.empty(rows.size, np.int64)

    n = rows.size
    value[0] = y[rows].mean()
    count[0] = n
    n_nodes = 1
    sp = 1
    st_node[0], st_lo[0], st_hi[0], st_depth[0] = 0, 0, n, 0

    while sp > 0:
        sp -= 1
        node, lo, hi, depth = st_node[sp], st_lo[sp], st_hi[sp], st_depth[sp]
        cnt = hi - lo
        if depth >= max_depth or cnt < 2 * min_leaf:
            continue
        part = rows[lo:hi]
        yn = y[part]
        if yn.max() == yn.min():
            continue
        yc = yn - yn.mean()
        tot = yc.sum()
        tot_sq = (yc * yc).sum()
        perm = np.argsort(keys[node])
        best_sse = np.inf
        best_f = -1
        best_thr = 0.0
        for j in range(m):
            f = perm[j]
            xs = X[part, f]
            order = np.argsort(xs)
            csum = 0.0
            csq = 0.0
            for i in range(cnt - min_leaf):
                v = yc[order[i]]
                csum += v
                csq += v * v
                if i < min_leaf - 1:
                    continue
                a = xs[order[i]]
                b = xs[order[i + 1]]
                if not a < b:
                    continue
                nl = i + 1.0
                nr = cnt - nl
                sse = (csq - csum * csum / nl) + ((tot_sq - csq) - (tot - csum) ** 2 / nr)
                if sse < best_sse:
                    best_sse = sse
                    best_f = f
                    thr = (a + b) / 2.0
                    if thr >= b or thr < a:
                        thr = a
                    best_thr = thr
        if best_f < 0:
            continue

        # stable partition: left block then right block
        nl = 0
        for i in range(cnt):
            r = part[i]
            if X[r, best_f] <= best_thr:
                buf[nl] = r
                nl += 1
        k = nl
        for i in range(cnt):
            r = part[i]
            if not X[r, best_f] <= best_thr:
                buf[k] = r
                k += 1
        rows[lo:hi] = buf[:cnt]

        feature[node] = best_f
        threshold[node] = best_thr
        li = n_nodes
        ri = n_nodes + 1
        n_nodes += 2
        left[node] = li
        right[node] = ri
        value[li] = y[rows[lo:lo + nl]].mean()
        count[li] = nl
        value[ri] = y[rows[lo + nl:hi]].mean()
        count[ri] = cnt - nl
        st_node[sp], st_lo[sp], st_hi[sp], st_depth[sp] = ri, lo + nl, hi, depth + 1
        sp += 1
        st_node[sp], st_lo[sp], st_hi[sp], st_depth[sp] = li, lo, lo + nl, depth + 1
        sp += 1

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], count[:n_nodes])


def fit_tree(X, y, rng, max_depth=12, min_leaf_size=5, features_per_split=None,
             bootstrap=True, bootstrap_fraction=1.0) -> RegressionTree:
    """Grow one regression tree.  Deterministic given the state of ``rng``.

    Each split considers ``features_per_split`` features drawn uniformly
    without replacement and takes the (feature, threshold) pair with the
    smallest summed child squared error; thresholds sit halfway between
    adjacent distinct values.  Growth stops at ``max_depth``, when a node
    holds fewer than ``2 * min_leaf_size`` samples, or when its targets are
    constant.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, d = X.shape
    if n == 0 or n < min_leaf_size:
        raise ValueError(f"too few samples: {n} < min_leaf_size={min_leaf_size}")
    m = d if features_per_split is None else max(1, min(d, features_per_split))

    size = max(1, int(round(bootstrap_fraction * n)))
    if bootstrap:
        rows = rng.integers(0, n, size=size)
    elif size < n:
        rows = np.sort(rng.choice(n, size=size, replace=False))
    else:
        rows = np.arange(n)

    cap = 2 * (size // min_leaf_size) + 1
    if max_depth < 62:
        cap = min(cap, 2 ** (max_depth + 1) - 1)
    keys = rng.random((max(cap, 1), d))
    arrays = _grow(X, y, rows.astype(np.int64), keys, m, max_depth, min_leaf_size)
    return RegressionTree(*arrays, max_depth=max_depth, min_leaf_size=min_leaf_size)


@dataclass
class UpdateReport:
    trees_refitted: int
    window_size: int
    trigger_time: float
    generation: int


class _Stack:
    """All trees padded into (K, M) arrays so a batch is routed through the
    whole forest in ``max_depth`` vectorised steps."""

    def __init__(self, trees):
        K = len(trees)
        M = max(t.n_nodes for t in trees)
        self.feature = np.full((K, M), -1, dtype=np.int64)
        self.threshold = np.zeros((K, M))
        self.left = np.zeros((K, M), dtype=np.int64)
        self.right = np.zeros((K, M), dtype=np.int64)
        self.value = np.zeros((K, M))
        for k, t in enumerate(trees):
            s = t.n_nodes
            self.feature[k, :s] = t.feature
            self.threshold[k, :s] = t.threshold
            self.left[k, :s] = t.left
            self.right[k, :s] = t.right
            self.value[k, :s] = t.value
        self.K = K

    def per_tree(self, X):
        r = len(X)
        k = np.repeat(np.arange(self.K), r).reshape(self.K, r)
        rows = np.tile(np.arange(r), (self.K, 1))
        node = np.zeros((self.K, r), dtype=np.int64)
        while True:
            f = self.feature[k, node]
            inner = f >= 0
            if not inner.any():
                return self.value[k, node]
            go_left = X[rows, np.maximum(f, 0)] <= self.threshold[k, node]
            nxt = np.where(go_left, self.left[k, node], self.right[k, node])
            node = np.where(inner, nxt, node)


class Forest:
    def __init__(self, config: Optional[ForestConfig] = None, n_features: Optional[int] = None):
        self.config = config or ForestConfig()
        self.n_features = n_features
        self.trees = []
        self.order = []  # tree slots, oldest first
        self.buffer = []
        self.window = deque(maxlen=self.config.window_size)
        self.generation = 0
        self.reports = []
        self._stack = None
        self._lock = threading.Lock()

    @property
    def trained(self) -> bool:
        return bool(self.trees)

    def _rng(self, slot):
        return np.random.default_rng(np.random.SeedSequence([self.config.seed, self.generation, slot]))

    def _fit(self, X, y, slot):
        c = self.config
        return fit_tree(X, y, self._rng(slot), c.max_depth, c.min_leaf_size, c.features_per_split,
                        c.bootstrap, c.bootstrap_fraction)

    @staticmethod
    def _arrays(samples):
        X = np.array([np.asarray(s.features, dtype=np.float64) for s in samples])
        y = np.array([float(s.actual) for s in samples])
        return X, y

    def train_initial(self, samples) -> "Forest":
        samples = list(samples)
        if not samples:
            raise ValueError("empty sample set")
        X, y = self._arrays(samples)
        if len(y) < self.config.min_leaf_size:
            raise ValueError("too few samples for initial training")
        self.n_features = X.shape[1]
        trees = [self._fit(X, y, k) for k in range(self.config.n_trees)]
        with self._lock:
            self.trees = trees
            self.order = list(range(len(trees)))
            self._stack = _Stack(trees)
            self.window.clear()
            self.window.extend(samples[-self.config.window_size:])
            self.buffer = []
        return self

    def per_tree(self, X) -> np.ndarray:
        stack = self._stack
        if stack is None:
            raise NotTrainedError("forest has not been trained")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return stack.per_tree(X)

    def predict_many(self, X) -> np.ndarray:
        vals = self.per_tree(X)
        return np.maximum(vals.mean(axis=0), self.config.floor_ms)

    def predict(self, x) -> float:
        return float(self.predict_many(np.asarray(x, dtype=np.float64)[None, :])[0])

    def observe(self, sample, now: float = 0.0) -> Optional[UpdateReport]:
        if not self.trained:
            self.window.append(sample)
            return None
        self.buffer.append(sample)
        self.window.append(sample)
        if len(self.buffer) < self.config.retrain_threshold:
            return None
        return self._update(now)

    def _update(self, now):
        c = self.config
        n_refit = min(len(self.trees), math.ceil(c.refresh_fraction * c.n_trees))
        X, y = self._arrays(self.window)
        self.generation += 1
        slots = self.order[:n_refit]
        trees = list(self.trees)
        for slot in slots:
            trees[slot] = self._fit(X, y, slot)
        stack = _Stack(trees)
        with self._lock:
            self.trees = trees
            self.order = self.order[n_refit:] + slots
            self._stack = stack
            self.buffer = []
        report = UpdateReport(n_refit, len(self.window), now, self.generation)
        self.reports.append(report)
        return report

    def to_dict(self):
        return {
            "format": FORMAT,
            "version": VERSION,
            "config": asdict(self.config),
            "n_features": self.n_features,
            "generation": self.generation,
            "order": list(self.order),
            "trees": [t.to_dict() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d) -> "Forest":
        if d.get("format") != FORMAT or d.get("version") != VERSION:
            raise ValueError(f"unsupported forest snapshot: {d.get('format')} v{d.get('version')}")
        forest = cls(ForestConfig(**d["config"]), d["n_features"])
        forest.generation = d["generation"]
        forest.trees = [RegressionTree.from_dict(t) for t in d["trees"]]
        forest.order = list(d["order"])
        if forest.trees:
            forest._stack = _Stack(forest.trees)
        return forest

    @classmethod
    def loads(cls, text: str) -> "Forest":
        return cls.from_dict(json.loads(text))


def train_initial(samples, config: Optional[ForestConfig] = None) -> Forest:
    return Forest(config).train_initial(samples)


def predict(forest: Forest, x) -> float:
    return forest.predict(x)


def observe(forest: Forest, sample, now: float = 0.0) -> Optional[UpdateReport]:
    return forest.observe(sample, now)
