"""Multi-output random forest regression grown from scratch.

Trees are CART regressors: every node draws ``max_features`` features without
replacement and takes the (feature, threshold) pair with the largest decrease
of the summed per-output squared error. Thresholds are midpoints between
consecutive distinct values; ties go to the lowest feature index, then the
lowest threshold. The inner loops are compiled with numba and release the
GIL, so trees can be grown on a thread pool.
"""

from __future__ import annotations

import base64
import gzip
import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .core import Dataset, DatasetError, ScalerParams, fit_scaler, transform_features

FORMAT = "emns.forest"
VERSION = 1

# relative node-impurity floor below which a node is a leaf
ZERO_VARIANCE_RTOL = 1e-14
# a split must improve on the incumbent by this fraction of the node impurity
GAIN_RTOL = 1e-12


@dataclass(frozen=True)
class ForestHyperparams:
    n_trees: int = 100
    max_depth: int | None = 25
    min_samples_split: int = 2
    max_features: int = 5
    min_samples_leaf: int = 1
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 or None")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_features < 1:
            raise ValueError("max_features must be >= 1")


# --------------------------------------------------------------------------
# compiled kernels


@njit(cache=True, nogil=True)
def _splitmix64(state):
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _build_tree(X, Y, sample_idx, max_depth, min_split, min_leaf, max_features, seed, rtol):
    n = sample_idx.shape[0]
    n_features = X.shape[1]
    n_out = Y.shape[1]
    cap = max(2 * n - 1, 1)
    feature = np.full(cap, -1, np.int32)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    value = np.zeros((cap, n_out))
    count = np.zeros(cap, np.int32)
    importance = np.zeros(n_features)

    idx = sample_idx.copy()
    buf = np.empty(n, np.int64)
    xs = np.empty(n)
    yc = np.empty((n, n_out))
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    st_parent = np.empty(cap, np.int64)
    st_left = np.empty(cap, np.bool_)
    feats = np.arange(n_features)
    state = np.array([np.uint64(seed)], dtype=np.uint64)
    mean = np.empty(n_out)
    tot = np.empty(n_out)
    sl = np.empty(n_out)

    sp = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    st_parent[0] = -1
    st_left[0] = True
    sp = 1
    n_nodes = 0
    while sp > 0:
        sp -= 1
        start = st_start[sp]
        end = st_end[sp]
        depth = st_depth[sp]
        parent = st_parent[sp]
        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if st_left[sp]:
                left[parent] = node
            else:
                right[parent] = node
        m = end - start

        mean[:] = 0.0
        raw_sq = 0.0
        for j in range(start, end):
            for c in range(n_out):
                v = Y[idx[j], c]
                mean[c] += v
                raw_sq += v * v
        for c in range(n_out):
            mean[c] /= m
        sse = 0.0
        for c in range(n_out):
            value[node, c] = mean[c]
        count[node] = m
        for j in range(start, end):
            for c in range(n_out):
                d = Y[idx[j], c] - mean[c]
                sse += d * d

        if ((max_depth >= 0 and depth >= max_depth) or m < min_split or m < 2 * min_leaf
                or sse <= rtol * raw_sq):
            continue

        # draw max_features distinct features, scan them in ascending order
        for j in range(max_features):
            r = j + np.int64(_splitmix64(state) % np.uint64(n_features - j))
            t = feats[j]
            feats[j] = feats[r]
            feats[r] = t
        chosen = np.sort(feats[:max_features])

        # a candidate must beat the incumbent by a margin relative to the node
        # impurity, so exact ties (equal partitions reached through different
        # features, summed in a different order) go to the first one scanned
        margin = GAIN_RTOL * sse
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        for fi in range(max_features):
            f = chosen[fi]
            for j in range(m):
                xs[j] = X[idx[start + j], f]
            order = np.argsort(xs[:m], kind="mergesort")
            for c in range(n_out):
                tot[c] = 0.0
                sl[c] = 0.0
            for j in range(m):
                s = idx[start + order[j]]
                for c in range(n_out):
                    yc[j, c] = Y[s, c] - mean[c]
                    tot[c] += yc[j, c]
            base = 0.0
            for c in range(n_out):
                base += tot[c] * tot[c] / m
            for pos in range(m - 1):
                for c in range(n_out):
                    sl[c] += yc[pos, c]
                nl = pos + 1
                nr = m - nl
                if nl < min_leaf:
                    continue
                if nr < min_leaf:
                    break
                a = xs[order[pos]]
                b = xs[order[pos + 1]]
                if a == b:
                    continue
                gain = -base
                for c in range(n_out):
                    sr = tot[c] - sl[c]
                    gain += sl[c] * sl[c] / nl + sr * sr / nr
                if gain > best_gain + margin:
                    best_gain = gain
                    best_f = f
                    thr = 0.5 * (a + b)
                    if thr == b:
                        thr = a
                    best_thr = thr

        if best_f < 0:
            continue
        feature[node] = best_f
        threshold[node] = best_thr
        importance[best_f] += best_gain

        # stable partition: x <= threshold goes left
        nl = 0
        nr = 0
        for j in range(start, end):
            s = idx[j]
            if X[s, best_f] <= best_thr:
                idx[start + nl] = s
                nl += 1
            else:
                buf[nr] = s
                nr += 1
        for j in range(nr):
            idx[start + nl + j] = buf[j]

        # right pushed first so the left child gets the next id (preorder)
        st_start[sp] = start + nl
        st_end[sp] = end
        st_depth[sp] = depth + 1
        st_parent[sp] = node
        st_left[sp] = False
        sp += 1
        st_start[sp] = start
        st_end[sp] = start + nl
        st_depth[sp] = depth + 1
        st_parent[sp] = node
        st_left[sp] = True
        sp += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), count[:n_nodes].copy(), importance)


@njit(cache=True, nogil=True)
def _apply(X, feature, threshold, left, right, root):
    out = np.empty(X.shape[0], np.int64)
    for i in range(X.shape[0]):
        node = root
        while left[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = root + left[node]
            else:
                node = root + right[node]
        out[i] = node
    return out


@njit(cache=True, nogil=True)
def _predict_mean(X, feature, threshold, left, right, value, roots):
    n_out = value.shape[1]
    out = np.zeros((X.shape[0], n_out))
    n_trees = roots.shape[0]
    for i in range(X.shape[0]):
        for t in range(n_trees):
            root = roots[t]
            node = root
            while left[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = root + left[node]
                else:
                    node = root + right[node]
            for c in range(n_out):
                out[i, c] += value[node, c]
        for c in range(n_out):
            out[i, c] /= n_trees
    return out


# --------------------------------------------------------------------------
# trees


@dataclass(frozen=True, eq=False)
class Tree:
    """Preorder node arrays; ``left == -1`` marks a leaf. Child indices are
    local to the tree."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    importance: np.ndarray  # unnormalised impurity decrease per feature

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    def depth(self) -> int:
        def rec(k):
            return 0 if self.left[k] < 0 else 1 + max(rec(self.left[k]), rec(self.right[k]))
        return rec(0)

    def to_nested(self, node: int = 0) -> dict:
        if self.left[node] < 0:
            return {"value": self.value[node].tolist(), "n_samples": int(self.n_samples[node])}
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.threshold[node]),
            "left": self.to_nested(int(self.left[node])),
            "right": self.to_nested(int(self.right[node])),
        }

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        leaves = _apply(X, self.feature, self.threshold, self.left, self.right, 0)
        return self.value[leaves]


def fit_tree(X, Y, hp: ForestHyperparams, seed: int = 0, sample_idx=None) -> Tree:
    """Grow one CART tree on rows ``sample_idx`` (all rows when omitted)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if hp.max_features > X.shape[1]:
        raise ValueError(f"max_features={hp.max_features} exceeds {X.shape[1]} features")
    if sample_idx is None:
        sample_idx = np.arange(X.shape[0], dtype=np.int64)
    sample_idx = np.ascontiguousarray(sample_idx, dtype=np.int64)
    if sample_idx.size == 0:
        raise ValueError("cannot grow a tree on zero samples")
    depth = -1 if hp.max_depth is None else hp.max_depth
    out = _build_tree(X, Y, sample_idx, depth, hp.min_samples_split, hp.min_samples_leaf,
                      hp.max_features, np.uint64(seed % 2**64), ZERO_VARIANCE_RTOL)
    return Tree(*out)


def _grow_member(X, Y, hp: ForestHyperparams, t: int) -> Tree:
    rng = np.random.default_rng([hp.seed, t])
    n = X.shape[0]
    idx = rng.integers(0, n, n) if hp.bootstrap else np.arange(n)
    return fit_tree(X, Y, hp, int(rng.integers(2**63)), idx)


# --------------------------------------------------------------------------
# forest


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    return {"dtype": a.dtype.str, "shape": list(a.shape),
            "base64": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["base64"]), dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


@dataclass(eq=False)
class ForestModel:
    trees: list
    hyperparams: ForestHyperparams
    scaler: ScalerParams
    feature_importances: np.ndarray
    training: dict = field(default_factory=dict)

    def __post_init__(self):
        self._pack()

    def _pack(self):
        sizes = [t.n_nodes for t in self.trees]
        self._roots = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self._feature = np.concatenate([t.feature for t in self.trees])
        self._threshold = np.concatenate([t.threshold for t in self.trees])
        self._left = np.concatenate([t.left for t in self.trees])
        self._right = np.concatenate([t.right for t in self.trees])
        self._value = np.concatenate([t.value for t in self.trees])

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict_scaled(self, Z) -> np.ndarray:
        Z = np.ascontiguousarray(Z, dtype=np.float64)
        return _predict_mean(Z, self._feature, self._threshold, self._left, self._right,
                             self._value, self._roots)

    def predict(self, positions, currents) -> np.ndarray:
        X = np.hstack([np.atleast_2d(positions), np.atleast_2d(currents)])
        return self.predict_scaled(transform_features(X, self.scaler))

    def predict_trees(self, positions, currents) -> np.ndarray:
        """Per-tree predictions, ``(n_trees, N, 3)``."""
        X = np.hstack([np.atleast_2d(positions), np.atleast_2d(currents)])
        Z = transform_features(X, self.scaler)
        return np.stack([t.predict(Z) for t in self.trees])

    def to_dict(self) -> dict:
        hp = asdict(self.hyperparams)
        return {
            "format": FORMAT,
            "version": VERSION,
            "hyperparams": hp,
            "scaler": self.scaler.to_dict(),
            "feature_importances": self.feature_importances.tolist(),
            "training": self.training,
            "nodes": {
                "tree_offsets": self._roots.tolist(),
                "feature": _encode(self._feature),
                "threshold": _encode(self._threshold),
                "left": _encode(self._left),
                "right": _encode(self._right),
                "value": _encode(self._value),
                "n_samples": _encode(np.concatenate([t.n_samples for t in self.trees])),
                "tree_importance": _encode(np.stack([t.importance for t in self.trees])),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        if d.get("format") != FORMAT or d.get("version") != VERSION:
            raise ValueError(f"not an {FORMAT} v{VERSION} document")
        nd = d["nodes"]
        arrays = {k: _decode(nd[k]) for k in
                  ("feature", "threshold", "left", "right", "value", "n_samples", "tree_importance")}
        offsets = list(nd["tree_offsets"]) + [arrays["feature"].shape[0]]
        trees = []
        for t, (a, b) in enumerate(zip(offsets[:-1], offsets[1:])):
            trees.append(Tree(arrays["feature"][a:b], arrays["threshold"][a:b], arrays["left"][a:b],
                              arrays["right"][a:b], arrays["value"][a:b], arrays["n_samples"][a:b],
                              arrays["tree_importance"][t]))
        return cls(trees, ForestHyperparams(**d["hyperparams"]), ScalerParams.from_dict(d["scaler"]),
                   np.array(d["feature_importances"]), d.get("training", {}))

    def save(self, path) -> None:
        text = json.dumps(self.to_dict()) + "\n"
        if str(path).endswith(".gz"):
            # no name or mtime in the header: bytes depend only on content
            with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as f:
                f.write(text.encode())
        else:
            Path(path).write_text(text)

    @classmethod
    def load(cls, path) -> "ForestModel":
        if str(path).endswith(".gz"):
            with gzip.open(path, "rb") as f:
                return cls.from_dict(json.loads(f.read()))
        return cls.from_dict(json.loads(Path(path).read_text()))


def aggregate_importances(trees) -> np.ndarray:
    """Per-tree normalised impurity decrease, averaged and renormalised."""
    total = np.zeros_like(trees[0].importance)
    for t in trees:
        s = t.importance.sum()
        if s > 0:
            total += t.importance / s
    s = total.sum()
    return total / s if s > 0 else np.full_like(total, 1.0 / total.size)


def fit_forest_arrays(X, Y, hp: ForestHyperparams, threads: int = 1) -> list:
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if threads <= 1:
        return [_grow_member(X, Y, hp, t) for t in range(hp.n_trees)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda t: _grow_member(X, Y, hp, t), range(hp.n_trees)))


def fit_forest(train: Dataset, hp: ForestHyperparams = ForestHyperparams(), threads: int = 1) -> ForestModel:
    """Bagged forest on min-max scaled features; the scaler is embedded."""
    if len(train) == 0:
        raise DatasetError("empty training set")
    scaler = fit_scaler(train)
    Z = transform_features(train.features(), scaler)
    trees = fit_forest_arrays(Z, train.fields, hp, threads)
    return ForestModel(trees, hp, scaler, aggregate_importances(trees),
                       {"n_samples": len(train), "n_current_vectors": train.n_current_vectors})


def predict_forest(model: ForestModel, positions, currents) -> np.ndarray:
    return model.predict(positions, currents)


# --------------------------------------------------------------------------
# grid search

DEFAULT_GRID = {
    "n_trees": [10, 50, 100],
    "max_depth": [10, 20, 25, 30],
    "min_samples_split": [2, 10, 20],
    "max_features": [3, 4, 5],
    "min_samples_leaf": [1, 5, 15],
}


@dataclass(frozen=True)
class GridSearchSpec:
    grid: dict = field(default_factory=lambda: dict(DEFAULT_GRID))
    n_folds: int = 5
    seed: int = 0


def current_vector_folds(ids, n_folds: int, seed: int) -> list[np.ndarray]:
    ids = np.asarray(ids)
    perm = np.random.default_rng(seed).permutation(ids.size)
    return [np.sort(ids[f]) for f in np.array_split(perm, n_folds)]


def grid_search(train: Dataset, spec: GridSearchSpec = GridSearchSpec(),
                threads: int = 1) -> tuple[ForestHyperparams, list[dict]]:
    """K-fold CV over the grid; folds never split a current vector.

    Returns the hyperparameters with the lowest mean validation MSE (first in
    grid order on ties) and one table row per grid cell.
    """
    keys = list(spec.grid)
    cells = list(itertools.product(*(spec.grid[k] for k in keys)))
    if not cells or any(len(spec.grid[k]) == 0 for k in keys):
        raise ValueError("empty parameter grid")
    ids = train.current_vector_ids()
    if ids.size < spec.n_folds:
        raise DatasetError(f"{ids.size} current vectors cannot fill {spec.n_folds} folds")
    folds = current_vector_folds(ids, spec.n_folds, spec.seed)
    splits = []
    for k in range(spec.n_folds):
        held = np.isin(train.current_vector_id, folds[k])
        splits.append((train.subset(~held), train.subset(held)))

    table = []
    for cell in cells:
        hp = ForestHyperparams(seed=spec.seed, **dict(zip(keys, cell)))
        mses = []
        for tr, va in splits:
            model = fit_forest(tr, hp, threads)
            pred = model.predict(va.positions, va.currents)
            mses.append(float(np.mean((pred - va.fields) ** 2)))
        row = dict(zip(keys, cell))
        row.update({f"fold{k + 1}_mse": v for k, v in enumerate(mses)})
        row["mean_mse"] = float(np.mean(mses))
        table.append(row)
    best = min(range(len(table)), key=lambda j: (table[j]["mean_mse"], j))
    return ForestHyperparams(seed=spec.seed, **dict(zip(keys, cells[best]))), table
