"""Small gradient-boosted regression trees with squared and pinball losses.

Trees are grown best-first (largest gain first) up to ``num_leaves`` and
``max_depth`` with exact greedy split search over the sorted unique values of
each feature. Split structure is learned on a per-tree row/column subsample;
leaf values are then refit on every training row that lands in the leaf, which
keeps the full training loss non-increasing from one round to the next.
"""
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numba import njit

from .errors import ConfigError, NumericalError

logger = logging.getLogger(__name__)

FORMAT_TAG = "rankguard-gbt"


@dataclass(frozen=True)
class GbtConfig:
    n_estimators: int = 50
    max_depth: int = 3
    num_leaves: int = 8
    min_child_samples: int = 50
    learning_rate: float = 0.05
    row_subsample: float = 0.8
    col_subsample: float = 0.8
    loss: str = "squared"  # or "pinball"
    quantile: float = 0.5  # pinball level
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("squared", "pinball"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.num_leaves > 2 ** self.max_depth:
            raise ConfigError("num_leaves must not exceed 2**max_depth")
        if self.num_leaves < 1 or self.max_depth < 0 or self.n_estimators < 0:
            raise ConfigError("tree size parameters must be positive")
        if self.min_child_samples < 1:
            raise ConfigError("min_child_samples must be >= 1")
        if not (0 < self.row_subsample <= 1 and 0 < self.col_subsample <= 1):
            raise ConfigError("subsample fractions must lie in (0, 1]")
        if not 0 < self.quantile < 1:
            raise ConfigError("pinball quantile must lie in (0, 1)")


@dataclass
class Tree:
    # node arrays; feature == -1 marks a leaf
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    default_left: np.ndarray
    value: np.ndarray

    @property
    def n_splits(self):
        return int(np.sum(self.feature >= 0))

    def apply(self, X):
        """Leaf node index reached by each row of ``X``."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            r = rows[internal]
            n = node[internal]
            x = X[r, f[internal]]
            go_left = np.where(np.isnan(x), self.default_left[n], x <= self.threshold[n])
            node[internal] = np.where(go_left, self.left[n], self.right[n])

    def output(self, X):
        return self.value[self.apply(X)]

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "default_left": self.default_left.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            default_left=np.asarray(d["default_left"], dtype=bool),
            value=np.asarray(d["value"], dtype=float),
        )


@dataclass
class GbtModel:
    feature_names: list
    base_prediction: float
    learning_rate: float
    loss: str
    quantile: float
    trees: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    # cached fit-time predictions on the training rows; not serialized
    train_predictions: np.ndarray = field(default=None, repr=False, compare=False)

    def to_json(self):
        payload = {
            "format": FORMAT_TAG,
            "version": 1,
            "feature_names": list(self.feature_names),
            "base_prediction": self.base_prediction,
            "learning_rate": self.learning_rate,
            "loss": self.loss,
            "quantile": self.quantile,
            "train_loss": list(self.train_loss),
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.get("format") != FORMAT_TAG:
            raise ValueError("not a serialized gbt model")
        return cls(
            feature_names=d["feature_names"],
            base_prediction=d["base_prediction"],
            learning_rate=d["learning_rate"],
            loss=d["loss"],
            quantile=d["quantile"],
            trees=[Tree.from_dict(t) for t in d["trees"]],
            train_loss=d["train_loss"],
        )


def _loss(y, pred, loss, q):
    r = y - pred
    if loss == "squared":
        return float(np.mean(r * r))
    return float(np.mean(np.maximum(q * r, (q - 1.0) * r)))


def _neg_gradient(y, pred, loss, q):
    r = y - pred
    if loss == "squared":
        return r
    return np.where(r > 0, q, np.where(r < 0, q - 1.0, 0.0))


def _optimal_constant(r, loss, q):
    if loss == "squared":
        return float(np.mean(r))
    # an exact pinball minimizer is the ceil(n*q)-th order statistic
    return float(np.quantile(r, q, method="inverted_cdf"))


@njit(cache=True)
def _scan_feature(rows, x, grad, g_total, min_child):
    """Exact greedy scan of one feature for one node.

    ``rows`` holds the node's rows sorted by ``x`` with NaN last. Boundaries
    between consecutive distinct values are scored for missing-right then
    missing-left routing; strict improvement keeps the lowest threshold on
    ties. Returns (gain, lo, hi, default_left, left_count, n_miss) with
    gain = -inf when no admissible split exists.
    """
    n_all = rows.size
    g_miss = 0.0
    n_miss = 0
    for k in range(n_all - 1, -1, -1):
        i = rows[k]
        if not np.isnan(x[i]):
            break
        g_miss += grad[i]
        n_miss += 1
    parent = g_total * g_total / n_all
    best_gain = -np.inf
    best_lo = 0.0
    best_hi = 0.0
    best_left = False
    best_count = 0
    gl = 0.0
    prev = 0.0
    for k in range(n_all - n_miss):
        i = rows[k]
        xi = x[i]
        if k > 0 and xi > prev:
            for dl in range(2):
                lcount = k + n_miss * dl
                lsum = gl + g_miss * dl
                rcount = n_all - lcount
                if lcount >= min_child and rcount >= min_child:
                    rsum = g_total - lsum
                    gain = lsum * lsum / lcount + rsum * rsum / rcount - parent
                    if gain > best_gain:
                        best_gain = gain
                        best_lo = prev
                        best_hi = xi
                        best_left = dl == 1
                        best_count = k
        gl += grad[i]
        prev = xi
    return best_gain, best_lo, best_hi, best_left, best_count, n_miss


def _best_split(rows, x, grad, g_total, min_child):
    """Best split of one node on one feature: (gain, threshold, default_left) or None."""
    gain, lo, hi, dleft, count, n_miss = _scan_feature(rows, x, grad, g_total, min_child)
    if not np.isfinite(gain):
        return None
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    if n_miss == 0:
        # nothing to learn from: send unseen missing values to the larger child
        dleft = count >= rows.size - count
    return float(gain), float(thr), bool(dleft)


def _grow_tree(XT, grad, rows, cols, cfg, orders):
    """Best-first tree growth on the subsample ``rows`` restricted to ``cols``.

    ``XT`` is the feature-major copy of the design matrix and ``orders[f]``
    sorts all training rows by feature f (NaN last). Each node keeps, per
    feature, its own rows in that sorted order; a split partitions the lists
    stably so children stay sorted.
    """
    in_root = np.zeros(XT.shape[1], dtype=bool)
    in_root[rows] = True
    feature, threshold, left, right, default_left, depth = [-1], [0.0], [-1], [-1], [False], [0]
    members = [{f: orders[f][in_root[orders[f]]] for f in cols}]
    first = cols[0]

    def search(node):
        lists = members[node]
        r = lists[first]
        if depth[node] >= cfg.max_depth or r.size < 2 * cfg.min_child_samples:
            return None
        g = grad[r]
        g_total = float(g.sum())
        best = None
        for f in cols:
            res = _best_split(lists[f], XT[f], grad, g_total, cfg.min_child_samples)
            if res is None:
                continue
            if best is None or res[0] > best[0]:
                best = (res[0], f, res[1], res[2])
        if best is None or not best[0] > 1e-12 * max(1.0, float(g @ g)):
            return None
        return best

    candidates = {0: search(0)}
    n_leaves = 1
    while n_leaves < cfg.num_leaves:
        ready = [(c[0], -node, node) for node, c in candidates.items() if c is not None]
        if not ready:
            break
        _, _, node = max(ready)
        gain, f, thr, dleft = candidates.pop(node)
        x = XT[f]
        go_left = np.where(np.isnan(x), dleft, x <= thr)
        lists = members[node]
        members[node] = None
        left_lists, right_lists = {}, {}
        for c, lst in lists.items():
            side = go_left[lst]
            left_lists[c] = lst[side]
            right_lists[c] = lst[~side]
        for child in (left_lists, right_lists):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            default_left.append(False)
            depth.append(depth[node] + 1)
            members.append(child)
        li, ri = len(feature) - 2, len(feature) - 1
        feature[node], threshold[node] = int(f), float(thr)
        left[node], right[node], default_left[node] = li, ri, bool(dleft)
        candidates[li] = search(li)
        candidates[ri] = search(ri)
        n_leaves += 1
    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        default_left=np.asarray(default_left, dtype=bool),
        value=np.zeros(len(feature)),
    )


def _as_matrix(X, feature_names=None):
    if isinstance(X, pd.DataFrame):
        names = list(X.columns) if feature_names is None else list(feature_names)
        cols = [X[c].to_numpy(dtype=float) if c in X.columns else np.full(len(X), np.nan) for c in names]
        return np.column_stack(cols) if cols else np.empty((len(X), 0)), names
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ValueError("feature_names length does not match the matrix")
    return X, names


def fit(X, y, config=GbtConfig(), feature_names=None):
    """Fit a boosted ensemble; ``X`` is an array or DataFrame of features."""
    X, names = _as_matrix(X, feature_names)
    y = np.asarray(y, dtype=float)
    if y.shape[0] != X.shape[0]:
        raise ValueError("X and y row counts differ")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    if y.size == 0:
        raise ValueError("cannot fit on zero rows")
    cfg = config
    base = _optimal_constant(y, cfg.loss, cfg.quantile)
    model = GbtModel(names, base, cfg.learning_rate, cfg.loss, cfg.quantile)
    pred = np.full(y.size, base)
    model.train_loss.append(_loss(y, pred, cfg.loss, cfg.quantile))
    if y.size < 2 * cfg.min_child_samples:
        warnings.warn(
            f"{y.size} rows < 2*min_child_samples; returning a single-leaf model", stacklevel=2
        )
        model.train_predictions = pred
        return model

    rng = np.random.default_rng(cfg.seed)
    n, p = X.shape
    XT = np.ascontiguousarray(X.T)
    orders = [np.argsort(XT[f], kind="mergesort") for f in range(p)]
    n_rows = max(1, int(round(cfg.row_subsample * n)))
    n_cols = max(1, int(round(cfg.col_subsample * p)))
    for _ in range(cfg.n_estimators):
        rows = np.sort(rng.choice(n, size=n_rows, replace=False)) if n_rows < n else np.arange(n)
        cols = np.sort(rng.choice(p, size=n_cols, replace=False)) if n_cols < p else np.arange(p)
        grad = _neg_gradient(y, pred, cfg.loss, cfg.quantile)
        tree = _grow_tree(XT, grad, rows, cols, cfg, orders)
        if tree.n_splits == 0:
            continue
        leaf = tree.apply(X)
        resid = y - pred
        for node in np.flatnonzero(tree.feature < 0):
            in_leaf = leaf == node
            tree.value[node] = _optimal_constant(resid[in_leaf], cfg.loss, cfg.quantile)
        new_pred = pred + cfg.learning_rate * tree.value[leaf]
        new_loss = _loss(y, new_pred, cfg.loss, cfg.quantile)
        prev = model.train_loss[-1]
        if new_loss > prev + 1e-12 * max(1.0, abs(prev)):
            raise NumericalError(f"training loss increased from {prev} to {new_loss}")
        model.trees.append(tree)
        model.train_loss.append(new_loss)
        pred = new_pred
    model.train_predictions = pred
    return model


def predict(model, X):
    """base + learning_rate * sum of tree outputs.

    A DataFrame is aligned to the model's feature names; absent columns are
    treated as missing and follow each split's default branch.
    """
    X, _ = _as_matrix(X, model.feature_names if isinstance(X, pd.DataFrame) else None)
    if X.shape[1] != len(model.feature_names):
        raise ValueError("feature count does not match the model")
    pred = np.full(X.shape[0], model.base_prediction)
    for tree in model.trees:
        pred = pred + model.learning_rate * tree.output(X)
    return pred


def feature_importance(model):
    """Split counts per feature name (features never split on are omitted)."""
    counts = {}
    for tree in model.trees:
        for f in tree.feature[tree.feature >= 0]:
            name = model.feature_names[int(f)]
            counts[name] = counts.get(name, 0) + 1
    return counts
