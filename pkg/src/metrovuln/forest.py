"""Random forest regression (bagged CART trees) and regression error measures.

Tree growth is compiled with numba.  Each tree is a pure function of its
bootstrap sample and its own random stream, spawned from the master seed by
tree index, so results do not depend on ``n_jobs``.
"""
import numpy as np
from joblib import Parallel, delayed
from numba import njit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y


@njit(cache=True, nogil=True)
def _grow_tree(X, y, rows, keys, mtry, min_node):
    n_rows = rows.shape[0]
    p = X.shape[1]
    max_nodes = 2 * n_rows + 1
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    value = np.zeros(max_nodes)
    n_node = np.zeros(max_nodes, dtype=np.int64)

    idx = rows.copy()
    stack_node = np.empty(max_nodes, dtype=np.int64)
    stack_lo = np.empty(max_nodes, dtype=np.int64)
    stack_hi = np.empty(max_nodes, dtype=np.int64)
    top = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n_rows
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        m = hi - lo
        ys = y[idx[lo:hi]]
        n_node[node] = m
        first = ys[0]
        constant = True
        for i in range(1, m):
            if ys[i] != first:
                constant = False
                break
        if constant:
            value[node] = first
            continue
        mean = ys.mean()
        value[node] = mean
        sse = 0.0
        for i in range(m):
            sse += (ys[i] - mean) ** 2
        if m < 2 * min_node:
            continue

        order_f = np.argsort(keys[node])
        best_sse = sse
        best_f = -1
        best_thr = 0.0
        for j in range(min(mtry, p)):
            f = order_f[j]
            xs_all = X[idx[lo:hi], f]
            order = np.argsort(xs_all, kind="mergesort")
            xs = xs_all[order]
            yo = ys[order]
            total = 0.0
            total_sq = 0.0
            for i in range(m):
                total += yo[i]
                total_sq += yo[i] * yo[i]
            s_l = 0.0
            sq_l = 0.0
            for i in range(1, m):
                s_l += yo[i - 1]
                sq_l += yo[i - 1] * yo[i - 1]
                if i < min_node or m - i < min_node:
                    continue
                if xs[i - 1] == xs[i]:
                    continue
                s_r = total - s_l
                sq_r = total_sq - sq_l
                child = (sq_l - s_l * s_l / i) + (sq_r - s_r * s_r / (m - i))
                if child < best_sse:
                    best_sse = child
                    best_f = f
                    best_thr = 0.5 * (xs[i - 1] + xs[i])
        # a split must strictly reduce within-node squared error
        if best_f < 0 or best_sse >= sse - 1e-12 * max(sse, 1.0):
            continue

        # partition idx[lo:hi] in place around the threshold
        i = lo
        k = hi - 1
        while i <= k:
            if X[idx[i], best_f] <= best_thr:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[k]
                idx[k] = tmp
                k -= 1
        n_left = i - lo
        if n_left < min_node or hi - i < min_node:
            continue
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack_node[top] = n_nodes + 1
        stack_lo[top] = i
        stack_hi[top] = hi
        top += 1
        stack_node[top] = n_nodes
        stack_lo[top] = lo
        stack_hi[top] = i
        top += 1
        n_nodes += 2
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes], n_node[:n_nodes])


@njit(cache=True, nogil=True)
def _predict_tree(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for r in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = value[node]
    return out


class RegressionTree:
    """Fitted tree arrays; ``feature == -1`` marks a leaf."""

    def __init__(self, feature, threshold, left, right, value, n_node, in_bag):
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.value = value
        self.n_node = n_node
        self.in_bag = in_bag

    @property
    def n_leaves(self):
        return int((self.feature < 0).sum())

    def leaf_sizes(self):
        return self.n_node[self.feature < 0]

    def predict(self, X):
        return _predict_tree(X, self.feature, self.threshold, self.left, self.right, self.value)


def _fit_one(X, y, seed, mtry, min_node, bootstrap):
    rng = np.random.default_rng(seed)
    n, p = X.shape
    rows = rng.integers(0, n, n) if bootstrap else np.arange(n)
    keys = rng.random((2 * n + 1, p))
    arrays = _grow_tree(X, y, rows.astype(np.int64), keys, mtry, min_node)
    in_bag = np.zeros(n, dtype=bool)
    in_bag[rows] = True
    return RegressionTree(*arrays, in_bag)


class RandomForestRegressor(RegressorMixin, BaseEstimator):
    """Bagged regression trees averaged with equal weight.

    Parameters
    ----------
    n_estimators : int
        Number of trees ``B``.
    max_features : int
        Features sampled (without replacement) as split candidates per node.
    min_samples_leaf : int
        Minimum (bootstrap) rows per leaf; nodes smaller than twice this are
        not split.
    bootstrap : bool
        Resample ``n`` rows with replacement per tree.
    random_state : int
    n_jobs : int
        Threads used for growing trees.  Does not affect the result.
    """

    def __init__(self, n_estimators=500, max_features=7, min_samples_leaf=2,
                 bootstrap=True, random_state=0, n_jobs=1):
        self.n_estimators = n_estimators
        self.max_features = max_features
        self.min_samples_leaf = min_samples_leaf
        self.bootstrap = bootstrap
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        n, p = X.shape
        if self.max_features > p:
            raise ValueError(f"max_features={self.max_features} exceeds feature count {p}")
        if n < 2 * self.min_samples_leaf:
            raise ValueError(f"need at least {2 * self.min_samples_leaf} rows, got {n}")
        seeds = np.random.SeedSequence(self.random_state).spawn(self.n_estimators)
        X = np.ascontiguousarray(X)
        y = np.ascontiguousarray(y)
        if self.n_jobs == 1:
            trees = [_fit_one(X, y, s, self.max_features, self.min_samples_leaf, self.bootstrap)
                     for s in seeds]
        else:
            trees = Parallel(n_jobs=self.n_jobs, prefer="threads")(
                delayed(_fit_one)(X, y, s, self.max_features, self.min_samples_leaf, self.bootstrap)
                for s in seeds)
        self.estimators_ = trees
        self.n_features_in_ = p
        self._oob(X, y)
        return self

    def _oob(self, X, y):
        total = np.zeros(len(y))
        count = np.zeros(len(y))
        for tree in self.estimators_:
            out = ~tree.in_bag
            if out.any():
                total[out] += tree.predict(X[out])
                count[out] += 1
        with np.errstate(invalid="ignore", divide="ignore"):
            self.oob_prediction_ = total / count
        ok = count > 0
        if ok.sum() < 2:
            self.oob_score_ = np.nan
            return
        resid = np.sum((y[ok] - self.oob_prediction_[ok]) ** 2)
        spread = np.sum((y[ok] - y[ok].mean()) ** 2)
        self.oob_score_ = 1.0 - resid / spread if spread > 0 else np.nan

    def tree_predictions(self, X):
        check_is_fitted(self, "estimators_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return np.vstack([t.predict(X) for t in self.estimators_])

    def predict(self, X):
        preds = self.tree_predictions(X)
        # centre on the first tree so identical trees average exactly
        base = preds[0]
        return base + (preds - base).mean(axis=0)


def eval_regression(y_true, y_pred):
    """MAE, RMSE, RAE and RSE; RAE/RSE are nan when ``y_true`` is constant."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape or len(y_true) < 2:
        raise ValueError("need two equal-length vectors with at least 2 values")
    e = y_pred - y_true
    dev = y_true - y_true.mean()
    abs_dev = np.abs(dev).sum()
    sq_dev = (dev ** 2).sum()
    return {
        "MAE": float(np.mean(np.abs(e))),
        "RMSE": float(np.sqrt(np.mean(e ** 2))),
        "RAE": float(np.abs(e).sum() / abs_dev) if abs_dev > 0 else float("nan"),
        "RSE": float((e ** 2).sum() / sq_dev) if sq_dev > 0 else float("nan"),
    }
