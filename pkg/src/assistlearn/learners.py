"""Local supervised learners.

Each participant trains only on its own columns, so the learners here are
ordinary single-table regressors with one shared contract: a fit is a
deterministic function of (inputs, hyperparameters, seed), and prediction on
the training matrix reproduces the fitted values bit-for-bit. That second
property is what lets the engine's bookkeeping (summed predictions plus final
residual equals the labels) hold at float precision.

Kinds:

* ``least_squares`` / ``ridge`` - column-pivoted QR, SVD minimum-norm
  fallback on rank deficiency; the intercept is always fit and never
  penalized.
* ``regression_tree`` - exhaustive midpoint split search, ties broken toward
  the lowest feature index then the lowest threshold.
* ``gradient_boosting`` - mean start plus shrunken trees on residuals.
* ``dense_net`` - one tanh hidden layer trained by seeded mini-batch gradient
  descent on squared loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .core import derive_seed
from .errors import DimensionMismatch, NonFiniteLoss

LEARNER_KINDS = ("least_squares", "ridge", "regression_tree",
                 "gradient_boosting", "dense_net")

_DEFAULTS = {
    "least_squares": {"lam": 0.0},
    "ridge": {"lam": 0.0},
    "regression_tree": {"max_depth": 3, "min_leaf": 5},
    "gradient_boosting": {"stages": 100, "max_depth": 3, "min_leaf": 5,
                          "shrinkage": 0.1},
    "dense_net": {"hidden": 16, "rate": 0.01, "batch": 32, "epochs": 20,
                  "seed": 0},
}


@dataclass(frozen=True)
class LearnerSpec:
    """Learner kind plus hyperparameters, validated at construction."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        merged = dict(_DEFAULTS[self.kind])
        for key, val in self.params.items():
            if key not in merged:
                raise ValueError(f"{self.kind}: unknown parameter {key!r}")
            merged[key] = val
        _check_params(self.kind, merged)
        object.__setattr__(self, "params", merged)

    @classmethod
    def from_string(cls, text: str) -> "LearnerSpec":
        """Parse "kind" or "kind:key=value,key=value" (CLI form)."""
        kind, _, rest = text.partition(":")
        params = {}
        if rest:
            for item in rest.split(","):
                key, sep, raw = item.partition("=")
                if not sep or not key or not raw:
                    raise ValueError(f"bad learner parameter {item!r}")
                try:
                    params[key.strip()] = int(raw)
                except ValueError:
                    params[key.strip()] = float(raw)
        return cls(kind=kind.strip(), params=params)


def _check_params(kind: str, p: dict) -> None:
    if kind in ("least_squares", "ridge") and p["lam"] < 0:
        raise ValueError("lam must be >= 0")
    if kind == "regression_tree":
        if p["max_depth"] < 1:
            raise ValueError("max_depth must be >= 1")
        if p["min_leaf"] < 1:
            raise ValueError("min_leaf must be >= 1")
    if kind == "gradient_boosting":
        if p["stages"] < 1:
            raise ValueError("stages must be >= 1")
        if p["shrinkage"] <= 0:
            raise ValueError("shrinkage must be > 0")
        if p["max_depth"] < 1:
            raise ValueError("max_depth must be >= 1")
        if p["min_leaf"] < 1:
            raise ValueError("min_leaf must be >= 1")
    if kind == "dense_net":
        if p["hidden"] < 1:
            raise ValueError("hidden must be >= 1")
        if p["rate"] <= 0:
            raise ValueError("rate must be > 0")
        if p["batch"] < 1:
            raise ValueError("batch must be >= 1")
        if p["epochs"] < 0:
            raise ValueError("epochs must be >= 0")


# ---------------------------------------------------------------------------
# fitted models
# ---------------------------------------------------------------------------

@dataclass
class FittedModel:
    kind: str
    n: int
    p: int

    def _predict(self, X: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError


@dataclass
class LinearModel(FittedModel):
    coef: np.ndarray = None
    intercept: float = 0.0
    lam: float = 0.0

    def _predict(self, X):
        return X @ self.coef + self.intercept


@dataclass
class _Node:
    value: float
    feature: Optional[int] = None
    threshold: float = 0.0
    left: Optional["_Node"] = None
    right: Optional["_Node"] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass
class TreeModel(FittedModel):
    root: _Node = None
    max_depth: int = 0
    min_leaf: int = 0

    def _predict(self, X):
        return _tree_apply(self.root, X)


@dataclass
class BoostingModel(FittedModel):
    base_value: float = 0.0
    shrinkage: float = 0.0
    trees: tuple = ()
    training_residual: np.ndarray = None
    stage_train_mse: tuple = ()

    def _predict(self, X):
        # accumulate in the exact order used during fitting, so the residual
        # identity holds bit-for-bit on the training matrix
        out = np.full(X.shape[0], self.base_value, dtype=np.float64)
        for tree in self.trees:
            out += self.shrinkage * _tree_apply(tree, X)
        return out


@dataclass
class DenseNetModel(FittedModel):
    w_in: np.ndarray = None
    b_hidden: np.ndarray = None
    w_out: np.ndarray = None
    b_out: float = 0.0

    def _predict(self, X):
        return dense_forward(X, None, self.w_in, self.b_hidden,
                             self.w_out, self.b_out)


def predict(model: FittedModel, X) -> np.ndarray:
    """Evaluate a fitted model on rows of ``X`` (n x model.p)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch(f"X must be 2-D, got shape {X.shape}")
    if X.shape[1] != model.p:
        raise DimensionMismatch(
            f"model expects {model.p} columns, got {X.shape[1]}")
    return model._predict(X)


# ---------------------------------------------------------------------------
# least squares / ridge
# ---------------------------------------------------------------------------

def fit_least_squares(X, y, lam: float = 0.0) -> LinearModel:
    """Linear regression with an always-fit, never-penalized intercept.

    lam = 0: column-pivoted QR on the intercept-augmented design; on rank
    deficiency falls back to the SVD pseudo-inverse, i.e. the minimum-norm
    coefficient vector. lam > 0: ridge on centered data, solved as an
    augmented least-squares system, intercept recovered from the means.
    """
    X, y = _check_xy(X, y)
    if lam < 0:
        raise ValueError("lam must be >= 0")
    n, p = X.shape
    if lam == 0.0:
        A = np.column_stack([np.ones(n), X])
        q, r, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        ncols = A.shape[1]
        rank = 0
        if diag.size and diag[0] > 0.0:
            tol = diag[0] * max(n, ncols) * np.finfo(np.float64).eps
            rank = int(np.count_nonzero(diag > tol))
        if rank == ncols:
            sol = scipy.linalg.solve_triangular(r, q.T @ y)
            full = np.empty(ncols)
            full[piv] = sol
        else:
            full, *_ = np.linalg.lstsq(A, y, rcond=None)
        intercept, coef = float(full[0]), full[1:]
    else:
        x_mean = X.mean(axis=0)
        y_mean = float(y.mean())
        Xc = X - x_mean
        aug = np.vstack([Xc, math.sqrt(lam) * np.eye(p)])
        rhs = np.concatenate([y - y_mean, np.zeros(p)])
        coef, *_ = np.linalg.lstsq(aug, rhs, rcond=None)
        intercept = y_mean - float(x_mean @ coef)
    return LinearModel(kind="least_squares", n=n, p=p, coef=coef,
                       intercept=intercept, lam=lam)


# ---------------------------------------------------------------------------
# regression tree
# ---------------------------------------------------------------------------

def fit_regression_tree(X, y, max_depth: int = 3,
                        min_leaf: int = 5) -> TreeModel:
    """CART-style regression tree, squared error, exhaustive split search.

    Candidate thresholds are midpoints between consecutive distinct sorted
    values. The split maximizing the sum-of-squares reduction wins; exact
    ties go to the lowest feature index, then the lowest threshold. A zero
    reduction still splits (two constant half-planes can need it); a pure or
    too-small node becomes a leaf holding the mean.
    """
    X, y = _check_xy(X, y)
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    root = _grow_tree(X, y, np.arange(len(y)), 0, max_depth, min_leaf)
    return TreeModel(kind="regression_tree", n=X.shape[0], p=X.shape[1],
                     root=root, max_depth=max_depth, min_leaf=min_leaf)


def _grow_tree(X, y, idx, depth, max_depth, min_leaf) -> _Node:
    ys = y[idx]
    mean = float(ys.mean())
    if depth >= max_depth or len(idx) < 2 * min_leaf or np.all(ys == ys[0]):
        return _Node(value=mean)
    found = _best_split(X[idx], ys, min_leaf)
    if found is None:
        return _Node(value=mean)
    feat, thresh = found
    mask = X[idx, feat] <= thresh
    left = _grow_tree(X, y, idx[mask], depth + 1, max_depth, min_leaf)
    right = _grow_tree(X, y, idx[~mask], depth + 1, max_depth, min_leaf)
    return _Node(value=mean, feature=feat, threshold=thresh,
                 left=left, right=right)


def _best_split(Xs, ys, min_leaf):
    n = ys.shape[0]
    parent = float(np.sum((ys - ys.mean()) ** 2))
    best_gain = -np.inf
    best = None
    for feat in range(Xs.shape[1]):
        col = Xs[:, feat]
        order = np.argsort(col, kind="stable")
        vs = col[order]
        yo = ys[order]
        cuts = np.nonzero(vs[1:] > vs[:-1])[0] + 1   # left block sizes
        if cuts.size == 0:
            continue
        cuts = cuts[(cuts >= min_leaf) & (n - cuts >= min_leaf)]
        if cuts.size == 0:
            continue
        csum = np.cumsum(yo)
        csq = np.cumsum(yo * yo)
        n_l = cuts.astype(np.float64)
        n_r = n - n_l
        s_l = csum[cuts - 1]
        q_l = csq[cuts - 1]
        sse = (q_l - s_l * s_l / n_l) \
            + ((csq[-1] - q_l) - (csum[-1] - s_l) ** 2 / n_r)
        gains = parent - sse
        j = int(np.argmax(gains))        # first max = lowest threshold
        if gains[j] > best_gain:         # strict > keeps lowest feature
            best_gain = float(gains[j])
            best = (feat, float((vs[cuts[j] - 1] + vs[cuts[j]]) / 2.0))
    return best


def _tree_apply(root: _Node, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0], dtype=np.float64)
    stack = [(root, np.arange(X.shape[0]))]
    while stack:
        node, idx = stack.pop()
        if idx.size == 0:
            continue
        if node.is_leaf:
            out[idx] = node.value
        else:
            mask = X[idx, node.feature] <= node.threshold
            stack.append((node.left, idx[mask]))
            stack.append((node.right, idx[~mask]))
    return out


# ---------------------------------------------------------------------------
# gradient boosting
# ---------------------------------------------------------------------------

def fit_gradient_boosting(X, y, stages: int = 100, max_depth: int = 3,
                          min_leaf: int = 5,
                          shrinkage: float = 0.1) -> BoostingModel:
    """Mean start, then ``stages`` shrunken trees fit to current residuals.

    The running prediction is kept explicitly and every residual is computed
    as y minus that accumulator, so re-predicting on the training matrix
    reproduces the recorded residuals bit-for-bit. Training MSE per stage is
    recorded; with shrinkage in (0, 2] it never increases.
    """
    X, y = _check_xy(X, y)
    if stages < 1:
        raise ValueError("stages must be >= 1")
    if shrinkage < 0:
        raise ValueError("shrinkage must be >= 0")
    base = float(y.mean())
    pred = np.full(y.shape[0], base, dtype=np.float64)
    trees = []
    mses = []
    for _ in range(stages):
        resid = y - pred
        tree = fit_regression_tree(X, resid, max_depth=max_depth,
                                   min_leaf=min_leaf)
        pred += shrinkage * _tree_apply(tree.root, X)
        trees.append(tree.root)
        resid = y - pred
        mses.append(float(np.mean(resid * resid)))
    return BoostingModel(kind="gradient_boosting", n=X.shape[0], p=X.shape[1],
                         base_value=base, shrinkage=shrinkage,
                         trees=tuple(trees), training_residual=y - pred,
                         stage_train_mse=tuple(mses))


# ---------------------------------------------------------------------------
# dense net (one tanh hidden layer) - shared core also drives the
# split-network engine, which adds a partner's pre-activation as an offset
# ---------------------------------------------------------------------------

def dense_init(p: int, hidden: int, seed: int):
    """Seeded symmetric-uniform init: weights ±1/sqrt(fan_in), zero biases.

    Input weights are drawn first, row-major, then output weights; a caller
    holding only a block of input rows can reproduce its slice by drawing the
    full matrix and keeping its rows.
    """
    rng = np.random.default_rng(seed)
    lim_in = 1.0 / math.sqrt(p) if p > 0 else 0.0
    w_in = rng.uniform(-lim_in, lim_in, size=(p, hidden))
    b_hidden = np.zeros(hidden)
    lim_out = 1.0 / math.sqrt(hidden)
    w_out = rng.uniform(-lim_out, lim_out, size=hidden)
    return w_in, b_hidden, w_out, 0.0


def dense_forward(X, offset, w_in, b_hidden, w_out, b_out) -> np.ndarray:
    """Network output; ``offset`` is an optional additive pre-activation."""
    z = X @ w_in + b_hidden
    if offset is not None:
        z = z + offset
    return np.tanh(z) @ w_out + b_out


def dense_loss_and_grads(X, offset, y, w_in, b_hidden, w_out, b_out):
    """Mean-squared loss and analytic gradients for one parameter block set.

    Gradients flow to (w_in, b_hidden, w_out, b_out) only; ``offset`` is a
    constant. Central finite differences with step 1e-5 agree to a relative
    1e-4, which the tests pin down.
    """
    n = y.shape[0]
    z = X @ w_in + b_hidden
    if offset is not None:
        z = z + offset
    h = np.tanh(z)
    pred = h @ w_out + b_out
    err = pred - y
    loss = float(np.mean(err * err))
    d = (2.0 / n) * err
    g_wout = h.T @ d
    g_bout = float(d.sum())
    dz = np.outer(d, w_out) * (1.0 - h * h)
    g_win = X.T @ dz
    g_bhid = dz.sum(axis=0)
    return loss, (g_win, g_bhid, g_wout, g_bout)


def _epoch_order(n: int, batch: int, seed: int, epoch: int) -> np.ndarray:
    # full-batch epochs skip the shuffle: one batch sees every row anyway,
    # and a stable order keeps mirrored updates bit-identical
    if batch >= n:
        return np.arange(n)
    return np.random.default_rng(derive_seed(seed, "epoch", epoch)).permutation(n)


def sgd_epochs(X, offset, y, params, rate, batch, epochs, seed,
               first_epoch: int = 0):
    """Run seeded mini-batch SGD epochs; returns updated parameter copies.

    ``first_epoch`` positions the batch-shuffle stream, so a training run cut
    into round-sized slices consumes the identical stream as one uncut run.
    Raises NonFiniteLoss the moment a batch loss stops being finite.
    """
    w_in, b_hidden, w_out, b_out = (np.array(params[0], dtype=np.float64),
                                    np.array(params[1], dtype=np.float64),
                                    np.array(params[2], dtype=np.float64),
                                    float(params[3]))
    n = y.shape[0]
    for e in range(first_epoch, first_epoch + epochs):
        order = _epoch_order(n, batch, seed, e)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb = X[idx]
            ob = offset[idx] if offset is not None else None
            loss, (g_win, g_bhid, g_wout, g_bout) = dense_loss_and_grads(
                xb, ob, y[idx], w_in, b_hidden, w_out, b_out)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss diverged at epoch {e}")
            w_in -= rate * g_win
            b_hidden -= rate * g_bhid
            w_out -= rate * g_wout
            b_out -= rate * g_bout
    return w_in, b_hidden, w_out, b_out


def fit_dense_net(X, y, hidden: int = 16, epochs: int = 20,
                  rate: float = 0.01, batch: int = 32,
                  seed: int = 0) -> DenseNetModel:
    """One-hidden-layer tanh net trained by seeded mini-batch SGD."""
    X, y = _check_xy(X, y)
    if hidden < 1:
        raise ValueError("hidden must be >= 1")
    if rate <= 0:
        raise ValueError("rate must be > 0")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    params = dense_init(X.shape[1], hidden, seed)
    params = sgd_epochs(X, None, y, params, rate, batch, epochs, seed)
    w_in, b_hidden, w_out, b_out = params
    if not (np.all(np.isfinite(w_in)) and np.all(np.isfinite(b_hidden))
            and np.all(np.isfinite(w_out)) and math.isfinite(b_out)):
        raise NonFiniteLoss("parameters diverged")
    return DenseNetModel(kind="dense_net", n=X.shape[0], p=X.shape[1],
                         w_in=w_in, b_hidden=b_hidden, w_out=w_out,
                         b_out=b_out)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def fit_learner(spec: LearnerSpec, X, y, seed: int | None = None) -> FittedModel:
    """Fit by spec. ``seed`` overrides the spec seed for stochastic kinds."""
    p = spec.params
    if spec.kind in ("least_squares", "ridge"):
        return fit_least_squares(X, y, lam=p["lam"])
    if spec.kind == "regression_tree":
        return fit_regression_tree(X, y, max_depth=p["max_depth"],
                                   min_leaf=p["min_leaf"])
    if spec.kind == "gradient_boosting":
        return fit_gradient_boosting(X, y, stages=p["stages"],
                                     max_depth=p["max_depth"],
                                     min_leaf=p["min_leaf"],
                                     shrinkage=p["shrinkage"])
    return fit_dense_net(X, y, hidden=p["hidden"], epochs=p["epochs"],
                         rate=p["rate"], batch=p["batch"],
                         seed=p["seed"] if seed is None else seed)


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch(f"X must be 2-D, got shape {X.shape}")
    if y.ndim != 1:
        raise DimensionMismatch(f"y must be 1-D, got shape {y.shape}")
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch(
            f"{X.shape[0]} feature rows vs {y.shape[0]} labels")
    if X.shape[0] < 1:
        raise DimensionMismatch("need at least one row")
    return X, y
