"""
CART-style regression tree trainer used by the random forest sampler.

Splits are chosen greedily by variance reduction over a random subset of
``mtry`` features. Every node records its depth and parent so that the
tree can be cut at any depth to produce an ancestor partition.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from app.schemas import TreeConfig
from core.errors import DataError, DimensionError, ParameterError

logger = logging.getLogger(__name__)

LEAF = -1


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    reduction: float
    n_left: int


@dataclass(frozen=True)
class TreeModel:
    """
    Trained regression tree stored as flat node arrays.

    ``feature[i] == -1`` marks a leaf. Rows with ``x[feature] <= threshold``
    go left.
    """
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    parent: np.ndarray
    n_samples: np.ndarray
    leaf_assignment: np.ndarray
    max_depth: int
    n_features: int
    degenerate: bool = False

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == LEAF))

    @property
    def realized_depth(self) -> int:
        return int(self.depth.max())

    def route(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id for every row of X."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionError(
                f"Expected rows with {self.n_features} features, got shape {X.shape}"
            )
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] != LEAF
        while np.any(active):
            idx = np.nonzero(active)[0]
            cur = node[idx]
            go_left = X[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active[idx] = self.feature[node[idx]] != LEAF
        return node

    def ancestor_at_depth(self, nodes: np.ndarray, d: int) -> np.ndarray:
        """Ancestor of each node at depth d; nodes shallower than d map to themselves."""
        if d < 0:
            raise ParameterError(f"Depth must be non-negative, got {d}")
        anc = np.asarray(nodes, dtype=np.int64).copy()
        deeper = self.depth[anc] > d
        while np.any(deeper):
            anc[deeper] = self.parent[anc[deeper]]
            deeper = self.depth[anc] > d
        return anc


def default_max_depth(n: int) -> int:
    return max(1, math.ceil(math.log2(max(n, 2))))


def default_mtry(d: int) -> int:
    return max(1, math.ceil(d / 3))


def find_best_split(
    X: np.ndarray,
    y: np.ndarray,
    rows: np.ndarray,
    features: np.ndarray,
    min_leaf: int = 1,
) -> Optional[SplitCandidate]:
    """
    Greedy variance-reduction split over the given features.

    For each feature the rows are sorted once and the child sums of squares
    for every cut between distinct values come from prefix sums. Ties keep the
    first feature (in the given order) and the lowest threshold.

    Args:
        X: Feature matrix
        y: Targets
        rows: Row indices reaching the node
        features: Candidate feature indices
        min_leaf: Minimum rows on each side

    Returns:
        Best split, or None when no cut reduces the sum of squares
    """
    n = rows.size
    if n < 2 * min_leaf:
        return None
    ys_all = y[rows]
    ys_all = ys_all - ys_all.mean()
    sse_parent = float(np.dot(ys_all, ys_all))
    if sse_parent <= 0.0:
        return None

    best: Optional[SplitCandidate] = None
    for f in features:
        xs = X[rows, f]
        order = np.argsort(xs, kind="stable")
        xs_s = xs[order]
        ys_s = ys_all[order]

        cs = np.cumsum(ys_s)
        cs2 = np.cumsum(ys_s * ys_s)
        tot, tot2 = cs[-1], cs2[-1]
        csum, csum2 = cs[:-1], cs2[:-1]
        n_left = np.arange(1, n, dtype=np.float64)
        n_right = n - n_left
        sse = (csum2 - csum ** 2 / n_left) + ((tot2 - csum2) - (tot - csum) ** 2 / n_right)

        valid = xs_s[:-1] < xs_s[1:]
        valid[: min_leaf - 1] = False
        valid[n - min_leaf:] = False
        if not np.any(valid):
            continue
        sse = np.where(valid, sse, np.inf)
        i = int(np.argmin(sse))
        reduction = sse_parent - float(sse[i])
        if reduction <= 1e-12 * sse_parent:
            continue
        if best is None or reduction > best.reduction:
            threshold = 0.5 * (xs_s[i] + xs_s[i + 1])
            if not xs_s[i] <= threshold < xs_s[i + 1]:
                threshold = float(xs_s[i])
            best = SplitCandidate(int(f), float(threshold), reduction, i + 1)
    return best


def train_rf_tree(
    X: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    config: Optional[TreeConfig] = None,
) -> TreeModel:
    """
    Train one random forest regression tree.

    The split search uses a bootstrap resample when ``config.bootstrap`` is
    set, but ``leaf_assignment`` routes all N original rows through the tree.

    Args:
        X: N x D feature matrix
        y: Length-N targets
        rng: Random generator (bootstrap rows and per-node feature draws)
        config: Tree hyper-parameters

    Returns:
        TreeModel
    """
    config = config or TreeConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2:
        raise DimensionError(f"X must be 2-D, got shape {X.shape}")
    n, d = X.shape
    if n < 2 or d < 1:
        raise DataError(f"Tree training needs N >= 2 and D >= 1, got N={n}, D={d}")
    if y.size != n:
        raise DimensionError(f"y has {y.size} entries for {n} rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("Tree training data contains NaN or Inf")

    max_depth = config.max_depth if config.max_depth is not None else default_max_depth(n)
    mtry = min(d, config.mtry if config.mtry is not None else default_mtry(d))
    train_rows = rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)

    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    depth: List[int] = []
    parent: List[int] = []
    n_samples: List[int] = []

    def new_node(rows: np.ndarray, node_depth: int, node_parent: int) -> int:
        feature.append(LEAF)
        threshold.append(np.nan)
        left.append(LEAF)
        right.append(LEAF)
        depth.append(node_depth)
        parent.append(node_parent)
        n_samples.append(int(rows.size))
        return len(feature) - 1

    stack: List[Tuple[int, np.ndarray]] = [(new_node(train_rows, 0, LEAF), train_rows)]
    while stack:
        node, rows = stack.pop()
        if depth[node] >= max_depth:
            continue
        candidates = rng.choice(d, size=mtry, replace=False)
        split = find_best_split(X, y, rows, candidates, config.min_leaf)
        if split is None:
            continue
        goes_left = X[rows, split.feature] <= split.threshold
        left_rows, right_rows = rows[goes_left], rows[~goes_left]
        feature[node] = split.feature
        threshold[node] = split.threshold
        left[node] = new_node(left_rows, depth[node] + 1, node)
        right[node] = new_node(right_rows, depth[node] + 1, node)
        # right pushed first so the left subtree is expanded first
        stack.append((right[node], right_rows))
        stack.append((left[node], left_rows))

    degenerate = len(feature) == 1
    if degenerate:
        logger.warning(f"Tree has a single node (no variance-reducing split among {n} rows)")

    tree = TreeModel(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        depth=np.array(depth, dtype=np.int64),
        parent=np.array(parent, dtype=np.int64),
        n_samples=np.array(n_samples, dtype=np.int64),
        leaf_assignment=np.zeros(0, dtype=np.int64),
        max_depth=int(max_depth),
        n_features=d,
        degenerate=degenerate,
    )
    leaves = tree.route(X)
    return replace(tree, leaf_assignment=leaves)
