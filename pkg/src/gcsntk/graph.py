"""Graph data model, adjacency normalization and label encoding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateDegreeError, DimensionError, LabelRangeError


@dataclass(frozen=True)
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))

    def validate(self, n):
        seen = np.zeros(n, dtype=bool)
        for name in ("train", "val", "test"):
            idx = getattr(self, name)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DimensionError(f"{name} split has indices outside [0, {n})")
            if np.unique(idx).size != idx.size or seen[idx].any():
                raise DimensionError(f"{name} split overlaps another split or repeats indices")
            seen[idx] = True

    def as_dict(self):
        return {k: getattr(self, k).tolist() for k in ("train", "val", "test")}


@dataclass
class Graph:
    """Node-classification graph.

    ``adjacency`` is a symmetric 0/1 CSR matrix without self-loops.
    """

    features: np.ndarray
    adjacency: sp.csr_matrix
    labels: np.ndarray
    splits: SplitSpec
    num_classes: int | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] == 0 or self.features.shape[1] == 0:
            raise DimensionError(f"features must be a non-empty 2-D matrix, got {self.features.shape}")
        n = self.features.shape[0]
        adj = sp.csr_matrix(self.adjacency, dtype=np.float64)
        if adj.shape != (n, n):
            raise DimensionError(f"adjacency shape {adj.shape} does not match {n} nodes")
        adj.sum_duplicates()
        adj.sort_indices()
        self.adjacency = adj
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape != (n,):
            raise DimensionError(f"expected {n} labels, got {self.labels.shape[0]}")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise LabelRangeError(f"labels must lie in [0, {self.num_classes})")
        if not isinstance(self.splits, SplitSpec):
            self.splits = SplitSpec(**self.splits)
        self.splits.validate(n)

    @classmethod
    def from_edges(cls, features, edges, labels, splits, num_classes=None):
        """Build a graph from an edge list; edges are symmetrized and deduplicated."""
        n = np.asarray(features).shape[0]
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise DimensionError("edge endpoints out of range")
        edges = edges[edges[:, 0] != edges[:, 1]]
        a = sp.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n)).tocsr()
        a = ((a + a.T) > 0).astype(np.float64)
        return cls(features, a, labels, splits, num_classes)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def edge_list(self):
        """Upper-triangular edge pairs ``(u, v)`` with ``u < v``, sorted."""
        upper = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        return np.stack([upper.row[order], upper.col[order]], axis=1).astype(np.int64)


@dataclass
class CondensedGraph:
    """Synthetic graph: learnable features, fixed one-hot labels, optional adjacency logits."""

    x_s: np.ndarray
    y_s: np.ndarray
    adj_param: np.ndarray | None = None

    def __post_init__(self):
        self.x_s = np.ascontiguousarray(self.x_s, dtype=np.float64)
        self.y_s = np.ascontiguousarray(self.y_s, dtype=np.float64)
        m = self.x_s.shape[0]
        if m < 1 or self.y_s.shape[0] != m:
            raise DimensionError("condensed graph needs M >= 1 rows in both x_s and y_s")
        if not np.all((self.y_s == 0) | (self.y_s == 1)) or not np.all(self.y_s.sum(axis=1) == 1):
            raise DimensionError("y_s rows must be exact one-hot vectors")
        if self.adj_param is not None:
            self.adj_param = np.ascontiguousarray(self.adj_param, dtype=np.float64)
            if self.adj_param.shape != (m, m):
                raise DimensionError(f"adj_param must be {m}x{m}")
            if not np.array_equal(self.adj_param, self.adj_param.T):
                raise DimensionError("adj_param must be symmetric")

    @property
    def m(self):
        return self.x_s.shape[0]

    @property
    def labels(self):
        return self.y_s.argmax(axis=1)

    def copy(self):
        return CondensedGraph(
            self.x_s.copy(), self.y_s.copy(), None if self.adj_param is None else self.adj_param.copy()
        )


@dataclass
class Operand:
    """Features plus self-looped adjacency of one side of a kernel evaluation.

    ``cache`` memoizes per-configuration aggregation coefficients; it is
    filled by the kernel module.
    """

    x: np.ndarray
    adj_hat: sp.csr_matrix
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self):
        return self.x.shape[0]


@dataclass
class TargetView:
    """Preprocessed target graph as consumed by condensation and evaluation."""

    graph: Graph
    operand: Operand
    preprocess_rounds: int

    @property
    def labels(self):
        return self.graph.labels

    @property
    def splits(self):
        return self.graph.splits

    @property
    def num_classes(self):
        return self.graph.num_classes

    def targets(self, rows):
        return one_hot(self.graph.labels[rows], self.graph.num_classes)


def _check_square(a):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"adjacency must be square, got shape {a.shape}")


def add_self_loops(adjacency):
    """Return ``A + I`` as a new CSR matrix."""
    a = sp.csr_matrix(adjacency, dtype=np.float64)
    _check_square(a)
    out = (a + sp.identity(a.shape[0], format="csr", dtype=np.float64)).tocsr()
    out.sort_indices()
    return out


def sym_normalize(adj_hat):
    """``D^-1/2 Â D^-1/2`` with ``D`` the row sums of the self-looped adjacency."""
    a = sp.csr_matrix(adj_hat, dtype=np.float64)
    _check_square(a)
    deg = np.asarray(a.sum(axis=1)).ravel()
    if np.any(deg <= 0):
        bad = int(np.flatnonzero(deg <= 0)[0])
        raise DegenerateDegreeError(f"node {bad} has non-positive degree {deg[bad]}")
    inv = 1.0 / np.sqrt(deg)
    d = sp.diags(inv)
    out = (d @ a @ d).tocsr()
    out.sort_indices()
    return out


def graph_convolve(features, a_norm, rounds=1):
    """``Ã^r X``; ``rounds=0`` returns a copy of ``features``."""
    x = np.asarray(features, dtype=np.float64)
    if rounds < 0:
        raise ValueError("rounds must be non-negative")
    if a_norm.shape[1] != x.shape[0]:
        raise DimensionError(f"cannot propagate {x.shape} features with a {a_norm.shape} operator")
    out = x.copy()
    for _ in range(rounds):
        out = np.asarray(a_norm @ out)
    return out


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelRangeError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def prepare_target(graph, preprocess_rounds=1):
    """Transductive preprocessing: propagate features over the whole graph once.

    The kernel aggregates over ``A + I`` (unnormalized); only the feature
    propagation uses the symmetric normalization.
    """
    adj_hat = add_self_loops(graph.adjacency)
    x = graph_convolve(graph.features, sym_normalize(adj_hat), preprocess_rounds)
    return TargetView(graph, Operand(x, adj_hat), preprocess_rounds)
