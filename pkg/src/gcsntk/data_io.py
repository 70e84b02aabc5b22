"""Graph bundles on disk, synthetic block-model graphs and coreset baselines.

Bundle layout (one directory)::

    meta.json     {"format_version", "n", "d", "C", "feature_dtype", ...}
    features.bin  b"GCBNDL01" + n*d little-endian float64, row-major
    edges.tsv     "u\\tv" per line, u < v, 0-indexed
    labels.tsv    one integer per line
    splits.json   {"train": [...], "val": [...], "test": [...]}

Condensed graphs use the same layout with every node in ``train``; a learned
adjacency is stored as ``adj_param.bin`` (same binary layout, M x M logits).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .condense import class_budgets, sample_rows
from .errors import (
    BundleError,
    ConfigError,
    CountMismatchError,
    IndexRangeError,
    InsufficientNodesError,
    MagicMismatchError,
)
from .graph import CondensedGraph, Graph, SplitSpec, TargetView, one_hot

MAGIC = b"GCBNDL01"
FORMAT_VERSION = 1
FEATURE_DTYPE = "float64-le"


# -- binary matrices ---------------------------------------------------------


def write_matrix(path, mat):
    mat = np.ascontiguousarray(mat, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(mat.tobytes(order="C"))


def read_matrix(path, rows, cols):
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise MagicMismatchError(path, f"bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    body = raw[len(MAGIC) :]
    want = rows * cols * 8
    if len(body) != want:
        raise CountMismatchError(path, f"holds {len(body)} bytes of values, expected {want} ({rows}x{cols})")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


# -- bundles -----------------------------------------------------------------


def _read_meta(path):
    meta_path = Path(path) / "meta.json"
    if not meta_path.is_file():
        raise BundleError(meta_path, "missing bundle metadata")
    try:
        meta = json.loads(meta_path.read_text())
        for key in ("n", "d", "C"):
            meta[key] = int(meta[key])
    except (ValueError, KeyError) as exc:
        raise BundleError(meta_path, f"malformed metadata: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise BundleError(meta_path, f"unsupported format version {meta.get('format_version')!r}")
    return meta


def _read_ints(path):
    path = Path(path)
    try:
        return [int(x) for x in path.read_text().split()]
    except ValueError as exc:
        raise BundleError(path, f"non-integer entry: {exc}") from None


def _read_edges(path, n):
    path = Path(path)
    edges = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise BundleError(path, f"line {lineno}: expected 'u<TAB>v'")
        u, v = int(parts[0]), int(parts[1])
        if not (0 <= u < n and 0 <= v < n):
            raise IndexRangeError(path, f"line {lineno}: edge ({u}, {v}) references a node outside [0, {n})")
        edges.append((u, v))
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def _write_common(path, features, labels, edges, splits, num_classes, extra_meta):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, d = features.shape
    meta = {
        "format_version": FORMAT_VERSION,
        "n": int(n),
        "d": int(d),
        "C": int(num_classes),
        "feature_dtype": FEATURE_DTYPE,
        "num_edges": int(len(edges)),
    }
    meta.update(extra_meta or {})
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_matrix(path / "features.bin", features)
    (path / "edges.tsv").write_text("".join(f"{u}\t{v}\n" for u, v in edges))
    (path / "labels.tsv").write_text("".join(f"{int(y)}\n" for y in labels))
    (path / "splits.json").write_text(json.dumps(splits) + "\n")
    return path


def save_bundle(graph: Graph, path, extra_meta=None):
    return _write_common(
        path, graph.features, graph.labels, graph.edge_list(), graph.splits.as_dict(), graph.num_classes, extra_meta
    )


def load_bundle(path) -> Graph:
    path = Path(path)
    if not path.is_dir():
        raise BundleError(path, "bundle directory does not exist")
    meta = _read_meta(path)
    n, d, c = meta["n"], meta["d"], meta["C"]
    features = read_matrix(path / "features.bin", n, d)
    labels = np.asarray(_read_ints(path / "labels.tsv"), dtype=np.int64)
    if labels.size != n:
        raise CountMismatchError(path / "labels.tsv", f"{labels.size} labels for {n} nodes")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexRangeError(path / "labels.tsv", f"labels must lie in [0, {c})")
    edges = _read_edges(path / "edges.tsv", n)
    splits_path = path / "splits.json"
    try:
        raw = json.loads(splits_path.read_text())
        splits = SplitSpec(raw["train"], raw["val"], raw["test"])
    except (OSError, ValueError, KeyError) as exc:
        raise BundleError(splits_path, f"malformed splits: {exc}") from None
    for name in ("train", "val", "test"):
        idx = getattr(splits, name)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexRangeError(splits_path, f"{name} split references a node outside [0, {n})")
    try:
        return Graph.from_edges(features, edges, labels, splits, num_classes=c)
    except ValueError as exc:
        raise BundleError(path, str(exc)) from None


def bundle_meta(path):
    return _read_meta(path)


def save_condensed(condensed: CondensedGraph, path, extra_meta=None):
    m = condensed.m
    meta = {"condensed": True, "variant": "X" if condensed.adj_param is None else "XA"}
    meta.update(extra_meta or {})
    splits = {"train": list(range(m)), "val": [], "test": []}
    path = _write_common(
        path, condensed.x_s, condensed.labels, [], splits, condensed.y_s.shape[1], meta
    )
    if condensed.adj_param is not None:
        write_matrix(Path(path) / "adj_param.bin", condensed.adj_param)
    return path


def load_condensed(path) -> CondensedGraph:
    path = Path(path)
    if not path.is_dir():
        raise BundleError(path, "bundle directory does not exist")
    meta = _read_meta(path)
    n, d, c = meta["n"], meta["d"], meta["C"]
    x = read_matrix(path / "features.bin", n, d)
    labels = np.asarray(_read_ints(path / "labels.tsv"), dtype=np.int64)
    if labels.size != n:
        raise CountMismatchError(path / "labels.tsv", f"{labels.size} labels for {n} nodes")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexRangeError(path / "labels.tsv", f"labels must lie in [0, {c})")
    adj = read_matrix(path / "adj_param.bin", n, n) if (path / "adj_param.bin").exists() else None
    return CondensedGraph(x, one_hot(labels, c), adj)


# -- synthetic graphs --------------------------------------------------------


@dataclass(frozen=True)
class SBMSpec:
    block_sizes: tuple = (50, 50)
    p_in: float = 0.5
    p_out: float = 0.05
    d: int = 8
    mu: float = 1.0
    sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "block_sizes", tuple(int(b) for b in self.block_sizes))
        if not self.block_sizes or min(self.block_sizes) < 1:
            raise ConfigError("block sizes must be >= 1")
        if not (0 <= self.p_in <= 1 and 0 <= self.p_out <= 1):
            raise ConfigError("edge probabilities must lie in [0, 1]")
        if self.d < len(self.block_sizes):
            raise ConfigError("feature dimension must be at least the number of blocks")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")


def stratified_splits(labels, rng, fractions=(0.6, 0.2)):
    train, val, test = [], [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_tr = int(round(fractions[0] * idx.size))
        n_va = int(round(fractions[1] * idx.size))
        train.append(idx[:n_tr])
        val.append(idx[n_tr : n_tr + n_va])
        test.append(idx[n_tr + n_va :])
    return SplitSpec(*(np.sort(np.concatenate(s)) for s in (train, val, test)))


def sbm_generate(spec: SBMSpec) -> Graph:
    """Block-model graph with class-mean Gaussian features and 60/20/20 splits."""
    rng = np.random.default_rng(spec.seed)
    sizes = np.asarray(spec.block_sizes)
    labels = np.repeat(np.arange(sizes.size), sizes)
    n = labels.size
    starts = np.concatenate([[0], np.cumsum(sizes)])
    rows, cols = [], []
    for a in range(sizes.size):
        for b in range(a, sizes.size):
            p = spec.p_in if a == b else spec.p_out
            hit = rng.random((sizes[a], sizes[b])) < p
            if a == b:
                hit = np.triu(hit, k=1)
            r, c = np.nonzero(hit)
            rows.append(r + starts[a])
            cols.append(c + starts[b])
    edges = np.stack([np.concatenate(rows), np.concatenate(cols)], axis=1)
    means = np.zeros((sizes.size, spec.d))
    means[np.arange(sizes.size), np.arange(sizes.size)] = spec.mu
    features = means[labels] + spec.sigma * rng.standard_normal((n, spec.d))
    splits = stratified_splits(labels, rng)
    return Graph.from_edges(features, edges, labels, splits, num_classes=sizes.size)


# -- coresets ----------------------------------------------------------------


def random_coreset(target: TargetView, m, seed=0) -> CondensedGraph:
    """Class-balanced uniform sample of training nodes (features in preprocessed space)."""
    rng = np.random.default_rng(seed)
    budget = class_budgets(target.labels[target.splits.train], target.num_classes, m, spill=True)
    rows = sample_rows(target, budget, rng)
    return CondensedGraph(target.operand.x[rows].copy(), target.targets(rows))


def kcenter_indices(x, m, first):
    """Greedy farthest-point selection starting at row ``first``; ties go to the lowest index."""
    chosen = [first]
    dist = np.sqrt(((x - x[first]) ** 2).sum(axis=1))
    for _ in range(m - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sqrt(((x - x[nxt]) ** 2).sum(axis=1)))
    return np.asarray(chosen, dtype=np.int64)


def kcenter_coreset(target: TargetView, m, seed=0) -> CondensedGraph:
    train = target.splits.train
    if m > train.size:
        raise InsufficientNodesError(f"requested {m} nodes but only {train.size} training nodes exist")
    rng = np.random.default_rng(seed)
    x = target.operand.x[train]
    local = kcenter_indices(x, m, int(rng.integers(train.size)))
    rows = train[local]
    return CondensedGraph(target.operand.x[rows].copy(), target.targets(rows))
