"""Convert plain CSV files into a graph bundle directory.

    python scripts/csv_to_bundle.py OUT --features X.csv --edges E.csv --labels y.csv \
        [--splits splits.json | --train-per-class 20 --val 500 --test 1000 --seed 0]

features: one row per node, comma-separated floats (no header).
edges:    one "u,v" pair per line, 0-indexed; direction and duplicates are ignored.
labels:   one integer class per line.
Without --splits, a fixed-size split is drawn: ``train-per-class`` nodes of
every class for training, then ``val`` and ``test`` nodes from the rest.
The Cora citation graph in this form gives 140/500/1000.
"""
import argparse
import json
import sys

import numpy as np

from gcsntk.data_io import save_bundle
from gcsntk.graph import Graph, SplitSpec


def fixed_size_splits(labels, per_class, n_val, n_test, seed):
    rng = np.random.default_rng(seed)
    train = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < per_class:
            raise SystemExit(f"class {c} has only {idx.size} nodes, need {per_class}")
        train.append(rng.choice(idx, per_class, replace=False))
    train = np.sort(np.concatenate(train))
    rest = rng.permutation(np.setdiff1d(np.arange(labels.size), train))
    if rest.size < n_val + n_test:
        raise SystemExit(f"only {rest.size} nodes left for {n_val} val + {n_test} test")
    return SplitSpec(train, np.sort(rest[:n_val]), np.sort(rest[n_val : n_val + n_test]))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("out")
    ap.add_argument("--features", required=True)
    ap.add_argument("--edges", required=True)
    ap.add_argument("--labels", required=True)
    ap.add_argument("--splits", help="JSON with train/val/test index lists")
    ap.add_argument("--train-per-class", type=int, default=20)
    ap.add_argument("--val", type=int, default=500)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    x = np.loadtxt(args.features, delimiter=",", ndmin=2)
    edges = np.loadtxt(args.edges, delimiter=",", dtype=np.int64, ndmin=2)
    labels = np.loadtxt(args.labels, dtype=np.int64, ndmin=1)
    if args.splits:
        with open(args.splits) as fh:
            raw = json.load(fh)
        splits = SplitSpec(raw["train"], raw["val"], raw["test"])
    else:
        splits = fixed_size_splits(labels, args.train_per_class, args.val, args.test, args.seed)
    graph = Graph.from_edges(x, edges, labels, splits)
    save_bundle(graph, args.out, {"source": "csv"})
    print(json.dumps({"path": args.out, "n": graph.n, "d": graph.d, "C": graph.num_classes}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
