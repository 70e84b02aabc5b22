"""Graph condensation via kernel ridge regression with a structure-aware NTK."""
from ._backend import BACKEND
from .condense import CondenseConfig, TrainHistory, condense, evaluate, init_condensed, materialize_adjacency
from .graph import CondensedGraph, Graph, SplitSpec, TargetView, prepare_target
from .kernel import KernelConfig, cross_and_self, kernel_matrix, ntk, sntk

__all__ = [
    "BACKEND",
    "CondenseConfig",
    "CondensedGraph",
    "Graph",
    "KernelConfig",
    "SplitSpec",
    "TargetView",
    "TrainHistory",
    "condense",
    "cross_and_self",
    "evaluate",
    "init_condensed",
    "kernel_matrix",
    "materialize_adjacency",
    "ntk",
    "prepare_target",
    "sntk",
]

__version__ = "0.1.0"
