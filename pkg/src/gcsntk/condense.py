"""Condensation loop: initialize a synthetic graph and fit it by Adam on the KRR loss."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, InsufficientNodesError, NumericalError
from .grad import VARIANTS, loss_and_grad
from .graph import CondensedGraph, TargetView, one_hot
from .kernel import KernelConfig, cross_and_self
from .krr import accuracy, fit_predict
from .tape import Tape

log = logging.getLogger(__name__)

# Learning rate, ridge, K, L per dataset.
PRESETS = {
    "cora": dict(learning_rate=0.01, lam=1.0, K=2, L=2),
    "pubmed": dict(learning_rate=0.01, lam=1e-3, K=2, L=2),
    "ogbn-arxiv": dict(learning_rate=1e-3, lam=1e-5, K=1, L=1),
    "flickr": dict(learning_rate=1e-3, lam=1e-5, K=1, L=1),
}

INIT_NOISE_SCALE = 0.01


@dataclass
class CondenseConfig:
    budget: int | None = None
    nodes_per_class: int | None = None
    epochs: int = 200
    learning_rate: float = 0.01
    lam: float = 1.0
    kernel: KernelConfig = field(default_factory=KernelConfig)
    variant: str = "X"
    seed: int = 0
    eval_every: int = 1
    init: str = "sample"
    loss_rows: str = "train"
    stop_coef_grad: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.init not in ("sample", "noise"):
            raise ConfigError("init must be 'sample' or 'noise'")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.budget is None and self.nodes_per_class is None:
            raise ConfigError("set either budget (M) or nodes_per_class")
        if self.budget is not None and self.budget < 1:
            raise ConfigError("budget must be >= 1")
        if self.nodes_per_class is not None and self.nodes_per_class < 1:
            raise ConfigError("nodes_per_class must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_acc: float | None
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_acc: float | None = None

    def append(self, rec):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must increase")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def to_jsonl(self):
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """Return updated copies of ``params`` (dict name -> array)."""
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.beta1 * self.m.get(k, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1.0 - self.beta1**self.t)
            vhat = v / (1.0 - self.beta2**self.t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def class_budgets(train_labels, num_classes, total, spill=False):
    """Split ``total`` condensed nodes over the classes present in training.

    Each present class gets ``total // C``; the remainder goes one by one to
    the largest classes (ties to the lower class index). With ``spill`` a
    class never gets more than it has and the excess moves to classes with
    spare nodes, so ``total == len(train_labels)`` selects everything.
    """
    counts = np.bincount(train_labels, minlength=num_classes)
    present = np.flatnonzero(counts)
    if total > counts.sum():
        raise InsufficientNodesError(f"requested {total} nodes but only {counts.sum()} training nodes exist")
    order = present[np.lexsort((present, -counts[present]))]
    budget = np.zeros(num_classes, dtype=np.int64)
    base, rem = divmod(total, len(present))
    budget[present] = base
    budget[order[:rem]] += 1
    if spill:
        budget = np.minimum(budget, counts)
        while budget.sum() < total:
            for c in order:
                if budget.sum() == total:
                    break
                if budget[c] < counts[c]:
                    budget[c] += 1
    return budget


def _resolve_budget(target, config):
    counts = np.bincount(target.labels[target.splits.train], minlength=target.num_classes)
    if config.nodes_per_class is not None:
        return int(config.nodes_per_class * np.count_nonzero(counts))
    return int(config.budget)


def sample_rows(target, budget, rng):
    """Class-balanced sample of training node indices, grouped by class."""
    train = target.splits.train
    lab = target.labels[train]
    picked = []
    for c in range(target.num_classes):
        if budget[c] == 0:
            continue
        pool = train[lab == c]
        if budget[c] > pool.size:
            raise InsufficientNodesError(f"class {c} needs {budget[c]} nodes but has {pool.size} training nodes")
        picked.append(rng.choice(pool, size=int(budget[c]), replace=False))
    return np.concatenate(picked)


def init_condensed(target: TargetView, config: CondenseConfig) -> CondensedGraph:
    rng = np.random.default_rng(config.seed)
    total = _resolve_budget(target, config)
    budget = class_budgets(target.labels[target.splits.train], target.num_classes, total)
    labels = np.repeat(np.arange(target.num_classes), budget)
    d = target.operand.x.shape[1]
    if config.init == "sample":
        rows = sample_rows(target, budget, rng)
        x_s = target.operand.x[rows].copy()
    else:
        x_s = INIT_NOISE_SCALE * rng.standard_normal((labels.size, d))
    adj = np.zeros((labels.size, labels.size)) if config.variant == "XA" else None
    return CondensedGraph(x_s, one_hot(labels, target.num_classes), adj)


def materialize_adjacency(condensed: CondensedGraph, variant="X"):
    """Self-looped condensed adjacency: identity for X, logistic weights for XA."""
    if variant == "X":
        return np.eye(condensed.m)
    if variant != "XA":
        raise ConfigError(f"variant must be one of {VARIANTS}")
    if condensed.adj_param is None:
        raise ConfigError("variant XA requires an adjacency parameter")
    return Tape(enabled=False).logistic_adjacency(condensed.adj_param).value


def _variant_of(condensed):
    return "X" if condensed.adj_param is None else "XA"


def predict(condensed, target, kernel, lam, variant=None):
    """KRR predictions for every target node from a condensed graph."""
    variant = variant or _variant_of(condensed)
    adj = None if variant == "X" else materialize_adjacency(condensed, variant)
    kts, kss = cross_and_self(target, condensed.x_s, adj, kernel)
    return fit_predict(kss, kts, condensed.y_s, lam)


def evaluate(condensed, target, kernel, lam, split="test", variant=None):
    """Accuracy on one target split of the KRR model fit on the condensed graph."""
    rows = getattr(target.splits, split)
    pred = predict(condensed, target, kernel, lam, variant)
    return accuracy(pred[rows], target.labels[rows])


def full_training_graph(target: TargetView) -> CondensedGraph:
    train = target.splits.train
    return CondensedGraph(target.operand.x[train].copy(), target.targets(train))


def full_data_accuracy(target, kernel, lam, split="test"):
    """Accuracy of KRR trained on every training node (identity adjacency)."""
    return evaluate(full_training_graph(target), target, kernel, lam, split)


def condense(target: TargetView, config: CondenseConfig, on_epoch=None):
    """Run the condensation loop; returns ``(best_checkpoint, history)``.

    Validation accuracy is measured on the updated state every
    ``eval_every`` epochs and at the last epoch; the best one (earliest on
    ties) is returned.
    """
    state = init_condensed(target, config)
    opt = Adam(config.learning_rate)
    history = TrainHistory()
    best = None
    last_good = state.copy()
    cfg = config.kernel
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        try:
            rep = loss_and_grad(
                target, state, cfg, config.lam, config.variant, config.loss_rows, config.stop_coef_grad
            )
        except NumericalError as exc:
            raise DivergenceError(epoch, best or last_good, history, exc) from exc
        last_good = state.copy()
        params = {"x": state.x_s}
        grads = {"x": rep.grad_x}
        if config.variant == "XA":
            params["adj"] = state.adj_param
            grads["adj"] = rep.grad_adj
        new = opt.step(params, grads)
        state = CondensedGraph(new["x"], state.y_s, new.get("adj"))
        val = None
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            try:
                val = evaluate(state, target, cfg, config.lam, "val", config.variant)
            except NumericalError as exc:
                raise DivergenceError(epoch, best or last_good, history, exc) from exc
            if best is None or val > history.best_val_acc:
                best = state.copy()
                history.best_epoch, history.best_val_acc = epoch, val
        rec = EpochRecord(epoch, rep.loss, val, time.perf_counter() - t0)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d loss %.6g val_acc %s", epoch, rep.loss, val)
    return best, history
