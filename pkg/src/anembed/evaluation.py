"""Link-prediction AUROC, node-classification F1 and nearest-neighbor queries."""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.special import expit, log_expit
from scipy.stats import rankdata

from .graph_io import AttributeMatrix, LabelMap
from .model import ModelConfig, ModelParams, final_representations, hidden_outputs

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, value in self.metrics.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"metric {name}={value} outside [0, 1]")

    def to_text(self) -> str:
        lines = [f"task={self.task}"]
        lines += [f"{k}={float(v)!r}" for k, v in self.metrics.items()]
        lines += [f"{k}={v}" for k, v in self.meta.items()]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict[str, Any]:
        return {"task": self.task, "metrics": dict(self.metrics), "meta": dict(self.meta)}

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        else:
            path.write_text(self.to_text())


# --------------------------------------------------------------------------
# AUROC
# --------------------------------------------------------------------------


def auroc(pos_scores, neg_scores) -> float:
    """Mann-Whitney estimate of P(pos > neg), ties counted as one half."""
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("auroc needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))   # average ranks, 1-based
    n_pos = len(pos)
    # sum of half-integers is exact in float64 at these sizes
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * len(neg)))


def pair_scores(params: ModelParams, config: ModelConfig, attrs: AttributeMatrix,
                pairs, score: str = "inner") -> np.ndarray:
    """Symmetric edge scores ``(f(i, j) + f(j, i)) / 2`` or cosine of final representations."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) and (pairs.min() < 0 or pairs.max() >= params.num_nodes):
        raise IndexError("edge endpoint out of range for this model")
    nodes, inv = np.unique(pairs, return_inverse=True)
    inv = inv.reshape(-1, 2)
    if score == "inner":
        h = hidden_outputs(params, config, attrs, nodes)
        u = params.U_out[nodes]
        i, j = inv[:, 0], inv[:, 1]
        f_ij = np.einsum("bd,bd->b", h[i], u[j])
        f_ji = np.einsum("bd,bd->b", h[j], u[i])
        return (f_ij + f_ji) / 2.0
    if score == "cosine":
        rep = final_representations(params, config, attrs, nodes)
        norms = np.linalg.norm(rep, axis=1)
        norms[norms == 0] = 1.0
        rep = rep / norms[:, None]
        return np.einsum("bd,bd->b", rep[inv[:, 0]], rep[inv[:, 1]])
    raise ValueError(f"unknown score {score!r}")


def link_prediction_auroc(params, config, attrs, pos_edges, neg_edges, score: str = "inner") -> float:
    return auroc(pair_scores(params, config, attrs, pos_edges, score),
                 pair_scores(params, config, attrs, neg_edges, score))


def link_prediction_eval(params: ModelParams, config: ModelConfig, attrs: AttributeMatrix,
                         test_pos, test_neg, score: str = "inner",
                         meta: dict[str, Any] | None = None) -> EvalReport:
    value = link_prediction_auroc(params, config, attrs, test_pos, test_neg, score)
    info = {"num_pos": len(test_pos), "num_neg": len(test_neg), "score": score}
    info.update(meta or {})
    return EvalReport("link_prediction", {"auroc": value}, info)


# --------------------------------------------------------------------------
# F1
# --------------------------------------------------------------------------


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def per_class_f1(confusion) -> np.ndarray:
    cm = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1)          # 2TP + FP + FN
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(tp > 0, 2.0 * tp / denom, 0.0)
    return f1


def macro_f1(confusion) -> float:
    return float(per_class_f1(confusion).mean())


def micro_f1(confusion) -> float:
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.sum() == 0:
        raise ValueError("confusion matrix has no instances")
    tp = np.trace(cm)
    fp = cm.sum() - tp    # pooled FP equals pooled FN for single-label data
    return float(2 * tp / (2 * tp + 2 * fp))


# --------------------------------------------------------------------------
# One-vs-rest logistic regression
# --------------------------------------------------------------------------


@dataclass
class LinearClassifier:
    weights: np.ndarray      # (C, d)
    bias: np.ndarray         # (C,)
    l2: float
    classes: np.ndarray      # label of each row of ``weights``

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def decision_function(self, features) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights.T + self.bias

    def predict(self, features) -> np.ndarray:
        return self.classes[np.argmax(self.decision_function(features), axis=1)]


def _fit_binary(x: np.ndarray, y: np.ndarray, l2: float, tol: float, max_iter: int):
    """Minimize mean log-loss + l2/2 |w|^2 (bias unregularized) by gradient descent
    with Armijo backtracking."""
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0

    def objective(w, b):
        margin = y * (x @ w + b)
        return -log_expit(margin).mean() + 0.5 * l2 * (w @ w)

    def gradient(w, b):
        margin = y * (x @ w + b)
        coef = -y * expit(-margin) / n
        return x.T @ coef + l2 * w, coef.sum()

    f = objective(w, b)
    step = 1.0
    for _ in range(max_iter):
        gw, gb = gradient(w, b)
        gnorm2 = gw @ gw + gb * gb
        if np.sqrt(gnorm2) <= tol:
            break
        step = min(step * 2.0, 1e6)
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            f_new = objective(w_new, b_new)
            if f_new <= f - 0.5 * step * gnorm2 or step < 1e-20:
                break
            step *= 0.5
        w, b, f = w_new, b_new, f_new
    return w, b


def train_classifier(features, labels, l2: float = 1.0, seed: int = 0,
                     tol: float = 1e-6, max_iter: int = 1000) -> LinearClassifier:
    """One-vs-rest L2-regularized logistic regression.

    The fit is deterministic; ``seed`` is accepted for interface symmetry.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if not np.isfinite(x).all():
        raise ValueError("features must be finite")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("need at least two classes to train a classifier")
    W = np.zeros((len(classes), x.shape[1]))
    bias = np.zeros(len(classes))
    for c, cls in enumerate(classes):
        target = np.where(y == cls, 1.0, -1.0)
        W[c], bias[c] = _fit_binary(x, target, l2, tol, max_iter)
    return LinearClassifier(W, bias, l2, classes)


def stratified_split(labels: np.ndarray, nodes: np.ndarray, rho: float,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Split labeled ``nodes`` into (train, test) with fraction ``rho`` per class.

    Falls back to an unstratified split when some class has fewer than 2 nodes.
    """
    y = labels[nodes]
    classes, counts = np.unique(y, return_counts=True)
    if np.any(counts < 2):
        warnings.warn("a class has fewer than 2 labeled nodes; using an unstratified split",
                      stacklevel=2)
        perm = rng.permutation(nodes)
        n_train = min(max(int(round(rho * len(nodes))), 1), len(nodes) - 1)
        return np.sort(perm[:n_train]), np.sort(perm[n_train:])
    train, test = [], []
    for cls, cnt in zip(classes, counts):
        members = rng.permutation(nodes[y == cls])
        k = min(max(int(round(rho * cnt)), 1), cnt - 1)
        train.append(members[:k])
        test.append(members[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def classify_features(features: np.ndarray, labels: LabelMap, rho: float, repeats: int,
                      seed: int, l2: float = 1.0) -> EvalReport:
    """Repeated holdout: fit on a ``rho`` fraction of labeled nodes, score on the rest."""
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    nodes = labels.labeled_nodes
    y_all = labels.labels
    if len(np.unique(y_all[nodes])) < 2:
        raise ValueError("labels cover fewer than two classes")
    rng = np.random.default_rng(seed)
    macro, micro = [], []
    for _ in range(repeats):
        tr, te = stratified_split(y_all, nodes, rho, rng)
        if len(np.unique(y_all[tr])) < 2:
            raise ValueError("training portion holds a single class; increase rho")
        clf = train_classifier(features[tr], y_all[tr], l2=l2)
        pred = clf.predict(features[te])
        cm = confusion_matrix(y_all[te], pred, labels.num_classes)
        macro.append(macro_f1(cm))
        micro.append(micro_f1(cm))
    return EvalReport("node_classification",
                      {"macro_f1": float(np.mean(macro)), "micro_f1": float(np.mean(micro))},
                      {"rho": rho, "repeats": repeats, "seed": seed, "l2": l2,
                       "macro_f1_std": float(np.std(macro)), "micro_f1_std": float(np.std(micro))})


def classification_eval(params: ModelParams, config: ModelConfig, attrs: AttributeMatrix,
                        labels: LabelMap, rho: float, repeats: int = 10, seed: int = 0,
                        l2: float = 1.0) -> EvalReport:
    features = final_representations(params, config, attrs)
    return classify_features(features, labels, rho, repeats, seed, l2)


# --------------------------------------------------------------------------
# Nearest neighbors
# --------------------------------------------------------------------------


def nearest_by_cosine(vectors, query: int, k: int) -> list[tuple[int, float]]:
    """Top ``k`` rows by cosine similarity to ``vectors[query]``, query excluded.

    Ties are broken by ascending row id.
    """
    v = np.asarray(vectors, dtype=np.float64)
    if not 0 <= query < len(v):
        raise IndexError(f"query node {query} out of range")
    if k < 0 or k >= len(v):
        raise ValueError(f"k must lie in [0, {len(v) - 1}]")
    qn = np.linalg.norm(v[query])
    if qn == 0:
        raise ValueError(f"node {query} has a zero-norm representation")
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms == 0, 1.0, norms)
    sims = (v @ v[query]) / (safe * qn)
    ids = np.arange(len(v))
    order = np.lexsort((ids, -sims))
    order = order[order != query][:k]
    return [(int(i), float(sims[i])) for i in order]


def nearest_neighbors(params: ModelParams, config: ModelConfig, attrs: AttributeMatrix,
                      query: int, k: int) -> list[tuple[int, float]]:
    return nearest_by_cosine(final_representations(params, config, attrs), query, k)
