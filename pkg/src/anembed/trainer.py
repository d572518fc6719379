"""Mini-batch training: walks -> context pairs -> negative sampling -> lazy Adam."""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _container
from .errors import NonFiniteError, ShapeMismatchError
from .graph_io import AttributeMatrix, Graph, LinkSplit
from .model import (
    MODEL_MAGIC,
    Gradients,
    ModelConfig,
    ModelParams,
    RowBatch,
    backward_batch,
    forward_batch,
    init_params,
    model_payload,
    params_from_payload,
)
from .walks import (
    WalkConfig,
    alias_draw,
    alias_setup,
    build_walk_tables,
    extract_context_pairs,
    generate_walks,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-4
    num_negatives: int = 5
    neg_distribution: str = "unigram75"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    early_stop_patience: int = 0
    seed: int = 0
    freeze_walks: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.num_negatives < 1:
            raise ValueError("num_negatives must be >= 1")
        if self.neg_distribution not in ("unigram75", "uniform"):
            raise ValueError(f"unknown negative distribution {self.neg_distribution!r}")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass(eq=False)
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        zero = lambda p: ModelParams(np.zeros_like(p.W_id), np.zeros_like(p.W_att),
                                     [np.zeros_like(w) for w in p.weights],
                                     [np.zeros_like(b) for b in p.biases],
                                     np.zeros_like(p.U_out))
        return cls(zero(params), zero(params), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def adam_update(theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of ``theta`` at step ``t >= 1``."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    theta -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _sparse_update(table, m, v, rows, grad, t, lr, b1, b2, eps) -> None:
    if len(rows) == 0:
        return
    th, mm, vv = table[rows], m[rows], v[rows]
    adam_update(th, grad, mm, vv, t, lr, b1, b2, eps)
    table[rows], m[rows], v[rows] = th, mm, vv


def adam_step(params: ModelParams, grads: Gradients, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[ModelParams, AdamState]:
    """One Adam step. Embedding tables (W_id, W_att, U_out) update only touched rows.

    Updates ``params`` and ``state`` in place and returns them.
    """
    if not grads.is_finite():
        groups = {"W_id": grads.id_grad, "W_att": grads.att_grad, "U_out": grads.out_grad}
        groups.update({f"W{k + 1}": w for k, w in enumerate(grads.weights)})
        groups.update({f"b{k + 1}": b for k, b in enumerate(grads.biases)})
        bad = [name for name, g in groups.items() if not np.isfinite(g).all()]
        raise NonFiniteError(f"non-finite gradient at step {state.t + 1} "
                             f"(loss={grads.loss!r}, groups={bad})")
    state.t += 1
    t = state.t
    _sparse_update(params.W_id, state.m.W_id, state.v.W_id, grads.id_rows, grads.id_grad,
                   t, lr, beta1, beta2, eps)
    _sparse_update(params.W_att, state.m.W_att, state.v.W_att, grads.att_rows, grads.att_grad,
                   t, lr, beta1, beta2, eps)
    _sparse_update(params.U_out, state.m.U_out, state.v.U_out, grads.out_rows, grads.out_grad,
                   t, lr, beta1, beta2, eps)
    for k in range(len(params.weights)):
        adam_update(params.weights[k], grads.weights[k], state.m.weights[k], state.v.weights[k],
                    t, lr, beta1, beta2, eps)
        adam_update(params.biases[k], grads.biases[k], state.m.biases[k], state.v.biases[k],
                    t, lr, beta1, beta2, eps)
    return params, state


# --------------------------------------------------------------------------
# Negative sampling
# --------------------------------------------------------------------------


@dataclass(eq=False)
class NegativeSampler:
    weights: np.ndarray
    accept: np.ndarray
    alias: np.ndarray
    rng: np.random.Generator
    total: float = 0.0

    def __post_init__(self) -> None:
        self.total = float(self.weights.sum())

    @classmethod
    def from_graph(cls, graph: Graph, distribution: str = "unigram75",
                   seed: int | np.random.SeedSequence = 0) -> "NegativeSampler":
        if distribution == "unigram75":
            w = graph.degrees.astype(np.float64) ** 0.75
        elif distribution == "uniform":
            w = np.ones(graph.num_nodes)
        else:
            raise ValueError(f"unknown negative distribution {distribution!r}")
        return cls.from_weights(w, seed)

    @classmethod
    def from_weights(cls, weights, seed: int | np.random.SeedSequence = 0) -> "NegativeSampler":
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0 or np.any(w < 0) or not w.sum() > 0:
            raise ValueError("weights must be a nonempty nonnegative vector with positive sum")
        accept, alias = alias_setup(w)
        return cls(w, accept, alias, np.random.default_rng(seed))

    @property
    def probabilities(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    def other_mass(self, nodes: np.ndarray) -> np.ndarray:
        """Total weight outside each of ``nodes``."""
        return self.total - self.weights[nodes]

    def draw(self, size) -> np.ndarray:
        return alias_draw(self.accept, self.alias, self.rng, size)


def sample_negatives(sampler: NegativeSampler, count: int, forbidden: int) -> np.ndarray:
    """``count`` i.i.d. draws from the sampler, redrawing any equal to ``forbidden``."""
    return sample_negatives_batch(sampler, np.array([forbidden]), count)[0]


def sample_negatives_batch(sampler: NegativeSampler, forbidden: np.ndarray, count: int) -> np.ndarray:
    """Shape ``(len(forbidden), count)``; row ``b`` never contains ``forbidden[b]``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    forbidden = np.asarray(forbidden, dtype=np.int64)
    rest = sampler.other_mass(forbidden)
    if np.any(rest <= 0):
        bad = int(forbidden[np.argmin(rest)])
        raise ValueError(f"negative distribution is concentrated on node {bad} alone")
    out = sampler.draw((len(forbidden), count))
    clash = out == forbidden[:, None]
    while clash.any():
        out[clash] = sampler.draw(int(clash.sum()))
        clash = out == forbidden[:, None]
    return out


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_auroc: float | None
    seconds: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    adam: AdamState | None = None


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "walks", "shuffle", "negatives", "dropout")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def train(graph: Graph, attrs: AttributeMatrix | None, model_config: ModelConfig,
          walk_config: WalkConfig, train_config: TrainConfig,
          validation: LinkSplit | None = None,
          init: ModelParams | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Fit the model on context pairs from biased walks over ``graph``.

    With a ``validation`` split, the validation AUROC is recorded after every
    epoch, the best-scoring parameters are returned, and training stops after
    ``early_stop_patience`` epochs without improvement (0 disables stopping).
    """
    from .evaluation import link_prediction_auroc

    m = graph.num_nodes
    if attrs is None:
        attrs = AttributeMatrix.empty(m)
    if attrs.num_nodes != m:
        raise ShapeMismatchError(f"attributes cover {attrs.num_nodes} nodes, graph has {m}")
    streams = _streams(train_config.seed)
    params = init if init is not None else init_params(
        model_config, m, attrs.num_features, int(streams["init"].integers(2**63 - 1)))
    params.check_shapes(model_config)
    if params.num_nodes != m or params.num_features != attrs.num_features:
        raise ShapeMismatchError("initial parameters do not match graph/attributes")
    state = AdamState.zeros_like(params)
    result = TrainResult(params, [], None, state)
    if train_config.epochs == 0:
        return result

    tables = build_walk_tables(graph, walk_config)
    sampler = NegativeSampler.from_graph(graph, train_config.neg_distribution,
                                         int(streams["negatives"].integers(2**63 - 1)))
    walk_rng = np.random.default_rng(walk_config.seed) if train_config.freeze_walks \
        else streams["walks"]
    pairs = None
    best_score, best_params, best_epoch, stale = -math.inf, None, None, 0
    bs, k = train_config.batch_size, train_config.num_negatives

    for epoch in range(1, train_config.epochs + 1):
        t0 = time.perf_counter()
        if pairs is None or not train_config.freeze_walks:
            walks = generate_walks(graph, tables, walk_config, walk_rng)
            pairs = extract_context_pairs(walks, walk_config.window)
        order = streams["shuffle"].permutation(len(pairs))
        centers, contexts = pairs.centers[order], pairs.contexts[order]
        total = 0.0
        for lo in range(0, len(order), bs):
            c, x = centers[lo : lo + bs], contexts[lo : lo + bs]
            neg = sample_negatives_batch(sampler, x, k)
            trace = forward_batch(params, model_config, c, RowBatch.gather(attrs, c),
                                  train_mode=True, rng=streams["dropout"])
            grads = backward_batch(params, model_config, trace, x, neg)
            adam_step(params, grads, state, train_config.learning_rate,
                      train_config.beta1, train_config.beta2, train_config.epsilon)
            total += grads.loss
        loss = total / max(len(order), 1)
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at epoch {epoch}")

        val = None
        if validation is not None and len(validation.val_pos):
            val = link_prediction_auroc(params, model_config, attrs,
                                        validation.val_pos, validation.val_neg)
        rec = EpochRecord(epoch, loss, val, time.perf_counter() - t0)
        result.history.append(rec)
        logger.info("epoch %d loss %.6f val_auroc %s", epoch, loss, val)
        if on_epoch is not None:
            on_epoch(rec)

        if val is not None:
            if val > best_score:
                best_score, best_params, best_epoch, stale = val, params.copy(), epoch, 0
            else:
                stale += 1
                if train_config.early_stop_patience and stale >= train_config.early_stop_patience:
                    break

    if best_params is not None:
        result.params = best_params
        result.best_epoch = best_epoch
    return result


def format_log(history: list[EpochRecord], deterministic: bool = False) -> str:
    """Tab-separated ``epoch loss val_auroc seconds`` lines.

    In deterministic mode the wall-clock column is written as 0 so the log is
    reproducible byte for byte.
    """
    lines = []
    for r in history:
        val = "nan" if r.val_auroc is None else repr(float(r.val_auroc))
        secs = "0" if deterministic else f"{r.seconds:.3f}"
        lines.append(f"{r.epoch}\t{float(r.loss)!r}\t{val}\t{secs}\n")
    return "".join(lines)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path: str | os.PathLike, params: ModelParams, config: ModelConfig,
                    state: AdamState) -> None:
    header, arrays = model_payload(params, config)
    header["adam_t"] = state.t
    _container.write(path, MODEL_MAGIC, header, arrays + state.m.arrays() + state.v.arrays())


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelParams, ModelConfig, AdamState]:
    header, arrays = _container.read(path, MODEL_MAGIC)
    params, config, rest = params_from_payload(header, arrays)
    if "adam_t" not in header:
        return params, config, AdamState.zeros_like(params)
    n = len(params.arrays())
    if len(rest) != 2 * n:
        raise ShapeMismatchError("checkpoint Adam block is incomplete")
    m, _, _ = params_from_payload(header, rest[:n])
    v, _, _ = params_from_payload(header, rest[n:])
    return params, config, AdamState(m, v, int(header["adam_t"]))

