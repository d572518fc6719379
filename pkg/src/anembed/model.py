"""Early-fusion embedding network: parameters, forward pass, scores and gradients.

A node ``i`` is embedded as::

    h0 = [W_id[i] ; lam * sum_k v_k W_att[k]]
    h_k = act(W_k h_{k-1} + b_k),  k = 1..n
    f(i, j) = U_out[j] . h_n

Everything is batched over rows; the single-node functions are thin wrappers
around the batched ones so there is only one arithmetic path.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.special import expit

from . import _container
from .errors import ArtifactFormatError, ArtifactVersionError, ChecksumError, ShapeMismatchError
from .graph_io import AttributeMatrix

MODEL_MAGIC = b"ANEMODEL1\n"
FORMAT_VERSION = 1


def _softsign(z):
    return z / (1.0 + np.abs(z))


def _softsign_grad(z):
    return 1.0 / (1.0 + np.abs(z)) ** 2


def _tanh_grad(z):
    t = np.tanh(z)
    return 1.0 - t * t


ACTIVATIONS = {
    "softsign": (_softsign, _softsign_grad),
    "tanh": (np.tanh, _tanh_grad),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(np.float64)),
    "identity": (lambda z: z, np.ones_like),
}


@dataclass(frozen=True)
class ModelConfig:
    d_id: int = 128
    d_att: int = 128
    hidden_sizes: tuple[int, ...] = (256, 128)
    lam: float = 0.8          # weight of the attribute half of the input layer
    activation: str = "softsign"
    dropout: float = 0.2

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.d_id < 1 or self.d_att < 0:
            raise ValueError("d_id must be >= 1 and d_att >= 0")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lam must be a finite nonnegative number")

    @property
    def input_dim(self) -> int:
        return self.d_id + self.d_att

    @property
    def output_dim(self) -> int:
        return self.hidden_sizes[-1] if self.hidden_sizes else self.input_dim

    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *self.hidden_sizes]
        return [(widths[k + 1], widths[k]) for k in range(len(self.hidden_sizes))]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        return cls(**{**d, "hidden_sizes": tuple(d["hidden_sizes"])})


@dataclass(eq=False)
class ModelParams:
    W_id: np.ndarray                       # (M, d_id)
    W_att: np.ndarray                      # (K, d_att)
    weights: list[np.ndarray]              # W_k: (out, in)
    biases: list[np.ndarray]               # b_k: (out,)
    U_out: np.ndarray                      # (M, d)

    @property
    def num_nodes(self) -> int:
        return self.W_id.shape[0]

    @property
    def num_features(self) -> int:
        return self.W_att.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = [self.W_id, self.W_att]
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        out.append(self.U_out)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.W_id.copy(), self.W_att.copy(),
                           [W.copy() for W in self.weights], [b.copy() for b in self.biases],
                           self.U_out.copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))

    __hash__ = None  # type: ignore[assignment]

    def check_shapes(self, config: ModelConfig) -> None:
        if self.W_id.shape[1] != config.d_id or self.W_att.shape[1] != config.d_att:
            raise ShapeMismatchError("embedding widths disagree with config")
        shapes = config.layer_shapes()
        if len(shapes) != len(self.weights):
            raise ShapeMismatchError("number of hidden layers disagrees with config")
        for (out, inp), W, b in zip(shapes, self.weights, self.biases):
            if W.shape != (out, inp) or b.shape != (out,):
                raise ShapeMismatchError(f"hidden layer shape {W.shape} != {(out, inp)}")
        if self.U_out.shape != (self.num_nodes, config.output_dim):
            raise ShapeMismatchError("output matrix shape disagrees with config")


def init_params(config: ModelConfig, num_nodes: int, num_features: int, seed: int,
                std: float = 0.01) -> ModelParams:
    """All weights and biases i.i.d. Normal(0, std^2), drawn in storage order."""
    if num_nodes < 1 or num_features < 1:
        raise ValueError("num_nodes and num_features must be positive")
    rng = np.random.default_rng(seed)
    W_id = rng.normal(0.0, std, (num_nodes, config.d_id))
    W_att = rng.normal(0.0, std, (num_features, config.d_att))
    weights, biases = [], []
    for out, inp in config.layer_shapes():
        weights.append(rng.normal(0.0, std, (out, inp)))
        biases.append(rng.normal(0.0, std, out))
    U_out = rng.normal(0.0, std, (num_nodes, config.output_dim))
    return ModelParams(W_id, W_att, weights, biases, U_out)


# --------------------------------------------------------------------------
# Attribute rows
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RowBatch:
    """Sparse attribute rows of a batch of nodes, in CSR layout."""

    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indptr) - 1

    @classmethod
    def single(cls, row) -> "RowBatch":
        if row is None:
            idx, val = np.empty(0, np.int64), np.empty(0, np.float64)
        elif (isinstance(row, tuple) and len(row) == 2
              and isinstance(row[0], np.ndarray) and isinstance(row[1], np.ndarray)):
            idx = np.asarray(row[0], dtype=np.int64)
            val = np.asarray(row[1], dtype=np.float64)
        else:
            pairs = list(row)
            idx = np.asarray([k for k, _ in pairs], dtype=np.int64)
            val = np.asarray([v for _, v in pairs], dtype=np.float64)
        return cls(np.array([0, len(idx)], dtype=np.int64), idx, val)

    @classmethod
    def gather(cls, attrs: AttributeMatrix, nodes: np.ndarray) -> "RowBatch":
        lo = attrs.indptr[nodes]
        lengths = attrs.indptr[nodes + 1] - lo
        indptr = np.zeros(len(nodes) + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        pos = np.arange(indptr[-1]) - np.repeat(indptr[:-1] - lo, lengths)
        return cls(indptr, attrs.indices[pos], attrs.values[pos])

    def owners(self) -> np.ndarray:
        """Batch position of every stored entry."""
        return np.repeat(np.arange(self.size), np.diff(self.indptr))


def encode_rows(rows: RowBatch, W_att: np.ndarray) -> np.ndarray:
    """Attribute embeddings ``sum_k v_k W_att[k]`` for each row of the batch."""
    out = np.zeros((rows.size, W_att.shape[1]))
    if len(rows.indices) == 0 or W_att.shape[1] == 0:
        return out
    if rows.indices.max() >= W_att.shape[0]:
        raise IndexError("feature index exceeds the attribute vocabulary")
    # a row's sum depends only on its own entries, never on the rest of the batch
    counts = np.diff(rows.indptr)
    nonempty = counts > 0
    terms = rows.values[:, None] * W_att[rows.indices]
    out[nonempty] = np.add.reduceat(terms, rows.indptr[:-1][nonempty], axis=0)
    return out


def encode_attributes(row, W_att: np.ndarray) -> np.ndarray:
    """``u' = sum_k v_k e_k`` over the stored entries of one sparse row."""
    return encode_rows(RowBatch.single(row), W_att)[0]


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


@dataclass(eq=False)
class ForwardTrace:
    nodes: np.ndarray
    rows: RowBatch
    u: np.ndarray                 # (B, d_id)
    u_att: np.ndarray             # (B, d_att), before the lam scaling
    h0: np.ndarray                # (B, d_id + d_att), before dropout
    masks: list[np.ndarray | None]  # inverted-dropout multipliers per dropout site
    inputs: list[np.ndarray]      # layer inputs after dropout
    z: list[np.ndarray]           # pre-activations per hidden layer
    h: list[np.ndarray]           # activations per hidden layer
    h_out: np.ndarray             # (B, d)

    def __len__(self) -> int:
        return len(self.nodes)


def _dropout_mask(shape, rate: float, rng: np.random.Generator | None):
    if rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def forward_batch(params: ModelParams, config: ModelConfig, nodes, rows: RowBatch,
                  train_mode: bool = False, rng: np.random.Generator | None = None) -> ForwardTrace:
    nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
    if len(nodes) and (nodes.min() < 0 or nodes.max() >= params.num_nodes):
        raise IndexError("node id out of range")
    act = ACTIVATIONS[config.activation][0]
    drop = train_mode and config.dropout > 0.0

    u = params.W_id[nodes]
    u_att = encode_rows(rows, params.W_att)
    h0 = np.concatenate([u, config.lam * u_att], axis=1)

    masks: list[np.ndarray | None] = []
    inputs: list[np.ndarray] = []
    zs: list[np.ndarray] = []
    hs: list[np.ndarray] = []
    cur = h0
    for W, b in zip(params.weights, params.biases):
        mask = _dropout_mask(cur.shape, config.dropout, rng) if drop else None
        x = cur * mask if mask is not None else cur
        masks.append(mask)
        inputs.append(x)
        z = x @ W.T + b
        cur = act(z)
        zs.append(z)
        hs.append(cur)
    if not params.weights:
        # no tower: the (dropped-out) input layer is the representation
        mask = _dropout_mask(cur.shape, config.dropout, rng) if drop else None
        masks.append(mask)
        cur = cur * mask if mask is not None else cur
    return ForwardTrace(nodes, rows, u, u_att, h0, masks, inputs, zs, hs, cur)


def forward(params: ModelParams, config: ModelConfig, node: int, row,
            train_mode: bool = False, rng: np.random.Generator | None = None) -> ForwardTrace:
    """Single-node forward pass; ``row`` is ``(indices, values)`` or ``[(k, v), ...]``."""
    return forward_batch(params, config, [node], RowBatch.single(row), train_mode, rng)


def proximity_score(params: ModelParams, trace: ForwardTrace, neighbor: int) -> float:
    if not 0 <= neighbor < params.num_nodes:
        raise IndexError("neighbor id out of range")
    return float(np.dot(params.U_out[neighbor], trace.h_out[0]))


def softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


def softmax_distribution(params: ModelParams, config: ModelConfig, node: int, row) -> np.ndarray:
    """Exact ``p(j | node)`` over all M nodes. O(M d); meant as a test oracle."""
    h = forward(params, config, node, row).h_out[0]
    return softmax(params.U_out @ h)


@dataclass(eq=False)
class Gradients:
    """Gradients of the summed sampled loss. Embedding tables are row-sparse."""

    id_rows: np.ndarray
    id_grad: np.ndarray
    att_rows: np.ndarray
    att_grad: np.ndarray
    out_rows: np.ndarray
    out_grad: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    loss: float

    def dense(self, params: ModelParams) -> ModelParams:
        """Same gradients laid out like ``params`` (zeros for untouched rows)."""
        W_id = np.zeros_like(params.W_id)
        W_id[self.id_rows] = self.id_grad
        W_att = np.zeros_like(params.W_att)
        W_att[self.att_rows] = self.att_grad
        U_out = np.zeros_like(params.U_out)
        U_out[self.out_rows] = self.out_grad
        return ModelParams(W_id, W_att, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], U_out)

    def is_finite(self) -> bool:
        parts = [self.id_grad, self.att_grad, self.out_grad, *self.weights, *self.biases]
        return math.isfinite(self.loss) and all(np.isfinite(p).all() for p in parts)


def segment_sum(ids: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum rows of ``values`` sharing an id; returns (sorted unique ids, sums)."""
    if len(ids) == 0:
        return np.empty(0, dtype=np.int64), np.zeros((0, values.shape[1]))
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    return sorted_ids[starts], np.add.reduceat(values[order], starts, axis=0)


def _pair_scores(params: ModelParams, h: np.ndarray, positives: np.ndarray,
                 negatives: np.ndarray):
    Up = params.U_out[positives]
    Un = params.U_out[negatives]
    s_pos = np.einsum("bd,bd->b", h, Up)
    s_neg = np.einsum("bd,bkd->bk", h, Un)
    return Up, Un, s_pos, s_neg


def _sampled_loss(s_pos: np.ndarray, s_neg: np.ndarray) -> float:
    # -log sigma(s) = log(1 + exp(-s))
    return float(np.logaddexp(0.0, -s_pos).sum() + np.logaddexp(0.0, s_neg).sum())


def backward_batch(params: ModelParams, config: ModelConfig, trace: ForwardTrace,
                   positives, negatives) -> Gradients:
    """Exact gradients of ``sum_b [-log s(f(i_b, pos_b)) - sum_j log s(-f(i_b, neg_bj))]``."""
    positives = np.asarray(positives, dtype=np.int64).reshape(-1)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(len(positives), -1)
    h = trace.h_out
    Up, Un, s_pos, s_neg = _pair_scores(params, h, positives, negatives)
    loss = _sampled_loss(s_pos, s_neg)

    g_pos = expit(s_pos) - 1.0
    g_neg = expit(s_neg)
    dh = g_pos[:, None] * Up + np.einsum("bk,bkd->bd", g_neg, Un)

    out_ids = np.concatenate([positives, negatives.reshape(-1)])
    out_vals = np.concatenate([g_pos[:, None] * h,
                               (g_neg[:, :, None] * h[:, None, :]).reshape(-1, h.shape[1])])
    out_rows, out_grad = segment_sum(out_ids, out_vals)

    dact = ACTIVATIONS[config.activation][1]
    n = len(params.weights)
    gW: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    if n == 0 and trace.masks[0] is not None:
        dh = dh * trace.masks[0]
    for k in range(n - 1, -1, -1):
        dz = dh * dact(trace.z[k])
        gW[k] = dz.T @ trace.inputs[k]
        gb[k] = dz.sum(axis=0)
        dh = dz @ params.weights[k]
        if trace.masks[k] is not None:
            dh = dh * trace.masks[k]
    # dh is now d loss / d h0

    id_rows, id_grad = segment_sum(trace.nodes, dh[:, : config.d_id])

    rows = trace.rows
    d_uatt = config.lam * dh[:, config.d_id :]
    if len(rows.indices) and config.d_att:
        att_rows, att_grad = segment_sum(rows.indices,
                                         rows.values[:, None] * d_uatt[rows.owners()])
    else:
        att_rows = np.empty(0, dtype=np.int64)
        att_grad = np.zeros((0, config.d_att))
    return Gradients(id_rows, id_grad, att_rows, att_grad, out_rows, out_grad, gW, gb, loss)


def backward(params: ModelParams, config: ModelConfig, trace: ForwardTrace,
             positive: int, negatives: Sequence[int]) -> Gradients:
    return backward_batch(params, config, trace, [positive], [list(negatives)])


def sampled_loss(params: ModelParams, config: ModelConfig, nodes, rows: RowBatch,
                 positives, negatives) -> float:
    """Summed sampled loss with dropout disabled."""
    positives = np.asarray(positives, dtype=np.int64).reshape(-1)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(len(positives), -1)
    h = forward_batch(params, config, nodes, rows).h_out
    _, _, s_pos, s_neg = _pair_scores(params, h, positives, negatives)
    return _sampled_loss(s_pos, s_neg)


# --------------------------------------------------------------------------
# Representations
# --------------------------------------------------------------------------


def final_representations(params: ModelParams, config: ModelConfig, attrs: AttributeMatrix,
                          nodes=None) -> np.ndarray:
    """``h_n + U_out[node]`` in evaluation mode, for ``nodes`` (default: all)."""
    nodes = np.arange(params.num_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
    h = forward_batch(params, config, nodes, RowBatch.gather(attrs, nodes)).h_out
    return h + params.U_out[nodes]


def final_representation(params: ModelParams, config: ModelConfig, node: int, row) -> np.ndarray:
    h = forward(params, config, node, row).h_out[0]
    return h + params.U_out[node]


def hidden_outputs(params: ModelParams, config: ModelConfig, attrs: AttributeMatrix,
                   nodes=None) -> np.ndarray:
    nodes = np.arange(params.num_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
    return forward_batch(params, config, nodes, RowBatch.gather(attrs, nodes)).h_out


def check_attributes(params: ModelParams, attrs: AttributeMatrix) -> None:
    if attrs.num_nodes != params.num_nodes:
        raise ShapeMismatchError(f"attributes cover {attrs.num_nodes} nodes, "
                                 f"model has {params.num_nodes}")
    if attrs.num_features != params.num_features:
        raise ShapeMismatchError(f"attributes have K={attrs.num_features}, "
                                 f"model expects K={params.num_features}")


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def model_payload(params: ModelParams, config: ModelConfig) -> tuple[dict[str, Any], list[np.ndarray]]:
    params.check_shapes(config)
    header = {
        "format": "anembed-model",
        "version": FORMAT_VERSION,
        "config": config.to_dict(),
        "num_nodes": params.num_nodes,
        "num_features": params.num_features,
    }
    return header, params.arrays()


def params_from_payload(header: dict[str, Any], arrays: list[np.ndarray]
                        ) -> tuple[ModelParams, ModelConfig, list[np.ndarray]]:
    if header.get("version") != FORMAT_VERSION:
        raise ArtifactVersionError(f"unsupported model version {header.get('version')!r}")
    config = ModelConfig.from_dict(header["config"])
    n = len(config.hidden_sizes)
    need = 3 + 2 * n
    if len(arrays) < need:
        raise ArtifactFormatError(f"model file holds {len(arrays)} arrays, expected {need}")
    W_id, W_att = arrays[0], arrays[1]
    weights = arrays[2 : 2 + 2 * n : 2]
    biases = arrays[3 : 3 + 2 * n : 2]
    params = ModelParams(W_id, W_att, list(weights), list(biases), arrays[2 + 2 * n])
    params.check_shapes(config)
    if (params.num_nodes, params.num_features) != (header["num_nodes"], header["num_features"]):
        raise ArtifactFormatError("header sizes disagree with stored matrices")
    return params, config, arrays[need:]


def save_model(path: str | os.PathLike, params: ModelParams, config: ModelConfig) -> None:
    header, arrays = model_payload(params, config)
    _container.write(path, MODEL_MAGIC, header, arrays)


def load_model(path: str | os.PathLike, num_nodes: int | None = None,
               num_features: int | None = None) -> tuple[ModelParams, ModelConfig]:
    header, arrays = _container.read(path, MODEL_MAGIC)
    params, config, _ = params_from_payload(header, arrays)
    if num_nodes is not None and params.num_nodes != num_nodes:
        raise ShapeMismatchError(f"model has {params.num_nodes} nodes, graph has {num_nodes}")
    if num_features is not None and params.num_features != num_features:
        raise ShapeMismatchError(f"model has K={params.num_features}, attributes have {num_features}")
    return params, config


def save_embeddings(path: str | os.PathLike, vectors: np.ndarray) -> None:
    """One line per node, ``node v1 ... vd``, shortest round-trip decimals.

    The first line is a comment carrying the shape and a SHA-256 of the body.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    body = "".join(f"{i} " + " ".join(repr(float(x)) for x in row) + "\n"
                   for i, row in enumerate(vectors))
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    head = f"# anembed-embeddings M={vectors.shape[0]} d={vectors.shape[1]} sha256={digest}\n"
    Path(path).write_text(head + body, encoding="utf-8")


def load_embeddings(path: str | os.PathLike) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8")
    head, _, body = text.partition("\n")
    if head.startswith("# anembed-embeddings"):
        fields = dict(tok.split("=", 1) for tok in head.split()[2:])
        if hashlib.sha256(body.encode("utf-8")).hexdigest() != fields.get("sha256"):
            raise ChecksumError(f"{path}: embedding checksum mismatch")
    else:
        body = text
    rows = []
    for lineno, line in enumerate(body.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        node = int(parts[0])
        if node != len(rows):
            raise ArtifactFormatError(f"{path}: line {lineno}: expected node {len(rows)}, got {node}")
        rows.append([float(x) for x in parts[1:]])
    return np.asarray(rows, dtype=np.float64)
