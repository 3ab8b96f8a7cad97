"""Server-side knowledge-graph pretraining.

Entity embeddings pass through ``L`` neighbourhood-aggregation layers and the
layered embeddings are scored with a relation-projected translational
distance. Training minimises a pairwise logistic loss against tail-corrupted
negatives with plain mini-batch SGD; gradients are derived by hand.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit
from scipy.stats import rankdata
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .domain import DataError, Hyperparams, NumericalError
from .kgstore import KnowledgeGraph
from .validation import check_random_state

logger = logging.getLogger(__name__)

MAX_NEGATIVE_ATTEMPTS = 100


_logistic = expit


def logistic(x):
    return expit(np.asarray(x, dtype=np.float64))


def scatter_rows(index, values, n_rows):
    """Sum ``values`` rows into an ``(n_rows, ...)`` array at ``index`` (like ``np.add.at``)."""
    index = np.asarray(index, dtype=np.int64)
    if not len(index):
        return np.zeros((n_rows,) + values.shape[1:])
    flat = values.reshape(len(index), -1)
    sel = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))), shape=(n_rows, len(index)))
    return np.asarray(sel @ flat).reshape((n_rows,) + values.shape[1:])


def log_sigmoid(x):
    """ln(sigmoid(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


# activation -> (forward, derivative expressed through the forward output)
ACTIVATIONS = {
    "logistic": (_logistic, lambda y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "identity": (lambda x: x, lambda y: np.ones_like(y)),
}


def get_activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise DataError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


@dataclass
class EmbeddingState:
    entity: np.ndarray       # (|E|, d)
    relation: np.ndarray     # (|R|, k)
    projection: np.ndarray   # (|R|, d, k)
    layer_weight: np.ndarray  # (L, d, d)
    layer_bias: np.ndarray   # (L, d)

    @property
    def dims(self):
        return self.entity.shape[1], self.relation.shape[1], self.layer_weight.shape[0]

    def copy(self) -> "EmbeddingState":
        return EmbeddingState(*(a.copy() for a in self.arrays()))

    def arrays(self):
        return (self.entity, self.relation, self.projection, self.layer_weight, self.layer_bias)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_state(n_entities, n_relations, dim_entity, dim_relation, layers, rng) -> EmbeddingState:
    d, k = dim_entity, dim_relation
    rng = check_random_state(rng)
    bound = 0.5 / np.sqrt(d)
    entity = rng.uniform(-bound, bound, size=(n_entities, d))
    relation = rng.uniform(-bound, bound, size=(n_relations, k))
    projection = np.broadcast_to(np.eye(d, k), (n_relations, d, k)).copy()
    layer_weight = np.broadcast_to(np.eye(d), (layers, d, d)).copy()
    layer_bias = np.zeros((layers, d))
    return EmbeddingState(entity, relation, projection, layer_weight, layer_bias)


# ---------------------------------------------------------------------------
# propagation

def propagate_forward(h0, adj, weights, biases, activation="logistic"):
    """Run the aggregation layers; returns the list of layer outputs [H0..HL].

    ``adj`` is the normalised adjacency (or ``None`` for self-only updates).
    """
    act, _ = get_activation(activation)
    outs = [h0]
    h = h0
    for w, b in zip(weights, biases):
        m = h + adj @ h if adj is not None else h
        h = act(m @ w + b)
        outs.append(h)
    return outs


def propagate_backward(outs, adj, weights, grad_out, activation="logistic"):
    """Backpropagate ``grad_out`` (dLoss/dHL) through the layers.

    Returns ``(dH0, dW, db)`` with ``dW``/``db`` stacked per layer.
    """
    _, dact = get_activation(activation)
    n_layers = len(weights)
    d = outs[0].shape[1]
    dW = np.zeros((n_layers, d, d))
    db = np.zeros((n_layers, d))
    g = grad_out
    for layer in range(n_layers - 1, -1, -1):
        h_prev, h_out = outs[layer], outs[layer + 1]
        dz = g * dact(h_out)
        m = h_prev + adj @ h_prev if adj is not None else h_prev
        dW[layer] = m.T @ dz
        db[layer] = dz.sum(axis=0)
        dm = dz @ weights[layer].T
        g = dm + adj.T @ dm if adj is not None else dm
    return g, dW, db


def propagate(kg: KnowledgeGraph, emb: EmbeddingState, layers: int | None = None,
              activation="logistic") -> np.ndarray:
    """Entity embeddings after ``layers`` aggregation layers (all layers by default)."""
    if layers is None:
        layers = emb.layer_weight.shape[0]
    if layers < 0:
        raise DataError("layers must be >= 0")
    if layers > emb.layer_weight.shape[0]:
        raise DataError(f"state only holds {emb.layer_weight.shape[0]} layers")
    if layers == 0:
        return emb.entity.copy()
    adj = kg.normalized_adjacency()
    return propagate_forward(emb.entity, adj, emb.layer_weight[:layers], emb.layer_bias[:layers], activation)[-1]


# ---------------------------------------------------------------------------
# scoring and loss

def score_batch(emb: EmbeddingState, layered: np.ndarray, h, r, t) -> np.ndarray:
    """Squared translational distance for arrays of (h, r, t); lower is more plausible."""
    h, r, t = (np.asarray(x, dtype=np.int64) for x in (h, r, t))
    diff = layered[h] - layered[t]
    v = emb.relation[r] + np.einsum("bd,bdk->bk", diff, emb.projection[r])
    return np.einsum("bk,bk->b", v, v)


def score(emb: EmbeddingState, layered: np.ndarray, h: int, r: int, t: int) -> float:
    n_e, n_r = layered.shape[0], emb.relation.shape[0]
    for e in (h, t):
        if not 0 <= e < n_e:
            raise DataError(f"unknown entity {e}")
    if not 0 <= r < n_r:
        raise DataError(f"unknown relation {r}")
    return float(score_batch(emb, layered, [h], [r], [t])[0])


def kg_loss_and_grad(emb: EmbeddingState, adj, pos: np.ndarray, neg_tails: np.ndarray,
                     activation="logistic", with_grad=True):
    """Mean pairwise loss -ln sigma(score(neg) - score(pos)) and its gradient.

    ``pos`` is a (B, 3) array of positive triples and ``neg_tails`` the
    corrupted tails paired row-wise. Returns ``(loss, grads)`` where grads is
    an EmbeddingState-shaped tuple of arrays (or ``None``).
    """
    outs = propagate_forward(emb.entity, adj, emb.layer_weight, emb.layer_bias, activation)
    hl = outs[-1]
    h, r, t = pos[:, 0], pos[:, 1], pos[:, 2]
    proj = emb.projection[r]
    v_pos = emb.relation[r] + np.einsum("bd,bdk->bk", hl[h] - hl[t], proj)
    v_neg = emb.relation[r] + np.einsum("bd,bdk->bk", hl[h] - hl[neg_tails], proj)
    s_pos = np.einsum("bk,bk->b", v_pos, v_pos)
    s_neg = np.einsum("bk,bk->b", v_neg, v_neg)
    margin = s_neg - s_pos
    n = len(pos)
    loss = float(-log_sigmoid(margin).mean())
    if not with_grad:
        return loss, None

    # d loss / d s_pos = sigma(-margin) / n ; d loss / d s_neg = -sigma(-margin) / n
    c = _logistic(-margin) / n
    gv_pos = (2.0 * c)[:, None] * v_pos
    gv_neg = (-2.0 * c)[:, None] * v_neg
    n_rel = emb.relation.shape[0]
    d_rel = scatter_rows(r, gv_pos + gv_neg, n_rel)
    d_proj = scatter_rows(r, np.einsum("bd,bk->bdk", hl[h] - hl[t], gv_pos)
                          + np.einsum("bd,bk->bdk", hl[h] - hl[neg_tails], gv_neg), n_rel)
    g_pos_e = np.einsum("bdk,bk->bd", proj, gv_pos)
    g_neg_e = np.einsum("bdk,bk->bd", proj, gv_neg)
    d_hl = scatter_rows(np.concatenate([h, t, neg_tails]),
                        np.concatenate([g_pos_e + g_neg_e, -g_pos_e, -g_neg_e]), hl.shape[0])
    d_ent, d_w, d_b = propagate_backward(outs, adj, emb.layer_weight, d_hl, activation)
    return loss, EmbeddingState(d_ent, d_rel, d_proj, d_w, d_b)


# ---------------------------------------------------------------------------
# negative sampling

def sample_negative(kg: KnowledgeGraph, positive, rng):
    """Corrupt the tail of ``positive`` with a uniformly drawn entity.

    Redraws until the triple is absent from the graph and the tail changed.
    """
    h, r, t = (int(x) for x in positive)
    if (h, r, t) not in kg:
        raise DataError(f"positive triple {(h, r, t)} is not in the graph")
    rng = check_random_state(rng)
    for _ in range(MAX_NEGATIVE_ATTEMPTS):
        cand = int(rng.integers(kg.n_entities))
        if cand != t and (h, r, cand) not in kg:
            return (h, r, cand)
    raise DataError(f"no negative available for {(h, r, t)} after {MAX_NEGATIVE_ATTEMPTS} attempts")


def sample_negative_tails(kg: KnowledgeGraph, pos: np.ndarray, rng) -> np.ndarray:
    """Vectorised ``sample_negative`` over the rows of ``pos`` (same acceptance rule)."""
    tails = rng.integers(kg.n_entities, size=len(pos))
    bad = (tails == pos[:, 2]) | kg.contains_many(pos[:, 0], pos[:, 1], tails)
    attempts = 1
    while bad.any():
        if attempts >= MAX_NEGATIVE_ATTEMPTS:
            row = pos[np.flatnonzero(bad)[0]]
            raise DataError(f"no negative available for {tuple(int(x) for x in row)}")
        idx = np.flatnonzero(bad)
        tails[idx] = rng.integers(kg.n_entities, size=idx.size)
        bad[idx] = (tails[idx] == pos[idx, 2]) | kg.contains_many(pos[idx, 0], pos[idx, 1], tails[idx])
        attempts += 1
    return tails


# ---------------------------------------------------------------------------
# training

def sgd_step(emb: EmbeddingState, grads: EmbeddingState, lr: float) -> None:
    for p, g in zip(emb.arrays(), grads.arrays()):
        p -= lr * g


def pretrain(kg: KnowledgeGraph, hp: Hyperparams, rng=None, init: EmbeddingState | None = None):
    """Train embeddings on ``kg``; returns ``(state, per-epoch mean loss)``."""
    if len(kg) == 0:
        raise DataError("cannot pretrain on an empty knowledge graph")
    rng = check_random_state(hp.seed if rng is None else rng)
    emb = init.copy() if init is not None else init_state(
        kg.n_entities, kg.n_relations, hp.dim_entity, hp.dim_relation, hp.layers, rng)
    adj = kg.normalized_adjacency()
    pos_all = np.repeat(kg.triples, hp.negatives_per_positive, axis=0)
    trace = []
    for epoch in range(1, hp.epochs_pretrain + 1):
        order = rng.permutation(len(pos_all))
        total, count = 0.0, 0
        for start in range(0, len(order), hp.batch_size):
            batch = pos_all[order[start:start + hp.batch_size]]
            neg = sample_negative_tails(kg, batch, rng)
            loss, grads = kg_loss_and_grad(emb, adj, batch, neg, hp.activation)
            if not np.isfinite(loss):
                raise NumericalError(f"pretraining diverged at epoch {epoch} (loss={loss})")
            sgd_step(emb, grads, hp.pretrain_lr)
            total += loss * len(batch)
            count += len(batch)
        if not emb.all_finite():
            raise NumericalError(f"pretraining diverged at epoch {epoch} (non-finite parameters)")
        trace.append(total / count)
        logger.debug("pretrain epoch %d loss %.5f", epoch, trace[-1])
    return emb, trace


def triple_auc(emb: EmbeddingState, layered, positives: np.ndarray, negatives: np.ndarray) -> float:
    """Probability that a positive outscores (lower distance) a negative; ties count half."""
    sp_ = score_batch(emb, layered, positives[:, 0], positives[:, 1], positives[:, 2])
    sn = score_batch(emb, layered, negatives[:, 0], negatives[:, 1], negatives[:, 2])
    both = np.concatenate([-sp_, -sn])
    ranks = rankdata(both)
    n_p, n_n = len(sp_), len(sn)
    return float((ranks[:n_p].sum() - n_p * (n_p + 1) / 2) / (n_p * n_n))


# ---------------------------------------------------------------------------
# checkpoint file: header + little-endian float64 rows, JSON sidecar

MAGIC = b"DKGE"
VERSION = 1
_HEADER = struct.Struct("<4sI5Q")


def save_checkpoint(emb: EmbeddingState, path, hp: Hyperparams | None = None, extra: dict | None = None):
    path = Path(path)
    d, k, n_layers = emb.dims
    header = _HEADER.pack(MAGIC, VERSION, d, k, n_layers, emb.entity.shape[0], emb.relation.shape[0])
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in emb.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    sidecar = {"hyperparams": hp.to_dict() if hp is not None else None}
    if extra:
        sidecar.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Returns ``(EmbeddingState, sidecar dict)``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated checkpoint header")
    magic, version, d, k, n_layers, n_e, n_r = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    shapes = [(n_e, d), (n_r, k), (n_r, d, k), (n_layers, d, d), (n_layers, d)]
    arrays, offset = [], _HEADER.size
    for shape in shapes:
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(raw):
            raise DataError(f"{path}: truncated checkpoint body")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64))
        offset = end
    if offset != len(raw):
        raise DataError(f"{path}: trailing bytes after checkpoint body")
    side = Path(str(path) + ".json")
    sidecar = json.loads(side.read_text()) if side.exists() else {}
    return EmbeddingState(*arrays), sidecar


class KGPretrainer(BaseEstimator):
    """Estimator wrapper around :func:`pretrain`.

    ``fit(kg)`` learns ``state_`` and ``loss_trace_``; ``transform()``
    returns the layered entity embeddings.
    """

    def __init__(self, dim_entity=32, dim_relation=32, layers=1, epochs=50, lr=1.0,
                 batch_size=128, negatives_per_positive=1, activation="logistic", random_state=0):
        self.dim_entity = dim_entity
        self.dim_relation = dim_relation
        self.layers = layers
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.negatives_per_positive = negatives_per_positive
        self.activation = activation
        self.random_state = random_state

    def _hyperparams(self):
        return Hyperparams(dim_entity=self.dim_entity, dim_relation=self.dim_relation, layers=self.layers,
                           epochs_pretrain=self.epochs, pretrain_lr=self.lr, batch_size=self.batch_size,
                           negatives_per_positive=self.negatives_per_positive, activation=self.activation,
                           seed=self.random_state if isinstance(self.random_state, int) else 0)

    def fit(self, kg: KnowledgeGraph, y=None):
        get_activation(self.activation)
        hp = self._hyperparams()
        self.state_, self.loss_trace_ = pretrain(kg, hp, rng=check_random_state(self.random_state))
        self.kg_ = kg
        return self

    def transform(self, kg: KnowledgeGraph | None = None):
        check_is_fitted(self, "state_")
        return propagate(kg if kg is not None else self.kg_, self.state_, activation=self.activation)

    def score_triples(self, triples) -> np.ndarray:
        check_is_fitted(self, "state_")
        triples = np.asarray(triples, dtype=np.int64)
        layered = self.transform()
        return score_batch(self.state_, layered, triples[:, 0], triples[:, 1], triples[:, 2])

    def save(self, path):
        check_is_fitted(self, "state_")
        save_checkpoint(self.state_, path, self._hyperparams())
