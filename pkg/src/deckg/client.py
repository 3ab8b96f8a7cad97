"""On-device model: local prediction, loss, shared gradients and updates.

A client holds its own copy of the embeddings of its sub-graph entities and
runs the aggregation layers over the sub-graph only. POIs outside the
sub-graph are scored from the frozen pretrained table ("cold" items): the
server's full-graph propagated embedding of each POI, held read-only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .domain import DataError, NumericalError
from .kgstore import SubKnowledgeGraph, normalized_adjacency
from .pretrain import log_sigmoid, propagate_backward, propagate_forward, scatter_rows


@dataclass
class Theta:
    """Auxiliary local parameters: layer weights/biases and the optional user bridge."""

    weights: np.ndarray            # (L, d, d)
    biases: np.ndarray             # (L, d)
    bridge: Optional[np.ndarray] = None  # (K, d) when K != d

    def copy(self) -> "Theta":
        return Theta(self.weights.copy(), self.biases.copy(),
                     None if self.bridge is None else self.bridge.copy())


@dataclass
class LocalGradients:
    user: np.ndarray
    entity: np.ndarray  # rows aligned with ClientState.entity_ids
    theta: Theta


class ClientState:
    """Per-user model state; owned by exactly one worker at a time."""

    def __init__(self, user, user_emb, subkg: SubKnowledgeGraph, entity_table, theta: Theta,
                 train_pois, frozen_poi_emb, poi_entity, activation="logistic"):
        self.user = int(user)
        self.user_emb = np.array(user_emb, dtype=np.float64)
        self.subkg = subkg
        self.entity_ids = np.asarray(subkg.entities, dtype=np.int64)
        self.local_emb = np.array(entity_table[self.entity_ids], dtype=np.float64)
        self.theta = theta
        self.train_pois = np.unique(np.asarray(train_pois, dtype=np.int64))
        self.frozen_poi_emb = frozen_poi_emb
        self.poi_entity = poi_entity
        self.activation = activation
        self.adj = _local_adjacency(subkg, self.entity_ids)

    @property
    def n_pois(self):
        return len(self.poi_entity)

    def locate(self, pois):
        """Local row of each POI's entity, or -1 for cold POIs."""
        ents = self.poi_entity[np.asarray(pois, dtype=np.int64)]
        if not len(self.entity_ids):
            return np.full(len(ents), -1, dtype=np.int64)
        rows = np.minimum(np.searchsorted(self.entity_ids, ents), len(self.entity_ids) - 1)
        return np.where(self.entity_ids[rows] == ents, rows, -1)

    def user_vector(self):
        return self.user_emb if self.theta.bridge is None else self.user_emb @ self.theta.bridge

    def snapshot(self):
        return (self.user_emb.copy(), self.local_emb.copy(), self.theta.copy())

    def restore(self, snap):
        self.user_emb, self.local_emb, self.theta = snap[0].copy(), snap[1].copy(), snap[2].copy()

    def all_finite(self) -> bool:
        parts = [self.user_emb, self.local_emb, self.theta.weights, self.theta.biases]
        if self.theta.bridge is not None:
            parts.append(self.theta.bridge)
        return all(np.all(np.isfinite(p)) for p in parts)


def _local_adjacency(subkg, entity_ids):
    n = len(entity_ids)
    if not len(subkg.triples):
        return sp.csr_matrix((n, n))
    h = np.searchsorted(entity_ids, subkg.triples[:, 0])
    t = np.searchsorted(entity_ids, subkg.triples[:, 2])
    adj = sp.coo_matrix((np.ones(2 * len(h)), (np.concatenate([h, t]), np.concatenate([t, h]))), shape=(n, n)).tocsr()
    adj.sum_duplicates()
    adj.data[:] = 1.0
    return normalized_adjacency(adj)


def _layered(state: ClientState, pois):
    """Forward pass for ``pois``; returns embeddings plus caches for backprop."""
    rows = state.locate(pois)
    warm = rows >= 0
    th = state.theta
    local_outs = propagate_forward(state.local_emb, state.adj, th.weights, th.biases, state.activation)
    emb = np.empty((len(rows), state.frozen_poi_emb.shape[1]))
    emb[warm] = local_outs[-1][rows[warm]]
    emb[~warm] = state.frozen_poi_emb[np.asarray(pois, dtype=np.int64)[~warm]]
    return emb, rows, warm, local_outs


def predict_many(state: ClientState, pois) -> np.ndarray:
    """Visit likelihood for each POI in ``pois``."""
    pois = np.asarray(pois, dtype=np.int64)
    if pois.size and (pois.min() < 0 or pois.max() >= state.n_pois):
        raise DataError("unknown poi id")
    emb = _layered(state, pois)[0]
    return expit(emb @ state.user_vector())


def predict(state: ClientState, poi: int) -> float:
    return float(predict_many(state, [poi])[0])


def is_cold(state: ClientState, poi: int) -> bool:
    return bool(state.locate([poi])[0] < 0)


def _check_batch(pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if not len(pairs):
        raise DataError("empty batch")
    return pairs


def local_loss(state: ClientState, pairs) -> float:
    """Mean of -ln sigma(y_pos - y_neg) over (positive, negative) POI pairs."""
    pairs = _check_batch(pairs)
    y = predict_many(state, pairs.ravel()).reshape(-1, 2)
    return float(-log_sigmoid(y[:, 0] - y[:, 1]).mean())


def local_loss_and_grads(state: ClientState, pairs):
    pairs = _check_batch(pairs)
    n = len(pairs)
    flat = pairs.ravel()
    emb, rows, warm, local_outs = _layered(state, flat)
    u = state.user_vector()
    y = expit(emb @ u)
    yp, yn = y[0::2], y[1::2]
    delta = yp - yn
    loss = float(-log_sigmoid(delta).mean())

    g = -expit(-delta) / n  # dL/d delta
    coef = np.empty(2 * n)
    coef[0::2] = g * yp * (1 - yp)
    coef[1::2] = -g * yn * (1 - yn)
    d_u = coef @ emb
    d_emb = coef[:, None] * u[None, :]

    th = state.theta
    d = emb.shape[1]
    if len(state.entity_ids):
        d_local = scatter_rows(rows[warm], d_emb[warm], len(state.entity_ids))
        d_entity, dw, db = propagate_backward(local_outs, state.adj, th.weights, d_local, state.activation)
    else:
        d_entity = np.zeros((0, d))
        dw, db = np.zeros_like(th.weights), np.zeros_like(th.biases)

    if th.bridge is None:
        d_user, d_bridge = d_u, None
    else:
        d_user = th.bridge @ d_u
        d_bridge = np.outer(state.user_emb, d_u)
    return loss, LocalGradients(d_user, d_entity, Theta(dw, db, d_bridge))


@dataclass(frozen=True)
class GradientMessage:
    """Entity-embedding gradients one client sends to its neighbours.

    ``entity_ids`` is the sender's full sub-graph entity list (rows with no
    gradient are zero), so the key set carries nothing beyond what the
    server already assigned.
    """

    sender: int
    round: int
    entity_ids: np.ndarray
    values: np.ndarray

    @property
    def grads(self) -> dict:
        return {int(e): v for e, v in zip(self.entity_ids, self.values)}

    def to_bytes(self) -> bytes:
        n, d = self.values.shape if self.values.ndim == 2 else (0, 0)
        head = struct.pack("<qqqq", self.sender, self.round, n, d)
        return head + np.asarray(self.entity_ids, dtype="<i8").tobytes() + np.asarray(self.values, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "GradientMessage":
        sender, rnd, n, d = struct.unpack_from("<qqqq", raw)
        off = 32
        ids = np.frombuffer(raw, dtype="<i8", count=n, offset=off).astype(np.int64)
        vals = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off + 8 * n).reshape(n, d).astype(np.float64)
        if off + 8 * n + 8 * n * d != len(raw):
            raise DataError("gradient message has trailing or missing bytes")
        return cls(sender, rnd, ids, vals)


def compute_shared_gradients(state: ClientState, pairs, round_no: int = 0, grads: LocalGradients | None = None):
    """Package the entity part of the local gradient as a :class:`GradientMessage`."""
    if grads is None:
        grads = local_loss_and_grads(state, pairs)[1]
    return GradientMessage(state.user, int(round_no), state.entity_ids.copy(), grads.entity.copy())


def apply_update(state: ClientState, own: LocalGradients, inbox, weights: dict, gamma: float, mu: float):
    """Blend own and neighbour entity gradients, then take one SGD step in place.

    Entity rows move by ``gamma * ((1 - mu) * own + mu * sum_j w_j * grad_j)``
    where neighbour gradients for entities outside a sender's sub-graph count
    as zero. User embedding and layer parameters follow the local gradient.
    """
    senders = [m.sender for m in inbox]
    if len(set(senders)) != len(senders) or set(senders) != set(weights):
        raise DataError(f"user {state.user}: weights {sorted(weights)} do not match inbox senders {sorted(senders)}")
    if not 0.0 <= mu <= 1.0:
        raise DataError("mu must lie in [0, 1]")
    agg = np.zeros_like(state.local_emb)
    for msg in sorted(inbox, key=lambda m: m.sender):
        if not len(msg.entity_ids) or not len(state.entity_ids):
            continue
        rows = np.minimum(np.searchsorted(state.entity_ids, msg.entity_ids), len(state.entity_ids) - 1)
        hit = state.entity_ids[rows] == msg.entity_ids
        agg[rows[hit]] += weights[msg.sender] * msg.values[hit]
    state.local_emb -= gamma * ((1.0 - mu) * own.entity + mu * agg)
    state.user_emb -= gamma * own.user
    th = state.theta
    th.weights -= gamma * own.theta.weights
    th.biases -= gamma * own.theta.biases
    if th.bridge is not None:
        th.bridge -= gamma * own.theta.bridge
    if not state.all_finite():
        raise NumericalError(f"user {state.user}: non-finite parameters after update")
    return state
