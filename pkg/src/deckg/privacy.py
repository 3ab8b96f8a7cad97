"""Client-side desensitisation of check-in histories.

Each visited POI is swapped for another POI of the same category, drawn with
probability proportional to ``exp(epsilon * cosine similarity)`` to the
original. A random-response baseline over the full indicator vector is kept
for comparison experiments.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .domain import CheckInHistory, DataError, PoiCatalog
from .validation import check_epsilon, check_random_state, user_stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DesensitizedHistory:
    """X'(u): the substituted POI list a client uploads."""

    user: int
    pois: tuple

    def __len__(self):
        return len(self.pois)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DataError("degenerate embedding: zero norm")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(emb):
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("degenerate embedding: zero norm")
    return emb / norms


def selection_probabilities(similarities, epsilon) -> np.ndarray:
    """Exponential-mechanism weights over a vector of similarities."""
    logits = check_epsilon(epsilon) * np.asarray(similarities, dtype=np.float64)
    return np.exp(logits - logsumexp(logits))


def selection_distribution(target, candidates, emb, epsilon) -> dict:
    """``{candidate: probability}`` for replacing ``target``.

    ``emb`` is indexed by POI id (one row per POI).
    """
    candidates = [int(c) for c in candidates]
    if not candidates:
        raise DataError(f"no substitution candidates for poi {target}")
    unit = _unit_rows(np.asarray(emb, dtype=np.float64)[[target] + candidates])
    sims = np.clip(unit[1:] @ unit[0], -1.0, 1.0)
    return dict(zip(candidates, selection_probabilities(sims, epsilon).tolist()))


def candidate_set(poi, catalog: PoiCatalog) -> np.ndarray:
    """Same-category POIs other than ``poi``."""
    members = catalog.pois_in_category(catalog.category_of(poi))
    return members[members != poi]


def _draw_cdf(cdf, rng):
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(cdf) - 1)


def desensitize(history: CheckInHistory, catalog: PoiCatalog, emb, epsilon, rng) -> DesensitizedHistory:
    """Replace every position independently; singleton-category POIs pass through.

    ``emb`` holds one embedding row per POI (layer-0 pretrained vectors).
    """
    if len(history) == 0:
        raise DataError(f"user {history.user}: empty history")
    epsilon = check_epsilon(epsilon)
    rng = check_random_state(rng)
    emb = np.asarray(emb, dtype=np.float64)
    unit = _unit_rows(emb)
    out = []
    cache = {}  # poi -> (candidates, cdf); histories repeat POIs
    for poi in history.pois:
        if poi not in cache:
            cands = candidate_set(poi, catalog)
            sims = np.clip(unit[cands] @ unit[poi], -1.0, 1.0)
            cache[poi] = (cands, np.cumsum(selection_probabilities(sims, epsilon)) if cands.size else None)
        cands, cdf = cache[poi]
        out.append(int(cands[_draw_cdf(cdf, rng)]) if cands.size else int(poi))
    return DesensitizedHistory(history.user, tuple(out))


def flip_probability(epsilon) -> float:
    return float(1.0 / (1.0 + np.exp(check_epsilon(epsilon))))


def random_response(history: CheckInHistory, n_pois: int, epsilon, rng) -> np.ndarray:
    """Perturbed visit-indicator vector: each entry flips with probability 1/(1+e^eps)."""
    rng = check_random_state(rng)
    truth = np.zeros(n_pois, dtype=bool)
    truth[list(history.pois)] = True
    return truth ^ (rng.random(n_pois) < flip_probability(epsilon))


def segment_distortion(histories, uploads, catalog: PoiCatalog) -> float:
    """Share of substituted positions whose segment differs from the original's."""
    changed = total = 0
    for hist, up in zip(histories, uploads):
        a = catalog.poi_segment[list(hist.pois)]
        b = catalog.poi_segment[list(up.pois)]
        changed += int(np.sum(a != b))
        total += len(a)
    return changed / total if total else 0.0


class ExponentialDesensitizer(TransformerMixin, BaseEstimator):
    """Same-category substitution with an exponential mechanism.

    ``fit(catalog, poi_embeddings)`` stores the public catalog and the
    embeddings used for similarity; ``transform(histories)`` returns one
    :class:`DesensitizedHistory` per input, drawing from a per-user stream
    derived from ``random_state``.
    """

    def __init__(self, epsilon=4.0, random_state=0):
        self.epsilon = epsilon
        self.random_state = random_state

    def fit(self, catalog: PoiCatalog, poi_embeddings=None):
        check_epsilon(self.epsilon)
        emb = np.asarray(poi_embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != catalog.n_pois:
            raise DataError(f"expected one embedding row per poi ({catalog.n_pois}), got shape {emb.shape}")
        self.catalog_ = catalog
        self.embeddings_ = emb
        return self

    def transform(self, histories):
        check_is_fitted(self, "catalog_")
        out = [desensitize(h, self.catalog_, self.embeddings_, self.epsilon,
                           user_stream(self.random_state, h.user, "desensitize")) for h in histories]
        self.n_passthrough_ = sum(
            int(len(candidate_set(p, self.catalog_)) == 0) for h in histories for p in h.pois)
        if self.n_passthrough_:
            logger.info("%d check-ins in singleton categories were uploaded unchanged", self.n_passthrough_)
        return out


class RandomResponse(TransformerMixin, BaseEstimator):
    """Baseline perturbation of the full POI indicator vector."""

    def __init__(self, epsilon=4.0, random_state=0):
        self.epsilon = epsilon
        self.random_state = random_state

    def fit(self, n_pois, y=None):
        check_epsilon(self.epsilon)
        self.n_pois_ = int(n_pois)
        return self

    def transform(self, histories):
        check_is_fitted(self, "n_pois_")
        return np.vstack([random_response(h, self.n_pois_, self.epsilon,
                                          user_stream(self.random_state, h.user, "random_response"))
                          for h in histories])
