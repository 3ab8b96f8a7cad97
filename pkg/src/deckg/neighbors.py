"""Server-side neighbour identification from desensitized uploads."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .domain import DataError, PoiCatalog


@dataclass(frozen=True)
class UserProfile:
    user: int
    mean_emb: np.ndarray
    visited_segments: Counter = field(compare=False)
    primary_segment: int = -1


@dataclass(frozen=True)
class NeighborSet:
    owner: int
    geo: tuple
    sem: tuple
    weight: dict

    @property
    def members(self) -> tuple:
        return self.geo + self.sem

    def to_json(self) -> dict:
        return {"geo": list(self.geo), "sem": list(self.sem),
                "weights": {str(k): v for k, v in sorted(self.weight.items())}}

    @classmethod
    def from_json(cls, owner, data) -> "NeighborSet":
        return cls(int(owner), tuple(data["geo"]), tuple(data["sem"]),
                   {int(k): float(v) for k, v in data["weights"].items()})


def build_profile(upload, catalog: PoiCatalog, poi_emb) -> UserProfile:
    if len(upload.pois) == 0:
        raise DataError(f"user {upload.user}: cannot profile an empty history")
    pois = np.asarray(upload.pois, dtype=np.int64)
    mean = np.asarray(poi_emb, dtype=np.float64)[pois].mean(axis=0)
    segs = Counter(int(s) for s in catalog.poi_segment[pois])
    top = max(segs.values())
    primary = min(s for s, c in segs.items() if c == top)
    return UserProfile(upload.user, mean, segs, primary)


def build_profiles(uploads, catalog, poi_emb) -> list:
    return [build_profile(u, catalog, poi_emb) for u in sorted(uploads, key=lambda u: u.user)]


def user_distance(a: UserProfile, b: UserProfile) -> float:
    """Squared L2 distance between mean upload embeddings (smaller = more alike)."""
    diff = a.mean_emb - b.mean_emb
    return float(diff @ diff)


def assign_geo_neighbors(profiles, cap: int) -> dict:
    """Users who visited ``u``'s primary segment, capped by in-segment visit count."""
    if len(profiles) < 2:
        raise DataError("neighbour assignment needs at least two users")
    out = {}
    for p in profiles:
        cands = [(-q.visited_segments.get(p.primary_segment, 0), q.user) for q in profiles
                 if q.user != p.user and q.visited_segments.get(p.primary_segment, 0) > 0]
        cands.sort()
        out[p.user] = [u for _, u in cands[:cap]]
    return out


def distance_matrix(profiles) -> np.ndarray:
    means = np.vstack([p.mean_emb for p in profiles])
    out = np.empty((len(profiles), len(profiles)))
    for i in range(len(profiles)):
        diff = means - means[i]
        out[i] = np.einsum("ij,ij->i", diff, diff)
    return out


def assign_semantic_neighbors(profiles, geo_sets: dict) -> dict:
    """For each user, the ``|geo|`` closest non-geo users by :func:`user_distance`."""
    ids = np.array([p.user for p in profiles])
    dist = distance_matrix(profiles)
    out = {}
    for i, p in enumerate(profiles):
        want = len(geo_sets.get(p.user, ()))
        if not want:
            out[p.user] = []
            continue
        keep = ~np.isin(ids, list(geo_sets[p.user]) + [p.user])
        order = np.lexsort((ids[keep], dist[i, keep]))
        out[p.user] = ids[keep][order[:want]].tolist()
    return out


def affinity_weights(owner: UserProfile, neighbors) -> dict:
    """Softmax of negative distances over the neighbour list."""
    if not neighbors:
        raise DataError(f"user {owner.user} has no neighbours to weight")
    d = np.array([user_distance(owner, q) for q in neighbors])
    w = np.exp(-(d - d.min()))
    w /= w.sum()
    return {q.user: float(x) for q, x in zip(neighbors, w)}


def assign_neighbors(profiles, cap: int) -> dict:
    geo = assign_geo_neighbors(profiles, cap)
    sem = assign_semantic_neighbors(profiles, geo)
    by_id = {p.user: p for p in profiles}
    out = {}
    for p in profiles:
        members = [by_id[u] for u in geo[p.user] + sem[p.user]]
        weights = affinity_weights(p, members) if members else {}
        out[p.user] = NeighborSet(p.user, tuple(geo[p.user]), tuple(sem[p.user]), weights)
    return out


def neighbors_to_json(sets: dict) -> dict:
    return {str(u): s.to_json() for u, s in sorted(sets.items())}


def neighbors_from_json(data: dict) -> dict:
    return {int(u): NeighborSet.from_json(u, v) for u, v in data.items()}


class NeighborAssigner(BaseEstimator):
    """Geographic + semantic neighbour sets with affinity weights.

    ``fit(uploads, catalog, poi_embeddings)`` sets ``profiles_`` and
    ``neighbor_sets_`` (user id -> :class:`NeighborSet`).
    """

    def __init__(self, cap=10):
        self.cap = cap

    def fit(self, uploads, catalog, poi_embeddings):
        if self.cap < 1:
            raise DataError("cap must be >= 1")
        self.profiles_ = build_profiles(uploads, catalog, poi_embeddings)
        self.neighbor_sets_ = assign_neighbors(self.profiles_, self.cap)
        return self

    def to_json(self) -> dict:
        check_is_fitted(self, "neighbor_sets_")
        return neighbors_to_json(self.neighbor_sets_)
