"""Identifiers, records and hyperparameters shared across the simulator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np


class DeckgError(Exception):
    """Base class for every error raised by the package."""


class DataError(DeckgError, ValueError):
    """Malformed, dangling or inconsistent input data."""


class NumericalError(DeckgError, ArithmeticError):
    """Training produced non-finite values."""


# Identifiers are plain dense ints; the aliases document intent only.
UserId = int
PoiId = int
EntityId = int
RelationId = int
CategoryId = int
SegmentId = int


class Triple(NamedTuple):
    head: EntityId
    relation: RelationId
    tail: EntityId


@dataclass(frozen=True)
class CheckInRecord:
    user: UserId
    poi: PoiId
    category: CategoryId
    segment: SegmentId


class PoiCatalog:
    """POI -> category / segment lookups plus the mapping of all three into entity ids.

    Instances are immutable after construction.
    """

    def __init__(self, poi_category, poi_segment, n_categories, n_segments,
                 poi_entity=None, category_entity=None, segment_entity=None):
        self.poi_category = np.asarray(poi_category, dtype=np.int64)
        self.poi_segment = np.asarray(poi_segment, dtype=np.int64)
        self.n_pois = len(self.poi_category)
        self.n_categories = int(n_categories)
        self.n_segments = int(n_segments)
        if len(self.poi_segment) != self.n_pois:
            raise DataError("poi_category and poi_segment differ in length")
        for name, arr, bound in (("category", self.poi_category, self.n_categories),
                                 ("segment", self.poi_segment, self.n_segments)):
            bad = np.flatnonzero((arr < 0) | (arr >= bound))
            if bad.size:
                raise DataError(f"dangling {name} id for poi {int(bad[0])}")

        # default layout: POIs, then categories, then segments
        if poi_entity is None:
            poi_entity = np.arange(self.n_pois)
        if category_entity is None:
            category_entity = self.n_pois + np.arange(self.n_categories)
        if segment_entity is None:
            segment_entity = self.n_pois + self.n_categories + np.arange(self.n_segments)
        self.poi_entity = np.asarray(poi_entity, dtype=np.int64)
        self.category_entity = np.asarray(category_entity, dtype=np.int64)
        self.segment_entity = np.asarray(segment_entity, dtype=np.int64)
        allents = np.concatenate([self.poi_entity, self.category_entity, self.segment_entity])
        if len(np.unique(allents)) != len(allents):
            raise DataError("poi/category/segment entity mappings must be injective and disjoint")

        order = np.argsort(self.poi_category, kind="stable")
        bounds = np.searchsorted(self.poi_category[order], np.arange(self.n_categories + 1))
        self._cat_members = [order[bounds[c]:bounds[c + 1]] for c in range(self.n_categories)]
        order = np.argsort(self.poi_segment, kind="stable")
        bounds = np.searchsorted(self.poi_segment[order], np.arange(self.n_segments + 1))
        self._seg_members = [order[bounds[s]:bounds[s + 1]] for s in range(self.n_segments)]
        for arr in (self.poi_category, self.poi_segment, self.poi_entity,
                    self.category_entity, self.segment_entity):
            arr.setflags(write=False)

    def __len__(self):
        return self.n_pois

    def _check_poi(self, poi):
        if not 0 <= poi < self.n_pois:
            raise DataError(f"unknown poi {poi}")

    def category_of(self, poi: PoiId) -> CategoryId:
        self._check_poi(poi)
        return int(self.poi_category[poi])

    def segment_of(self, poi: PoiId) -> SegmentId:
        self._check_poi(poi)
        return int(self.poi_segment[poi])

    def pois_in_category(self, category: CategoryId) -> np.ndarray:
        """Sorted POI ids of one category."""
        return self._cat_members[category]

    def pois_in_segment(self, segment: SegmentId) -> np.ndarray:
        return self._seg_members[segment]

    def entity_of(self, poi: PoiId) -> EntityId:
        self._check_poi(poi)
        return int(self.poi_entity[poi])

    def entities_of(self, pois) -> np.ndarray:
        return self.poi_entity[np.asarray(pois, dtype=np.int64)]

    def record(self, user: UserId, poi: PoiId) -> CheckInRecord:
        return CheckInRecord(user, poi, self.category_of(poi), self.segment_of(poi))


def register_catalog(pois: Iterable[Sequence[int]], n_categories: Optional[int] = None,
                     n_segments: Optional[int] = None, **entity_maps) -> PoiCatalog:
    """Build a catalog from ``(poi, category, segment)`` rows with dense poi ids.

    ``n_categories`` / ``n_segments`` bound the valid ids; when omitted they
    are inferred as ``max + 1``.
    """
    rows = [tuple(int(v) for v in row) for row in pois]
    seen = {}
    for poi, cat, seg in rows:
        if poi in seen:
            raise DataError(f"duplicate poi {poi}")
        seen[poi] = (cat, seg)
    n = len(rows)
    if sorted(seen) != list(range(n)):
        missing = sorted(set(range(n)) - set(seen))
        raise DataError(f"poi ids must be dense 0..{n - 1}; missing {missing[:5]}")
    cats = np.array([seen[p][0] for p in range(n)], dtype=np.int64)
    segs = np.array([seen[p][1] for p in range(n)], dtype=np.int64)
    if n_categories is None:
        n_categories = int(cats.max()) + 1 if n else 0
    if n_segments is None:
        n_segments = int(segs.max()) + 1 if n else 0
    return PoiCatalog(cats, segs, n_categories, n_segments, **entity_maps)


@dataclass(frozen=True)
class CheckInHistory:
    """X(u): the ordered POIs a user visited, with their categories."""

    user: UserId
    pois: tuple
    categories: tuple

    def __post_init__(self):
        if len(self.pois) != len(self.categories):
            raise DataError(f"user {self.user}: pois and categories differ in length")

    @classmethod
    def from_pois(cls, user: UserId, pois: Iterable[int], catalog: PoiCatalog) -> "CheckInHistory":
        pois = tuple(int(p) for p in pois)
        return cls(int(user), pois, tuple(catalog.category_of(p) for p in pois))

    def __len__(self):
        return len(self.pois)

    def to_lines(self) -> list:
        return [f"{self.user}\t{p}\t{c}" for p, c in zip(self.pois, self.categories)]

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "CheckInHistory":
        user = None
        pois, cats = [], []
        for line in lines:
            u, p, c = (int(x) for x in line.rstrip("\n").split("\t"))
            if user is None:
                user = u
            elif u != user:
                raise DataError(f"mixed users {user} and {u} in one history")
            pois.append(p)
            cats.append(c)
        if user is None:
            raise DataError("empty history block")
        return cls(user, tuple(pois), tuple(cats))


@dataclass(frozen=True)
class Hyperparams:
    epsilon: float = 4.0
    mu: float = 0.5
    gamma: float = 10.0
    pretrain_lr: float = 1.0
    dim_entity: int = 32
    dim_relation: int = 32
    dim_user: int = 32
    layers: int = 1
    hop_limit: Optional[int] = None
    neighbor_cap: int = 10
    epochs_pretrain: int = 50
    rounds_train: int = 50
    negatives_per_positive: int = 1
    batch_size: int = 128
    activation: str = "logistic"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise DataError(f"mu must lie in [0, 1], got {self.mu}")
        if self.epsilon < 0:
            raise DataError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.gamma <= 0 or self.pretrain_lr <= 0:
            raise DataError("learning rates must be positive")
        for name in ("dim_entity", "dim_relation", "dim_user", "neighbor_cap",
                     "epochs_pretrain", "negatives_per_positive", "batch_size"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.rounds_train < 0:
            raise DataError("rounds_train must be >= 0")
        if self.layers < 0:
            raise DataError("layers must be >= 0")
        if self.hop_limit is not None and self.hop_limit < 1:
            raise DataError("hop_limit must be a positive integer or None")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "Hyperparams":
        return Hyperparams.from_dict({**self.to_dict(), **changes})
