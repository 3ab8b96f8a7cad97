"""Frozen triple store and the per-user sub-graph partitioner."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp

from .domain import DataError, Triple


def _as_triple_array(triples) -> np.ndarray:
    arr = np.asarray(list(triples) if not isinstance(triples, np.ndarray) else triples, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DataError(f"triples must have shape (n, 3), got {arr.shape}")
    return arr


class KnowledgeGraph:
    """Immutable set of (head, relation, tail) triples over dense entity/relation ids.

    Triples are kept in canonical (sorted) order. Two indices are built once:
    a directed out-index (CSR by head) and an undirected adjacency of distinct
    neighbours used for propagation degrees.
    """

    def __init__(self, triples, n_entities: int, n_relations: int):
        arr = _as_triple_array(triples)
        self.n_entities = int(n_entities)
        self.n_relations = int(n_relations)
        if arr.size:
            if arr[:, [0, 2]].min() < 0 or arr[:, [0, 2]].max() >= self.n_entities:
                raise DataError("triple references an entity outside the registered range")
            if arr[:, 1].min() < 0 or arr[:, 1].max() >= self.n_relations:
                raise DataError("triple references an unregistered relation")
        order = np.lexsort((arr[:, 2], arr[:, 1], arr[:, 0]))
        arr = arr[order]
        keys = self._encode(arr[:, 0], arr[:, 1], arr[:, 2])
        if keys.size and np.any(keys[1:] == keys[:-1]):
            dup = arr[1:][keys[1:] == keys[:-1]][0]
            raise DataError(f"duplicate triple {tuple(int(v) for v in dup)}")
        self.triples = arr
        self._keys = keys  # sorted, since arr is lexsorted by (h, r, t)
        self.out_ptr = np.searchsorted(arr[:, 0], np.arange(self.n_entities + 1))

        heads, tails = arr[:, 0], arr[:, 2]
        adj = sp.coo_matrix((np.ones(2 * len(arr)), (np.concatenate([heads, tails]), np.concatenate([tails, heads]))),
                            shape=(self.n_entities, self.n_entities)).tocsr()
        adj.sum_duplicates()
        adj.data[:] = 1.0
        self._adj = adj
        self.degrees = np.diff(adj.indptr).astype(np.int64)
        for a in (self.triples, self._keys, self.out_ptr, self.degrees):
            a.setflags(write=False)

    def _encode(self, h, r, t):
        return (np.asarray(h, dtype=np.int64) * self.n_relations + r) * self.n_entities + t

    def __len__(self):
        return len(self.triples)

    def __contains__(self, triple) -> bool:
        h, r, t = triple
        key = self._encode(h, r, t)
        i = np.searchsorted(self._keys, key)
        return bool(i < len(self._keys) and self._keys[i] == key)

    def contains_many(self, h, r, t) -> np.ndarray:
        keys = self._encode(h, r, t)
        idx = np.minimum(np.searchsorted(self._keys, keys), max(len(self._keys) - 1, 0))
        if not len(self._keys):
            return np.zeros(keys.shape, dtype=bool)
        return self._keys[idx] == keys

    @property
    def entities(self) -> range:
        return range(self.n_entities)

    @property
    def relations(self) -> range:
        return range(self.n_relations)

    def check_entity(self, e):
        if not 0 <= e < self.n_entities:
            raise DataError(f"unknown entity {e}")

    def out_edges(self, head) -> np.ndarray:
        """(relation, tail) rows leaving ``head``."""
        self.check_entity(head)
        return self.triples[self.out_ptr[head]:self.out_ptr[head + 1], 1:]

    def neighbors(self, e) -> np.ndarray:
        """Distinct entities adjacent to ``e`` in either direction."""
        self.check_entity(e)
        return self._adj.indices[self._adj.indptr[e]:self._adj.indptr[e + 1]]

    def iter_triples(self):
        for h, r, t in self.triples:
            yield Triple(int(h), int(r), int(t))

    def normalized_adjacency(self) -> sp.csr_matrix:
        """Sparse matrix with entry 1/sqrt(deg(t) deg(h)) for every adjacent pair (t, h)."""
        return normalized_adjacency(self._adj)

    def subgraph(self, triples) -> "KnowledgeGraph":
        return KnowledgeGraph(triples, self.n_entities, self.n_relations)


def normalized_adjacency(adj: sp.csr_matrix) -> sp.csr_matrix:
    deg = np.diff(adj.indptr).astype(np.float64)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    return sp.csr_matrix(sp.diags(inv) @ adj @ sp.diags(inv))


def degree(kg: KnowledgeGraph, e: int) -> int:
    """Number of distinct entities adjacent to ``e``, both directions counted."""
    kg.check_entity(e)
    return int(kg.degrees[e])


def reachable_heads(kg: KnowledgeGraph, seeds: Iterable[int], hop_limit: Optional[int] = None) -> set:
    """Entities reachable from ``seeds`` along directed out-edges, seeds included.

    ``hop_limit`` caps the number of edge traversals; ``0`` returns the seeds.
    """
    seeds = np.unique(np.asarray(list(seeds), dtype=np.int64))
    for s in seeds:
        kg.check_entity(int(s))
    return set(_closure(kg, seeds, hop_limit).tolist())


def _closure(kg: KnowledgeGraph, seeds: np.ndarray, hop_limit: Optional[int]) -> np.ndarray:
    visited = np.zeros(kg.n_entities, dtype=bool)
    visited[seeds] = True
    frontier = seeds
    hops = 0
    tails = kg.triples[:, 2]
    while frontier.size and (hop_limit is None or hops < hop_limit):
        starts, stops = kg.out_ptr[frontier], kg.out_ptr[frontier + 1]
        counts = stops - starts
        if not counts.sum():
            break
        idx = np.repeat(stops - counts.cumsum(), counts) + np.arange(counts.sum())
        nxt = np.unique(tails[idx])
        frontier = nxt[~visited[nxt]]
        visited[frontier] = True
        hops += 1
    return np.flatnonzero(visited)


@dataclass(frozen=True)
class SubKnowledgeGraph:
    owner: int
    triples: np.ndarray   # (n, 3), canonical order
    entities: np.ndarray  # sorted ids appearing in triples

    def __len__(self):
        return len(self.triples)

    def triple_set(self) -> set:
        return {tuple(int(v) for v in row) for row in self.triples}

    def to_tsv(self, path) -> None:
        lines = [f"# owner={self.owner}"] + [f"{h}\t{r}\t{t}" for h, r, t in self.triples]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_tsv(cls, path) -> "SubKnowledgeGraph":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("# owner="):
            raise DataError(f"{path}: missing '# owner=' header")
        owner = int(lines[0].split("=", 1)[1])
        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns")
            rows.append([int(p) for p in parts])
        return make_subkg(owner, _as_triple_array(rows))


def make_subkg(owner: int, triples: np.ndarray) -> SubKnowledgeGraph:
    triples = _as_triple_array(triples)
    if len(triples):
        triples = triples[np.lexsort((triples[:, 2], triples[:, 1], triples[:, 0]))]
    ents = np.unique(triples[:, [0, 2]]) if len(triples) else np.zeros(0, dtype=np.int64)
    triples.setflags(write=False)
    ents.setflags(write=False)
    return SubKnowledgeGraph(int(owner), triples, ents)


def _seed_entities(kg, desensitized, catalog):
    pois = np.asarray(desensitized.pois, dtype=np.int64)
    ents = catalog.entities_of(pois) if catalog is not None else pois
    for e in ents:
        if not 0 <= e < kg.n_entities:
            raise DataError(f"poi maps to entity {int(e)} which is not in the knowledge graph")
    return np.unique(ents)


def partition_subkg(kg: KnowledgeGraph, desensitized, hop_limit: Optional[int] = None,
                    catalog=None) -> SubKnowledgeGraph:
    """Meta-path closure of a desensitized history.

    Keeps every triple whose head is reachable from the history's POI
    entities. Tails are expanded forward only. Without ``catalog`` the POI id
    is taken to be its entity id.
    """
    seeds = _seed_entities(kg, desensitized, catalog)
    if not seeds.size:
        return make_subkg(desensitized.user, np.zeros((0, 3), dtype=np.int64))
    heads = _closure(kg, seeds, hop_limit)
    mask = np.zeros(kg.n_entities, dtype=bool)
    mask[heads] = True
    return make_subkg(desensitized.user, kg.triples[mask[kg.triples[:, 0]]])


def one_hop_subkg(kg: KnowledgeGraph, desensitized, catalog=None) -> SubKnowledgeGraph:
    """Triples whose head is one of the desensitized POIs (no meta-path expansion)."""
    seeds = _seed_entities(kg, desensitized, catalog)
    mask = np.zeros(kg.n_entities, dtype=bool)
    mask[seeds] = True
    return make_subkg(desensitized.user, kg.triples[mask[kg.triples[:, 0]]])
