"""Dataset files, the synthetic generator and persistence of stage artifacts.

Raw dataset layout (UTF-8 TSV, integer ids)::

    checkins.tsv  user<TAB>poi
    catalog.tsv   poi<TAB>category<TAB>segment<TAB>lat<TAB>lon
    kg.tsv        head<TAB>relation<TAB>tail
    labels.json   optional {"entities": {id: label}, "relations": {id: label}}

POI, category and segment columns of the catalog are entity ids of the KG.
On load every id is remapped to a dense internal id: users and POIs in file
order, the remaining entities and the relations in ascending external id.
All stage artifacts written afterwards use internal ids.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .domain import CheckInHistory, DataError, PoiCatalog
from .kgstore import KnowledgeGraph

logger = logging.getLogger(__name__)

CHECKINS, CATALOG, KG, LABELS = "checkins.tsv", "catalog.tsv", "kg.tsv", "labels.json"

BASE_RELATIONS = ("category_of", "located_in", "brand_of", "nearby", "brand_category", "peer")


@dataclass
class Dataset:
    histories: dict            # internal user id -> CheckInHistory
    kg: KnowledgeGraph
    catalog: PoiCatalog
    stats: dict
    user_ext: np.ndarray       # internal -> external ids
    entity_ext: np.ndarray
    relation_ext: np.ndarray
    name: str = "dataset"

    @property
    def users(self):
        return sorted(self.histories)


# ---------------------------------------------------------------------------
# parsing

def _read_rows(path, ncols, allow_float_from=None):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != ncols:
                raise DataError(f"{path}:{lineno}: expected {ncols} columns, got {len(parts)}")
            try:
                ints = [int(p) for p in parts[:allow_float_from]]
                floats = [float(p) for p in parts[allow_float_from:]] if allow_float_from is not None else []
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer id in {line!r}") from None
            rows.append((lineno, ints + floats))
    return rows


def load_entity_index(catalog_path, kg_path, labels_path=None):
    """Parse catalog + KG and assign dense entity ids.

    Returns ``(catalog, kg, entity_ext, relation_ext, poi_ext)``. Loading the
    same two files always yields the same mapping, whatever the check-ins.
    """
    cat_rows = _read_rows(catalog_path, 5, allow_float_from=3)
    if not cat_rows:
        raise DataError(f"{catalog_path}: catalog is empty")
    kg_rows = _read_rows(kg_path, 3)
    labels = {}
    if labels_path is not None and Path(labels_path).exists():
        labels = json.loads(Path(labels_path).read_text(encoding="utf-8"))

    poi_ext, seen = [], {}
    for lineno, (p, _, _, _, _) in cat_rows:
        if p in seen:
            raise DataError(f"{catalog_path}:{lineno}: duplicate poi {p}")
        seen[p] = len(poi_ext)
        poi_ext.append(p)
    cats = sorted({row[1] for _, row in cat_rows})
    segs = sorted({row[2] for _, row in cat_rows})
    for kind, ids in (("category", cats), ("segment", segs)):
        clash = set(ids) & set(seen)
        if clash:
            raise DataError(f"{catalog_path}: {kind} id {min(clash)} collides with a poi id")
    if set(cats) & set(segs):
        raise DataError(f"{catalog_path}: category id {min(set(cats) & set(segs))} collides with a segment id")

    known = set(seen) | set(cats) | set(segs)
    if "entities" in labels:
        # a label registry makes it the closed set of valid entities
        registry = known | {int(k) for k in labels["entities"]}
        for lineno, (h, _, t) in kg_rows:
            bad = [e for e in (h, t) if e not in registry]
            if bad:
                raise DataError(f"{kg_path}:{lineno}: triple references unknown entity {bad[0]}")
    others = {h for _, (h, _, t) in kg_rows} | {t for _, (h, _, t) in kg_rows}
    others |= {int(k) for k in labels.get("entities", {})}
    others = sorted(others - known)
    entity_ext = np.array(poi_ext + cats + segs + others, dtype=np.int64)
    ent_map = {int(e): i for i, e in enumerate(entity_ext)}
    rel_ext = sorted({r for _, (_, r, _) in kg_rows} | {int(k) for k in labels.get("relations", {})})
    rel_map = {r: i for i, r in enumerate(rel_ext)}

    triples, seen_t = [], set()
    for lineno, (h, r, t) in kg_rows:
        key = (ent_map[h], rel_map[r], ent_map[t])
        if key in seen_t:
            raise DataError(f"{kg_path}:{lineno}: duplicate triple {h}\t{r}\t{t}")
        seen_t.add(key)
        triples.append(key)
    kg = KnowledgeGraph(np.array(triples, dtype=np.int64).reshape(-1, 3), len(entity_ext), len(rel_ext))

    cat_idx = {c: i for i, c in enumerate(cats)}
    seg_idx = {s: i for i, s in enumerate(segs)}
    catalog = PoiCatalog(
        [cat_idx[row[1]] for _, row in cat_rows], [seg_idx[row[2]] for _, row in cat_rows],
        len(cats), len(segs),
        poi_entity=np.arange(len(poi_ext)),
        category_entity=[ent_map[c] for c in cats],
        segment_entity=[ent_map[s] for s in segs],
    )
    return catalog, kg, entity_ext, np.array(rel_ext, dtype=np.int64), np.array(poi_ext, dtype=np.int64)


def load_dataset(checkin_path, triple_path, catalog_path, labels_path=None, name="dataset") -> Dataset:
    catalog, kg, entity_ext, rel_ext, poi_ext = load_entity_index(catalog_path, triple_path, labels_path)
    poi_map = {int(p): i for i, p in enumerate(poi_ext)}
    rows = _read_rows(checkin_path, 2)
    if not rows:
        raise DataError(f"{checkin_path}: no users")
    user_map, per_user, dangling = {}, [], []
    for lineno, (u, p) in rows:
        if p not in poi_map:
            dangling.append(f"line {lineno}: poi {p}")
            continue
        if u not in user_map:
            user_map[u] = len(user_map)
            per_user.append([])
        per_user[user_map[u]].append(poi_map[p])
    if dangling:
        raise DataError(f"{checkin_path}: check-ins reference unknown pois ({'; '.join(dangling[:5])})")
    histories = {i: CheckInHistory.from_pois(i, pois, catalog) for i, pois in enumerate(per_user)}
    stats = {
        "users": len(histories), "pois": catalog.n_pois, "checkins": len(rows),
        "entities": kg.n_entities, "relations": kg.n_relations, "triples": len(kg),
    }
    user_ext = np.array(list(user_map), dtype=np.int64)
    return Dataset(histories, kg, catalog, stats, user_ext, entity_ext, rel_ext, name=name)


def load_dataset_dir(directory, name=None) -> Dataset:
    d = Path(directory)
    return load_dataset(d / CHECKINS, d / KG, d / CATALOG, d / LABELS, name=name or d.name)


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 200
    n_pois: int = 400
    n_categories: int = 16
    n_segments: int = 16
    n_relations: int = 20
    n_triples: int = 2500
    checkins_per_user: int = 30
    preference_clusters: int = 8
    n_brands: int = 40
    n_side_entities: int = 100
    categories_per_cluster: int = 2
    noise: float = 0.1
    side_chain_fraction: float = 0.2  # sparsity knob: share of side triples that chain side -> side
    brand_popularity: float = 0.0  # share of POI popularity inherited from its brand
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("noise", "side_chain_fraction", "brand_popularity"):
                if not 0.0 <= v <= 1.0:
                    raise DataError(f"{f.name} must lie in [0, 1]")
            elif f.name != "seed" and v < 1:
                raise DataError(f"{f.name} must be positive")
        if self.n_relations < 3:
            raise DataError("n_relations must be >= 3 (category_of, located_in, brand_of)")
        if self.n_brands > self.n_pois:
            raise DataError("n_brands cannot exceed n_pois")
        if self.checkins_per_user > self.n_pois:
            raise DataError("checkins_per_user cannot exceed n_pois")

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    @property
    def n_entities(self):
        return self.n_pois + self.n_categories + self.n_segments + self.n_brands + self.n_side_entities


def _grid(n_segments):
    rows = int(np.floor(np.sqrt(n_segments)))
    cols = int(np.ceil(n_segments / rows))
    return rows, cols


def synthesize(spec: SyntheticSpec) -> dict:
    """Generate the raw tables in memory (external id == internal id)."""
    rng = np.random.default_rng(spec.seed)
    P, C, S, B = spec.n_pois, spec.n_categories, spec.n_segments, spec.n_brands
    off_cat, off_seg = P, P + C
    off_brand = off_seg + S
    off_side = off_brand + B
    relations = list(BASE_RELATIONS[:min(spec.n_relations, len(BASE_RELATIONS))])
    relations += [f"side_{i}" for i in range(spec.n_relations - len(relations))]
    rel_id = {name: i for i, name in enumerate(relations)}

    poi_cat = rng.integers(C, size=P)
    poi_seg = rng.integers(S, size=P)
    rows, cols = _grid(S)
    seg_rc = np.array([(s // cols, s % cols) for s in range(S)])
    lat = seg_rc[poi_seg, 0] + rng.random(P)
    lon = seg_rc[poi_seg, 1] + rng.random(P)

    brand_cat = np.arange(B) % C
    poi_brand = np.empty(P, dtype=np.int64)
    by_cat = [np.flatnonzero(brand_cat == c) for c in range(C)]
    for p in range(P):
        options = by_cat[poi_cat[p]]
        poi_brand[p] = options[rng.integers(len(options))] if len(options) else rng.integers(B)
    # every brand owns at least one poi
    for b in range(B):
        if not np.any(poi_brand == b):
            poi_brand[b] = b

    triples = set()
    ordered = []

    def add(h, r, t):
        key = (int(h), rel_id[r], int(t))
        if key not in triples:
            triples.add(key)
            ordered.append(key)
            return True
        return False

    for p in range(P):
        add(p, "category_of", off_cat + poi_cat[p])
        add(p, "located_in", off_seg + poi_seg[p])
        add(p, "brand_of", off_brand + poi_brand[p])
    if "nearby" in rel_id:
        for s in range(S):
            r, c = seg_rc[s]
            for nb in (s + 1 if c + 1 < cols else None, s + cols):
                if nb is not None and nb < S:
                    add(off_seg + s, "nearby", off_seg + nb)
    if "brand_category" in rel_id:
        for b in range(B):
            add(off_brand + b, "brand_category", off_cat + brand_cat[b])
    if "peer" in rel_id:
        groups = {}
        for p in range(P):
            groups.setdefault((poi_cat[p], poi_seg[p]), []).append(p)
        for members in groups.values():
            if len(members) > 1:
                for i, p in enumerate(members):
                    add(p, "peer", members[(i + 1) % len(members)])
    mandatory = len(ordered)
    if spec.n_triples < mandatory:
        raise DataError(f"n_triples={spec.n_triples} is infeasible; at least {mandatory} structural triples are required")

    side_rels = [r for r in relations if r.startswith("side_")]
    if side_rels:
        pools = np.array_split(np.arange(spec.n_side_entities), len(side_rels))
        pools = [pool if len(pool) else np.arange(spec.n_side_entities) for pool in pools]
        attempts, i = 0, 0
        limit = 50 * (spec.n_triples - mandatory) + 1000
        while len(ordered) < spec.n_triples and attempts < limit:
            attempts += 1
            # cycle through relations first so each one is populated
            ri = i % len(side_rels) if i < len(side_rels) else int(rng.integers(len(side_rels)))
            pool = pools[ri]
            if rng.random() < spec.side_chain_fraction:
                head = off_side + rng.integers(spec.n_side_entities)
                tail = off_side + pool[rng.integers(len(pool))]
            else:
                p = int(rng.integers(P))
                head = p
                if rng.random() < 0.8:
                    tail = off_side + pool[poi_cat[p] % len(pool)]
                else:
                    tail = off_side + pool[rng.integers(len(pool))]
            if head != tail and add(head, side_rels[ri], tail):
                i += 1
        if len(ordered) < spec.n_triples:
            raise DataError(f"could only place {len(ordered)} distinct triples; lower n_triples")
    elif spec.n_triples > mandatory:
        raise DataError(f"n_triples={spec.n_triples} exceeds the {mandatory} structural triples and no side relations exist")

    # users
    K = spec.preference_clusters
    cluster_cats = [rng.choice(C, size=min(spec.categories_per_cluster, C), replace=False) for _ in range(K)]
    cluster_home = rng.integers(S, size=K)
    brand_pop = rng.gamma(0.7, size=B) if spec.brand_popularity > 0 else np.zeros(B)
    brand_pop = brand_pop / brand_pop.mean() if brand_pop.any() else brand_pop
    cluster_weights = []
    for k in range(K):
        hr, hc = seg_rc[cluster_home[k]]
        near = np.max(np.abs(seg_rc[poi_seg] - (hr, hc)), axis=1) <= 1
        pool = np.isin(poi_cat, cluster_cats[k]) & near
        if pool.sum() < spec.checkins_per_user:
            pool = np.isin(poi_cat, cluster_cats[k])
        own = rng.gamma(0.7, size=P) / 0.7
        w = np.where(pool, spec.brand_popularity * brand_pop[poi_brand] + (1.0 - spec.brand_popularity) * own, 0.0)
        if w.sum() == 0:
            w = np.ones(P)
        w = (1.0 - spec.noise) * w / w.sum() + spec.noise / P
        cluster_weights.append(w / w.sum())
    user_cluster = rng.integers(K, size=spec.n_users)
    checkins = []
    for u in range(spec.n_users):
        w = cluster_weights[user_cluster[u]]
        n = min(spec.checkins_per_user, int(np.count_nonzero(w)))
        for p in rng.choice(P, size=n, replace=False, p=w):
            checkins.append((u, int(p)))

    labels = {"entities": {}, "relations": {str(i): r for i, r in enumerate(relations)}}
    for p in range(P):
        labels["entities"][str(p)] = f"poi:{p}"
    for c in range(C):
        labels["entities"][str(off_cat + c)] = f"category:{c}"
    for s in range(S):
        labels["entities"][str(off_seg + s)] = f"segment:{s}"
    for b in range(B):
        labels["entities"][str(off_brand + b)] = f"brand:{b}"
    for a in range(spec.n_side_entities):
        labels["entities"][str(off_side + a)] = f"side:{a}"
    catalog = [(p, off_cat + int(poi_cat[p]), off_seg + int(poi_seg[p]), float(lat[p]), float(lon[p])) for p in range(P)]
    return {
        "checkins": checkins, "catalog": catalog, "triples": ordered, "labels": labels,
        "user_cluster": user_cluster.tolist(),
    }


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write a synthetic dataset to ``out_dir``; identical specs give identical bytes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = synthesize(spec)
    _write_lines(out / CHECKINS, (f"{u}\t{p}" for u, p in data["checkins"]))
    _write_lines(out / CATALOG, (f"{p}\t{c}\t{s}\t{la:.6f}\t{lo:.6f}" for p, c, s, la, lo in data["catalog"]))
    _write_lines(out / KG, (f"{h}\t{r}\t{t}" for h, r, t in data["triples"]))
    labels = dict(data["labels"], spec=spec.to_dict())
    (out / LABELS).write_text(json.dumps(labels, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# stage artifacts

def write_uploads(path, uploads) -> None:
    """Desensitized uploads: ``user<TAB>poi`` per (possibly repeated) check-in."""
    _write_lines(path, (f"{h.user}\t{p}" for h in sorted(uploads, key=lambda h: h.user) for p in h.pois))


def read_uploads(path):
    from .privacy import DesensitizedHistory
    per_user = {}
    for lineno, (u, p) in _read_rows(path, 2):
        per_user.setdefault(u, []).append(p)
    return [DesensitizedHistory(u, tuple(pois)) for u, pois in sorted(per_user.items())]


def write_catalog(path, catalog: PoiCatalog) -> None:
    """Public catalog in internal ids (poi, category entity, segment entity)."""
    _write_lines(path, (f"{p}\t{int(catalog.category_entity[c])}\t{int(catalog.segment_entity[s])}\t0\t0"
                        for p, (c, s) in enumerate(zip(catalog.poi_category, catalog.poi_segment))))


def read_catalog(path) -> PoiCatalog:
    """Inverse of :func:`write_catalog`; only categories and segments that own a POI survive."""
    rows = [r for _, r in _read_rows(path, 5, allow_float_from=3)]
    if not rows:
        raise DataError(f"{path}: empty catalog")
    pois = [int(r[0]) for r in rows]
    if pois != list(range(len(pois))):
        raise DataError(f"{path}: poi ids must be dense and in order")
    cat_ent, cat = np.unique([int(r[1]) for r in rows], return_inverse=True)
    seg_ent, seg = np.unique([int(r[2]) for r in rows], return_inverse=True)
    return PoiCatalog(cat, seg, len(cat_ent), len(seg_ent), np.arange(len(pois)), cat_ent, seg_ent)


def write_kg(path, kg: KnowledgeGraph) -> None:
    _write_lines(path, (f"{h}\t{r}\t{t}" for h, r, t in kg.triples))


def write_subkgs(directory, subkgs) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for sub in subkgs.values():
        sub.to_tsv(d / f"user_{sub.owner}.tsv")


def read_subkgs(directory) -> dict:
    from .kgstore import SubKnowledgeGraph
    out = {}
    for path in sorted(Path(directory).glob("user_*.tsv")):
        sub = SubKnowledgeGraph.from_tsv(path)
        out[sub.owner] = sub
    return out


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    return json.loads(path.read_text(encoding="utf-8"))
