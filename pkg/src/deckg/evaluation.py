"""Per-user 8:1:1 split and top-k ranking metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .validation import check_k, user_stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Split:
    train: dict  # user -> tuple of POIs
    validation: dict
    test: dict

    def to_json(self) -> dict:
        return {part: {str(u): list(v) for u, v in sorted(getattr(self, part).items())}
                for part in ("train", "validation", "test")}

    @classmethod
    def from_json(cls, data) -> "Split":
        return cls(*({int(u): tuple(v) for u, v in data[part].items()} for part in ("train", "validation", "test")))


def split_history(pois, rng, ratios=(8, 1, 1)):
    """Shuffle the distinct POIs and cut them 8:1:1; train keeps the remainder."""
    uniq = list(dict.fromkeys(int(p) for p in pois))
    order = rng.permutation(len(uniq))
    uniq = [uniq[i] for i in order]
    total = sum(ratios)
    n_val = len(uniq) * ratios[1] // total
    n_test = len(uniq) * ratios[2] // total
    n_train = len(uniq) - n_val - n_test
    return tuple(uniq[:n_train]), tuple(uniq[n_train:n_train + n_val]), tuple(uniq[n_train + n_val:])


def make_split(histories: dict, seed: int) -> Split:
    train, val, test = {}, {}, {}
    for u in sorted(histories):
        train[u], val[u], test[u] = split_history(histories[u].pois, user_stream(seed, u, "split"))
    return Split(train, val, test)


def dcg_discount(rank):
    """Discount of 1-indexed ``rank``."""
    return 1.0 / math.log2(rank + 1)


def ndcg_at_k(ranking, relevant, k) -> float:
    k = check_k(k)
    relevant = set(relevant)
    if not relevant:
        return 0.0
    dcg = sum(dcg_discount(i + 1) for i, item in enumerate(ranking[:k]) if item in relevant)
    idcg = sum(dcg_discount(i + 1) for i in range(min(k, len(relevant))))
    return dcg / idcg


def recall_at_k(ranking, relevant, k) -> float:
    k = check_k(k)
    relevant = set(relevant)
    if not relevant:
        logger.warning("recall@%d requested with an empty relevant set; returning 0", k)
        return 0.0
    return len(set(ranking[:k]) & relevant) / len(relevant)


def rank_items(items, scores) -> np.ndarray:
    """Items by descending score, ties broken by ascending id."""
    items = np.asarray(items)
    scores = np.asarray(scores, dtype=np.float64)
    return items[np.lexsort((items, -scores))]


@dataclass
class MetricsReport:
    per_k: dict                       # k -> {"ndcg": float, "recall": float}
    n_users: int
    dataset: str = "dataset"
    seed: int = 0
    config_hash: str = ""
    ablation: str = "full"
    extra: dict = field(default_factory=dict)

    def ndcg(self, k=10):
        return self.per_k[k]["ndcg"]

    def recall(self, k=10):
        return self.per_k[k]["recall"]

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset, "seed": self.seed, "config_hash": self.config_hash,
            "ablation": self.ablation, "n_users": self.n_users,
            "per_k": {str(k): {"ndcg": v["ndcg"], "recall": v["recall"]} for k, v in sorted(self.per_k.items())},
        }

    @classmethod
    def from_json(cls, data) -> "MetricsReport":
        per_k = {int(k): dict(v) for k, v in data["per_k"].items()}
        return cls(per_k, data["n_users"], data.get("dataset", "dataset"), data.get("seed", 0),
                   data.get("config_hash", ""), data.get("ablation", "full"))

    def csv_header(self):
        ks = sorted(self.per_k)
        return ["dataset", "ablation"] + [f"{m}@{k}" for k in ks for m in ("Recall", "NDCG")]

    def csv_row(self):
        ks = sorted(self.per_k)
        return [self.dataset, self.ablation] + [f"{self.per_k[k][m]:.6f}" for k in ks for m in ("recall", "ndcg")]


def evaluate_scores(score_fn, users, exclude: dict, relevant: dict, n_items: int, ks=(10, 20),
                    candidates=None, seed=0) -> MetricsReport:
    """Rank every item (or a sampled candidate set) per user and average the metrics.

    ``score_fn(user, items)`` returns one score per item. Users with no
    relevant items are skipped.
    """
    ks = sorted(check_k(k) for k in ks)
    sums = {k: {"ndcg": 0.0, "recall": 0.0} for k in ks}
    n = 0
    all_items = np.arange(n_items)
    for u in sorted(users):
        rel = set(relevant.get(u, ()))
        if not rel:
            continue
        mask = np.ones(n_items, dtype=bool)
        mask[list(exclude.get(u, ()))] = False
        items = all_items[mask]
        if candidates is not None:
            rng = user_stream(seed, u, "eval")
            pool = np.setdiff1d(items, list(rel))
            pick = rng.choice(pool, size=min(candidates, len(pool)), replace=False)
            items = np.union1d(pick, np.array(sorted(rel & set(items.tolist())), dtype=np.int64))
        ranking = rank_items(items, score_fn(u, items)).tolist()
        for k in ks:
            sums[k]["ndcg"] += ndcg_at_k(ranking, rel, k)
            sums[k]["recall"] += recall_at_k(ranking, rel, k)
        n += 1
    per_k = {k: {m: (v / n if n else 0.0) for m, v in sums[k].items()} for k in ks}
    return MetricsReport(per_k, n)


def evaluate(clients: dict, split: Split, ks=(10, 20), part="test", candidates=None, seed=0) -> MetricsReport:
    """Metrics of trained clients on the ``test`` (or ``validation``) split."""
    from .client import predict_many
    any_client = next(iter(clients.values()))
    return evaluate_scores(lambda u, items: predict_many(clients[u], items), clients.keys(), split.train,
                           getattr(split, part), any_client.n_pois, ks, candidates, seed)
