"""End-to-end simulation: pretrain, upload/partition/assign, on-device rounds.

Every stage is a plain function so the CLI can run stages one at a time and
``run_pipeline`` can chain them; both paths produce identical artifacts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataio
from .client import (ClientState, GradientMessage, Theta, apply_update, compute_shared_gradients,
                     local_loss_and_grads)
from .domain import CheckInHistory, DataError, DeckgError, Hyperparams, NumericalError
from .evaluation import MetricsReport, Split, evaluate, make_split
from .kgstore import SubKnowledgeGraph, one_hop_subkg, partition_subkg
from .neighbors import assign_neighbors, build_profiles, neighbors_from_json, neighbors_to_json
from .pretrain import EmbeddingState, init_state, load_checkpoint, pretrain, propagate, save_checkpoint
from .privacy import desensitize, segment_distortion
from .validation import STAGE_TAGS, user_stream

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class StageError(DeckgError):
    """A pipeline stage failed; ``cause`` keeps the original exception."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class Ablation:
    no_meta_path: bool = False
    no_communication: bool = False
    no_pretrain: bool = False

    @property
    def tag(self) -> str:
        parts = [name for flag, name in ((self.no_meta_path, "w/o MP"), (self.no_communication, "w/o C-C"),
                                         (self.no_pretrain, "w/o P")) if flag]
        return "+".join(parts) if parts else "full"

    @classmethod
    def from_name(cls, name: Optional[str]) -> "Ablation":
        table = {None: cls(), "none": cls(), "full": cls(), "no-mp": cls(no_meta_path=True),
                 "no-cc": cls(no_communication=True), "no-p": cls(no_pretrain=True)}
        if name not in table:
            raise DataError(f"unknown ablation {name!r}; choose no-mp, no-cc or no-p")
        return table[name]


@dataclass
class SimulationConfig:
    hp: Hyperparams = field(default_factory=Hyperparams)
    ablation: Ablation = field(default_factory=Ablation)
    data_dir: Optional[str] = None
    synthetic: Optional[dataio.SyntheticSpec] = None
    output_dir: Optional[str] = None
    validate_every: int = 5
    patience: int = 5
    eval_k: tuple = (10, 20)
    eval_candidates: Optional[int] = None
    audit_payloads: bool = False
    threads: int = 1

    _KEYS = ("schema_version", "hyperparams", "ablation", "dataset", "output_dir", "validate_every",
             "patience", "eval_k", "eval_candidates", "audit_payloads", "threads")

    def to_dict(self) -> dict:
        dataset = ({"path": self.data_dir} if self.data_dir
                   else {"synthetic": (self.synthetic or dataio.SyntheticSpec()).to_dict()})
        return {
            "schema_version": SCHEMA_VERSION, "hyperparams": self.hp.to_dict(), "ablation": asdict(self.ablation),
            "dataset": dataset, "output_dir": self.output_dir, "validate_every": self.validate_every,
            "patience": self.patience, "eval_k": list(self.eval_k), "eval_candidates": self.eval_candidates,
            "audit_payloads": self.audit_payloads, "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimulationConfig":
        unknown = set(data) - set(cls._KEYS)
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise DataError(f"unsupported config schema_version {version}")
        ab = data.get("ablation", {})
        bad = set(ab) - {f.name for f in fields(Ablation)}
        if bad:
            raise DataError(f"unknown ablation keys: {sorted(bad)}")
        dataset = data.get("dataset", {"synthetic": {}})
        bad = set(dataset) - {"path", "synthetic"}
        if bad:
            raise DataError(f"unknown dataset keys: {sorted(bad)}")
        return cls(
            hp=Hyperparams.from_dict(data.get("hyperparams", {})),
            ablation=Ablation(**ab),
            data_dir=dataset.get("path"),
            synthetic=dataio.SyntheticSpec.from_dict(dataset["synthetic"]) if "synthetic" in dataset else None,
            output_dir=data.get("output_dir"),
            validate_every=int(data.get("validate_every", 5)),
            patience=int(data.get("patience", 5)),
            eval_k=tuple(data.get("eval_k", (10, 20))),
            eval_candidates=data.get("eval_candidates"),
            audit_payloads=bool(data.get("audit_payloads", False)),
            threads=int(data.get("threads", 1)),
        )

    @classmethod
    def from_file(cls, path) -> "SimulationConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "SimulationConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return SimulationConfig(**d)


@dataclass
class RoundReport:
    round: int
    mean_loss: float
    messages: int
    ndcg10: Optional[float] = None
    recall10: Optional[float] = None


# ---------------------------------------------------------------------------
# stages

def stage_pretrain(kg, hp: Hyperparams, no_pretrain=False) -> tuple:
    """Returns ``(state, loss trace)``; random initialisation under ``no_pretrain``."""
    if no_pretrain:
        rng = np.random.default_rng([hp.seed & (2**63 - 1), STAGE_TAGS["init"]])
        return init_state(kg.n_entities, kg.n_relations, hp.dim_entity, hp.dim_relation, hp.layers, rng), []
    rng = np.random.default_rng([hp.seed & (2**63 - 1), STAGE_TAGS["pretrain"]])
    return pretrain(kg, hp, rng=rng)


def train_histories(split: Split, catalog) -> list:
    return [CheckInHistory.from_pois(u, pois, catalog) for u, pois in sorted(split.train.items()) if pois]


def stage_desensitize(histories, catalog, poi_emb, epsilon, seed) -> list:
    return [desensitize(h, catalog, poi_emb, epsilon, user_stream(seed, h.user, "desensitize")) for h in histories]


def stage_partition(kg, uploads, catalog, hop_limit=None, one_hop=False) -> dict:
    if one_hop:
        return {u.user: one_hop_subkg(kg, u, catalog) for u in uploads}
    return {u.user: partition_subkg(kg, u, hop_limit, catalog) for u in uploads}


def stage_neighbors(uploads, catalog, poi_emb, cap) -> dict:
    return assign_neighbors(build_profiles(uploads, catalog, poi_emb), cap)


def poi_table(state: EmbeddingState, catalog) -> np.ndarray:
    """Layer-0 embedding row for every POI."""
    return state.entity[catalog.poi_entity]


def build_clients(catalog, split: Split, state: EmbeddingState, subkgs: dict, hp: Hyperparams, kg) -> dict:
    """One client per user with a training split; cold POIs read the full-graph propagated table."""
    frozen = propagate(kg, state, activation=hp.activation)[catalog.poi_entity]
    frozen.setflags(write=False)
    d = state.entity.shape[1]
    clients = {}
    for u in sorted(split.train):
        sub = subkgs.get(u) or SubKnowledgeGraph(u, np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64))
        rng = user_stream(hp.seed, u, "init")
        bound = 0.5 / np.sqrt(hp.dim_user)
        user_emb = rng.uniform(-bound, bound, size=hp.dim_user)
        bridge = None if hp.dim_user == d else np.eye(hp.dim_user, d)
        theta = Theta(state.layer_weight.copy(), state.layer_bias.copy(), bridge)
        clients[u] = ClientState(u, user_emb, sub, state.entity, theta, split.train[u], frozen,
                                 catalog.poi_entity, hp.activation)
    return clients


def _local_batch(client: ClientState, hp: Hyperparams, rng) -> np.ndarray:
    pos = np.repeat(client.train_pois, hp.negatives_per_positive)
    neg = rng.integers(client.n_pois, size=len(pos))
    bad = np.isin(neg, client.train_pois)
    while bad.any():
        neg[bad] = rng.integers(client.n_pois, size=int(bad.sum()))
        bad = np.isin(neg, client.train_pois)
    return np.column_stack([pos, neg])


class PayloadLog:
    """Collects every neighbour-bound message (serialised) for audits."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.dir / "messages.bin", "wb")
        self.user_vectors = []

    def record_round(self, clients, messages):
        self.user_vectors.append(np.vstack([clients[u].user_emb for u in sorted(clients)]))
        for m in messages:
            raw = m.to_bytes()
            self._fh.write(len(raw).to_bytes(8, "little") + raw)

    def close(self):
        self._fh.close()
        if self.user_vectors:
            np.save(self.dir / "user_vectors.npy", np.stack(self.user_vectors))


def iter_message_log(path):
    """Yield ``(raw bytes, GradientMessage)`` one record at a time; logs get large."""
    with open(path, "rb") as fh:
        while True:
            size = fh.read(8)
            if not size:
                return
            if len(size) != 8:
                raise DataError(f"{path}: truncated record header")
            n = int.from_bytes(size, "little")
            raw = fh.read(n)
            if len(raw) != n:
                raise DataError(f"{path}: truncated record")
            yield raw, GradientMessage.from_bytes(raw)


def read_message_log(path):
    return [m for _, m in iter_message_log(path)]


def train_clients(clients: dict, split: Split, neighbor_sets: dict, hp: Hyperparams, no_communication=False,
                  validate_every=5, patience=5, threads=1, payload_log: PayloadLog | None = None, events=None):
    """Synchronous rounds with a barrier; returns the per-round trace.

    Clients end in the state of the best validation NDCG@10 seen.
    """
    users = sorted(clients)
    rngs = {u: user_stream(hp.seed, u, "train") for u in users}
    trace = []
    best, best_snap, stale = -1.0, None, 0

    def work(u):
        batch = _local_batch(clients[u], hp, rngs[u])
        loss, grads = local_loss_and_grads(clients[u], batch)
        return loss, grads

    def validate():
        rep = evaluate(clients, split, ks=(10,), part="validation")
        return rep.ndcg(10), rep.recall(10)

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        ndcg, _ = validate()
        best, best_snap = ndcg, {u: clients[u].snapshot() for u in users}
        for rnd in range(1, hp.rounds_train + 1):
            results = list(pool.map(work, users)) if pool else [work(u) for u in users]
            own = dict(zip(users, (g for _, g in results)))
            msgs = {} if no_communication else {
                u: compute_shared_gradients(clients[u], None, rnd, grads=own[u]) for u in users}
            n_msgs = 0
            sent = []
            for u in users:
                nbrs = neighbor_sets.get(u)
                if no_communication or nbrs is None:
                    inbox, weights = [], {}
                else:
                    inbox = [msgs[v] for v in nbrs.members]
                    weights = dict(nbrs.weight)
                    sent.extend(inbox)
                n_msgs += len(inbox)
                apply_update(clients[u], own[u], inbox, weights, hp.gamma, hp.mu)
            if payload_log is not None:
                payload_log.record_round(clients, sent)
            report = RoundReport(rnd, float(np.mean([l for l, _ in results])), n_msgs)
            if rnd % validate_every == 0 or rnd == hp.rounds_train:
                report.ndcg10, report.recall10 = validate()
                if report.ndcg10 > best:
                    best, best_snap, stale = report.ndcg10, {u: clients[u].snapshot() for u in users}, 0
                else:
                    stale += 1
            trace.append(report)
            if events is not None:
                events.emit("round", **asdict(report))
            if stale >= patience:
                logger.info("early stop at round %d", rnd)
                break
    finally:
        if pool:
            pool.shutdown()
    for u in users:
        clients[u].restore(best_snap[u])
    return trace


# ---------------------------------------------------------------------------
# persistence of client states

def save_clients(directory, clients: dict, meta: dict | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    any_c = next(iter(clients.values()))
    np.save(d / "frozen.npy", np.asarray(any_c.frozen_poi_emb))
    np.save(d / "poi_entity.npy", np.asarray(any_c.poi_entity))
    dataio.write_json(d / "meta.json", dict(meta or {}, activation=any_c.activation, users=sorted(clients)))
    for u, c in sorted(clients.items()):
        arrays = dict(user_emb=c.user_emb, local_emb=c.local_emb, entity_ids=c.entity_ids,
                      weights=c.theta.weights, biases=c.theta.biases, train_pois=c.train_pois,
                      triples=np.asarray(c.subkg.triples))
        if c.theta.bridge is not None:
            arrays["bridge"] = c.theta.bridge
        with open(d / f"user_{u}.npz", "wb") as fh:
            np.savez(fh, **arrays)


def load_clients(directory) -> dict:
    from .kgstore import make_subkg
    d = Path(directory)
    meta = dataio.read_json(d / "meta.json")
    frozen = np.load(d / "frozen.npy")
    frozen.setflags(write=False)
    poi_entity = np.load(d / "poi_entity.npy")
    clients = {}
    for u in meta["users"]:
        z = np.load(d / f"user_{u}.npz")
        sub = make_subkg(u, z["triples"])
        table = np.zeros((int(sub.entities.max()) + 1 if len(sub.entities) else 0, z["local_emb"].shape[1] if z["local_emb"].size else frozen.shape[1]))
        if len(sub.entities):
            table[z["entity_ids"]] = z["local_emb"]
        theta = Theta(z["weights"], z["biases"], z["bridge"] if "bridge" in z else None)
        clients[u] = ClientState(u, z["user_emb"], sub, table, theta, z["train_pois"], frozen, poi_entity,
                                 meta["activation"])
    return clients


# ---------------------------------------------------------------------------
# run bookkeeping

class EventLog:
    """Line-delimited JSON events."""

    def __init__(self, path=None):
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def emit(self, event, **fields_):
        logger.debug("%s %s", event, fields_)
        if self._fh:
            self._fh.write(json.dumps({"event": event, **fields_}, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, out_dir, config: SimulationConfig, overwrite=False):
        self.path = Path(out_dir) / "manifest.json"
        if self.path.exists() and not overwrite:
            raise DataError(f"{out_dir} already holds a pipeline run (manifest.json present)")
        self.data = {"config_hash": config.config_hash(), "seed": config.hp.seed, "status": "running",
                     "stages": {}, "inputs": {}}
        self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n")

    def start(self, stage):
        self.data["stages"][stage] = {"started": _now()}
        self._write()

    def finish(self, stage):
        self.data["stages"][stage]["finished"] = _now()
        self._write()

    def inputs(self, files: dict):
        self.data["inputs"].update({k: file_sha256(v) for k, v in files.items()})
        self._write()

    def fail(self, stage, exc):
        self.data.update(status="invalid", failed_stage=stage, error=str(exc))
        self._write()

    def complete(self):
        self.data["status"] = "complete"
        self._write()


class _Stages:
    """Runs named stages, recording them in the manifest and wrapping failures."""

    def __init__(self, manifest: Manifest | None, events: EventLog):
        self.manifest = manifest
        self.events = events

    def __call__(self, name, fn, *args, **kwargs):
        if self.manifest:
            self.manifest.start(name)
        self.events.emit("stage_start", stage=name)
        try:
            out = fn(*args, **kwargs)
        except Exception as exc:
            if self.manifest:
                self.manifest.fail(name, exc)
            self.events.emit("stage_failed", stage=name, error=str(exc))
            if isinstance(exc, StageError):
                raise
            raise StageError(name, exc) from exc
        if self.manifest:
            self.manifest.finish(name)
        self.events.emit("stage_done", stage=name)
        return out


@dataclass
class PipelineResult:
    metrics: MetricsReport
    trace: list
    clients: dict = field(repr=False, default_factory=dict)
    uploads: list = field(repr=False, default_factory=list)
    subkgs: dict = field(repr=False, default_factory=dict)
    neighbor_sets: dict = field(repr=False, default_factory=dict)
    split: Optional[Split] = field(repr=False, default=None)
    embeddings: Optional[EmbeddingState] = field(repr=False, default=None)
    diagnostics: dict = field(default_factory=dict)


def write_trace_csv(path, trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "mean_loss", "messages", "NDCG@10", "Recall@10"])
        for r in trace:
            w.writerow([r.round, f"{r.mean_loss:.10f}", r.messages,
                        "" if r.ndcg10 is None else f"{r.ndcg10:.10f}",
                        "" if r.recall10 is None else f"{r.recall10:.10f}"])


def write_metrics(out_dir, report: MetricsReport):
    out = Path(out_dir)
    dataio.write_json(out / "metrics.json", report.to_json())
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(report.csv_header())
        w.writerow(report.csv_row())


def resolve_dataset(config: SimulationConfig, scratch: Path) -> tuple:
    """Returns ``(Dataset, data directory)``, generating synthetic data when asked."""
    if config.data_dir:
        return dataio.load_dataset_dir(config.data_dir), Path(config.data_dir)
    spec = config.synthetic or dataio.SyntheticSpec()
    data_dir = dataio.generate_synthetic(spec, scratch / "data")
    return dataio.load_dataset_dir(data_dir, name="synthetic"), data_dir


def simulate(dataset, config: SimulationConfig, pretrained=None, out: Path | None = None, stages=None,
             events=None) -> PipelineResult:
    """Core of the pipeline on an in-memory dataset; writes stage files when ``out`` is set."""
    hp, ab = config.hp, config.ablation
    events = events or EventLog(None)
    stages = stages or _Stages(None, events)
    server = client_dir = None
    if out is not None:
        server, client_dir = out / "server", out / "client"
        server.mkdir(parents=True, exist_ok=True)
        client_dir.mkdir(parents=True, exist_ok=True)

    if pretrained is None:
        state, loss_trace = stages("pretrain", stage_pretrain, dataset.kg, hp, ab.no_pretrain)
    else:
        state, loss_trace = pretrained
    if server is not None:
        save_checkpoint(state, server / "checkpoint.bin", hp, {"loss_trace": loss_trace,
                                                               "no_pretrain": ab.no_pretrain})
    split = stages("split", make_split, dataset.histories, hp.seed)
    histories = train_histories(split, dataset.catalog)
    poi_emb = poi_table(state, dataset.catalog)
    uploads = stages("desensitize", stage_desensitize, histories, dataset.catalog, poi_emb, hp.epsilon, hp.seed)
    distortion = segment_distortion(histories, uploads, dataset.catalog)
    passthrough = sum(int(len(dataset.catalog.pois_in_category(dataset.catalog.category_of(p))) < 2)
                      for h in histories for p in h.pois)
    events.emit("desensitized", segment_distortion=distortion, singleton_passthrough=passthrough)
    if client_dir is not None:
        dataio.write_json(client_dir / "split.json", split.to_json())
        dataio.write_uploads(server / "uploads.tsv", uploads)
        dataio.write_catalog(server / "catalog.tsv", dataset.catalog)

    subkgs = stages("partition", stage_partition, dataset.kg, uploads, dataset.catalog, hp.hop_limit,
                    ab.no_meta_path)
    neighbor_sets = stages("neighbors", stage_neighbors, uploads, dataset.catalog, poi_emb, hp.neighbor_cap)
    if server is not None:
        dataio.write_subkgs(server / "subkgs", subkgs)
        dataio.write_json(server / "neighbors.json", neighbors_to_json(neighbor_sets))
    events.emit("server_done", mean_subkg_triples=float(np.mean([len(s) for s in subkgs.values()])),
                mean_neighbors=float(np.mean([len(n.members) for n in neighbor_sets.values()])))

    clients = build_clients(dataset.catalog, split, state, subkgs, hp, dataset.kg)
    payload_log = PayloadLog(client_dir / "audit") if (config.audit_payloads and client_dir is not None) else None
    try:
        trace = stages("train", train_clients, clients, split, neighbor_sets, hp, ab.no_communication,
                       config.validate_every, config.patience, config.threads, payload_log, events)
    finally:
        if payload_log is not None:
            payload_log.close()
    report = stages("evaluate", evaluate, clients, split, config.eval_k, "test", config.eval_candidates, hp.seed)
    report.dataset, report.seed, report.config_hash, report.ablation = (
        dataset.name, hp.seed, config.config_hash(), ab.tag)
    if out is not None:
        save_clients(client_dir / "clients", clients)
        write_trace_csv(out / "trace.csv", trace)
        write_metrics(out, report)
    return PipelineResult(report, trace, clients, uploads, subkgs, neighbor_sets, split, state,
                          {"segment_distortion": distortion, "singleton_passthrough": passthrough})


def run_pipeline(config: SimulationConfig, overwrite=False, pretrained=None, dataset=None) -> PipelineResult:
    """Run all three steps; with ``output_dir`` set, every artifact lands on disk."""
    out = Path(config.output_dir) if config.output_dir else None
    scratch_ctx = tempfile.TemporaryDirectory() if out is None else None
    try:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            if overwrite:
                for child in ("server", "client", "data"):
                    shutil.rmtree(out / child, ignore_errors=True)
            manifest = Manifest(out, config, overwrite=overwrite)
            events = EventLog(out / "events.jsonl")
        else:
            manifest, events = None, EventLog(None)
        stages = _Stages(manifest, events)
        base = out if out is not None else Path(scratch_ctx.name)
        try:
            if dataset is None:
                dataset, data_dir = stages("load", resolve_dataset, config, base)
                if manifest:
                    manifest.inputs({name: data_dir / name for name in (dataio.CHECKINS, dataio.CATALOG, dataio.KG)
                                     if (data_dir / name).exists()})
            events.emit("dataset", **dataset.stats)
            result = simulate(dataset, config, pretrained, out, stages, events)
        finally:
            events.close()
        if manifest:
            manifest.complete()
        return result
    finally:
        if scratch_ctx is not None:
            scratch_ctx.cleanup()


def sweep(config: SimulationConfig, epsilons=(0.5, 2, 4, 8), mus=(0.1, 0.3, 0.5, 0.7), overwrite=False):
    """Grid over (epsilon, mu); pretraining runs once and is shared by every cell.

    Returns ``{(epsilon, mu): MetricsReport}`` and writes ``sweep.csv`` when
    ``output_dir`` is set.
    """
    if not epsilons or not mus:
        raise DataError("sweep grids must be non-empty")
    out = Path(config.output_dir) if config.output_dir else None
    with tempfile.TemporaryDirectory() as scratch:
        base = out if out is not None else Path(scratch)
        base.mkdir(parents=True, exist_ok=True)
        dataset, _ = resolve_dataset(config, base)
        pretrained = stage_pretrain(dataset.kg, config.hp, config.ablation.no_pretrain)
        grid = {}
        for eps in epsilons:
            for mu in mus:
                cell = config.replace(hp=config.hp.replace(epsilon=float(eps), mu=float(mu)),
                                      output_dir=str(base / f"eps_{eps}_mu_{mu}") if out is not None else None)
                grid[(eps, mu)] = run_pipeline(cell, overwrite=overwrite, pretrained=pretrained,
                                               dataset=dataset).metrics
    if out is not None:
        write_sweep_csv(out / "sweep.csv", grid)
    return grid


def write_sweep_csv(path, grid):
    ks = sorted(next(iter(grid.values())).per_k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "mu"] + [f"{m}@{k}" for k in ks for m in ("Recall", "NDCG")])
        for (eps, mu), rep in grid.items():
            w.writerow([eps, mu] + [f"{rep.per_k[k][m]:.6f}" for k in ks for m in ("recall", "ndcg")])
