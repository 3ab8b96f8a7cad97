"""``deckg`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Failures print one line ``deckg: error=<kind> reason=<text>`` on stderr.

Stage subcommands exchange files::

    synth       -> <data>/{checkins,catalog,kg}.tsv, labels.json
    pretrain    -> <ckpt> (+ <ckpt>.json)
    desensitize -> <uploads>/{uploads.tsv,split.json,catalog.tsv}
    partition   -> <subkgs>/user_<u>.tsv
    neighbors   -> <neighbors.json>
    train       -> <train>/clients/, <train>/trace.csv
    evaluate    -> <metrics.json>
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import dataio
from .domain import DataError, DeckgError, NumericalError
from .evaluation import Split, evaluate, make_split
from .neighbors import neighbors_from_json, neighbors_to_json
from .orchestrator import (Ablation, SimulationConfig, StageError, build_clients, load_clients, poi_table,
                           run_pipeline, save_clients, stage_desensitize, stage_neighbors, stage_partition,
                           stage_pretrain, sweep, train_clients, train_histories, write_trace_csv)
from .pretrain import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(DeckgError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# flag -> Hyperparams field
_HP_FLAGS = {
    "dim": "dim_entity", "rel_dim": "dim_relation", "user_dim": "dim_user", "layers": "layers",
    "epochs": "epochs_pretrain", "lr": "pretrain_lr", "seed": "seed", "epsilon": "epsilon", "mu": "mu",
    "gamma": "gamma", "rounds": "rounds_train", "cap": "neighbor_cap", "hop_limit": "hop_limit",
    "activation": "activation", "batch_size": "batch_size", "negatives": "negatives_per_positive",
}


def _add_hp(p, *names):
    spec = {
        "dim": (int, "entity dimension d"), "rel_dim": (int, "relation dimension k"),
        "user_dim": (int, "user dimension K"), "layers": (int, "propagation layers L"),
        "epochs": (int, "pretraining epochs"), "lr": (float, "pretraining learning rate"),
        "seed": (int, "random seed"), "epsilon": (float, "selection sensitivity"),
        "mu": (float, "local/neighbour balance"), "gamma": (float, "on-device learning rate"),
        "rounds": (int, "training rounds"), "cap": (int, "geographic neighbour cap"),
        "hop_limit": (int, "meta-path hop limit"), "activation": (str, "layer activation"),
        "batch_size": (int, "pretraining batch size"), "negatives": (int, "negatives per positive"),
    }
    for name in names:
        typ, help_ = spec[name]
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None, help=help_)


def _load_config(args) -> SimulationConfig:
    config = SimulationConfig.from_file(args.config) if getattr(args, "config", None) else SimulationConfig()
    overrides = {field: getattr(args, flag) for flag, field in _HP_FLAGS.items()
                 if getattr(args, flag, None) is not None}
    if overrides:
        config = config.replace(hp=config.hp.replace(**overrides))
    threads = getattr(args, "threads", None)
    if threads is None and os.environ.get("DECKG_THREADS"):
        try:
            threads = int(os.environ["DECKG_THREADS"])
        except ValueError:
            raise UsageError("DECKG_THREADS must be an integer") from None
    if threads is not None:
        if threads < 1:
            raise UsageError("--threads must be >= 1")
        config = config.replace(threads=threads)
    return config


def _dataset_for_kg(kg_path):
    path = Path(kg_path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    return dataio.load_dataset(path.parent / dataio.CHECKINS, path, path.parent / dataio.CATALOG,
                               path.parent / dataio.LABELS if (path.parent / dataio.LABELS).exists() else None)


def _read_split(path) -> Split:
    try:
        return Split.from_json(dataio.read_json(path))
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise DataError(f"{path}: malformed split ({exc})") from None


def _checkpoint(path):
    if not Path(path).is_file():
        raise DataError(f"{path}: no such file")
    return load_checkpoint(path)


def _check_compatible(state, dataset):
    if state.entity.shape[0] != dataset.kg.n_entities or state.relation.shape[0] != dataset.kg.n_relations:
        raise DataError(f"checkpoint has {state.entity.shape[0]} entities / {state.relation.shape[0]} relations; "
                        f"dataset has {dataset.kg.n_entities} / {dataset.kg.n_relations}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    spec = dataio.SyntheticSpec.from_dict(dataio.read_json(args.spec)) if args.spec else dataio.SyntheticSpec()
    if args.seed is not None:
        spec = dataio.SyntheticSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    out = dataio.generate_synthetic(spec, args.out)
    print(json.dumps(dataio.load_dataset_dir(out).stats, sort_keys=True))


def cmd_pretrain(args):
    config = _load_config(args)
    dataset = dataio.load_dataset_dir(args.data)
    state, trace = stage_pretrain(dataset.kg, config.hp, args.random_init)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, args.out, config.hp, {"loss_trace": trace, "no_pretrain": bool(args.random_init)})
    print(json.dumps({"epochs": len(trace), "final_loss": trace[-1] if trace else None}))


def cmd_desensitize(args):
    config = _load_config(args)
    hp = config.hp
    dataset = dataio.load_dataset_dir(args.data)
    state, _ = _checkpoint(args.ckpt)
    _check_compatible(state, dataset)
    split = make_split(dataset.histories, hp.seed)
    histories = train_histories(split, dataset.catalog)
    uploads = stage_desensitize(histories, dataset.catalog, poi_table(state, dataset.catalog), hp.epsilon, hp.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_uploads(out / "uploads.tsv", uploads)
    dataio.write_json(out / "split.json", split.to_json())
    dataio.write_catalog(out / "catalog.tsv", dataset.catalog)
    print(json.dumps({"users": len(uploads), "checkins": sum(len(u.pois) for u in uploads)}))


def cmd_partition(args):
    config = _load_config(args)
    dataset = _dataset_for_kg(args.kg)
    uploads = dataio.read_uploads(Path(args.uploads) / "uploads.tsv")
    subkgs = stage_partition(dataset.kg, uploads, dataset.catalog, config.hp.hop_limit, args.one_hop)
    dataio.write_subkgs(args.out, subkgs)
    print(json.dumps({"users": len(subkgs), "mean_triples": sum(len(s) for s in subkgs.values()) / max(len(subkgs), 1)}))


def cmd_neighbors(args):
    config = _load_config(args)
    up = Path(args.uploads)
    catalog = dataio.read_catalog(up / "catalog.tsv")
    uploads = dataio.read_uploads(up / "uploads.tsv")
    state, _ = _checkpoint(args.ckpt)
    if int(catalog.poi_entity.max()) >= state.entity.shape[0]:
        raise DataError("checkpoint does not cover the catalog's entities")
    sets = stage_neighbors(uploads, catalog, poi_table(state, catalog), config.hp.neighbor_cap)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dataio.write_json(args.out, neighbors_to_json(sets))
    print(json.dumps({"users": len(sets)}))


def cmd_train(args):
    config = _load_config(args)
    hp = config.hp
    dataset = dataio.load_dataset_dir(args.data)
    state, _ = _checkpoint(args.ckpt)
    _check_compatible(state, dataset)
    split = _read_split(Path(args.uploads) / "split.json")
    subkgs = dataio.read_subkgs(args.subkgs)
    neighbor_sets = neighbors_from_json(dataio.read_json(args.neighbors))
    clients = build_clients(dataset.catalog, split, state, subkgs, hp, dataset.kg)
    trace = train_clients(clients, split, neighbor_sets, hp, args.no_communication, config.validate_every,
                          config.patience, config.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_clients(out / "clients", clients)
    write_trace_csv(out / "trace.csv", trace)
    print(json.dumps({"rounds": len(trace), "final_loss": trace[-1].mean_loss if trace else None}))


def cmd_evaluate(args):
    clients = load_clients(args.clients)
    split = _read_split(args.split)
    seed = args.seed if args.seed is not None else 0
    report = evaluate(clients, split, args.k, "test", args.candidates, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_json(out, report.to_json())
    print(json.dumps(report.to_json()["per_k"], sort_keys=True))


def _run_config(args) -> SimulationConfig:
    config = _load_config(args)
    if getattr(args, "ablation", None):
        config = config.replace(ablation=Ablation.from_name(args.ablation))
    if args.data:
        config = config.replace(data_dir=args.data, synthetic=None)
    if args.out:
        config = config.replace(output_dir=args.out)
    if getattr(args, "audit", False):
        config = config.replace(audit_payloads=True)
    if not config.output_dir:
        raise UsageError("an output directory is required (--out or output_dir in the config)")
    return config


def cmd_run(args):
    config = _run_config(args)
    result = run_pipeline(config, overwrite=args.overwrite)
    print(json.dumps(result.metrics.to_json(), sort_keys=True))


def cmd_sweep(args):
    config = _run_config(args)
    grid = sweep(config, args.grid_epsilon, args.grid_mu, overwrite=args.overwrite)
    print(json.dumps({"cells": len(grid), "csv": str(Path(config.output_dir) / "sweep.csv")}))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deckg", description="Decentralized KG-enhanced POI recommendation simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="JSON file of SyntheticSpec fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="server-side KG pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config")
    p.add_argument("--random-init", action="store_true", help="skip training (w/o P)")
    _add_hp(p, "dim", "rel_dim", "layers", "epochs", "lr", "seed", "activation", "batch_size", "negatives")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("desensitize", help="split histories and desensitize the training part")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_hp(p, "epsilon", "seed")
    p.set_defaults(func=cmd_desensitize)

    p = sub.add_parser("partition", help="meta-path sub-KG per user")
    p.add_argument("--kg", required=True, help="kg.tsv inside a dataset directory")
    p.add_argument("--uploads", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--one-hop", action="store_true", help="one-hop sub-KGs (w/o MP)")
    p.add_argument("--config")
    _add_hp(p, "hop_limit")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("neighbors", help="geographic and semantic neighbours")
    p.add_argument("--uploads", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_hp(p, "cap")
    p.set_defaults(func=cmd_neighbors)

    p = sub.add_parser("train", help="on-device refinement rounds")
    for flag in ("--data", "--ckpt", "--uploads", "--subkgs", "--neighbors", "--out"):
        p.add_argument(flag, required=True)
    p.add_argument("--no-communication", action="store_true", help="w/o C-C")
    p.add_argument("--config")
    p.add_argument("--threads", type=int)
    _add_hp(p, "mu", "gamma", "rounds", "seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="test-split metrics of trained clients")
    p.add_argument("--clients", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--k", type=_ints, default=[10, 20])
    p.add_argument("--candidates", type=int, help="rank a sampled candidate set of this size")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    for name, func, help_ in (("run", cmd_run, "full pipeline"), ("sweep", cmd_sweep, "epsilon x mu grid")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config")
        p.add_argument("--data", help="dataset directory (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--overwrite", action="store_true")
        p.add_argument("--threads", type=int)
        if name == "run":
            _add_hp(p, *_HP_FLAGS)
            p.add_argument("--ablation", choices=["no-mp", "no-cc", "no-p"])
            p.add_argument("--audit", action="store_true", help="log neighbour-bound payloads")
        else:
            _add_hp(p, *(f for f in _HP_FLAGS if f not in ("epsilon", "mu")))
            p.add_argument("--epsilon", dest="grid_epsilon", type=_floats, default=[0.5, 2.0, 4.0, 8.0])
            p.add_argument("--mu", dest="grid_mu", type=_floats, default=[0.1, 0.3, 0.5, 0.7])
        p.set_defaults(func=func)
    return parser


def _fail(kind, code, exc):
    reason = " ".join(str(exc).split())
    print(f"deckg: error={kind} reason={reason}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except StageError as exc:
        cause = exc.cause
        if isinstance(cause, NumericalError):
            return _fail("numerical", EXIT_NUMERICAL, exc)
        if isinstance(cause, (DataError, OSError, ValueError, KeyError)):
            return _fail("data", EXIT_DATA, exc)
        raise
    except NumericalError as exc:
        return _fail("numerical", EXIT_NUMERICAL, exc)
    except (DataError, OSError, json.JSONDecodeError) as exc:
        return _fail("data", EXIT_DATA, exc)


if __name__ == "__main__":
    sys.exit(main())
