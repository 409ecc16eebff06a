"""Experiment pipeline behind the CLI: train, unlearn, retrain, MIA, report.

Every stage reads the experiment config, rebuilds the (deterministic) client
splits and checks them against the manifest written by ``cmd_train``, then
writes its artifacts and a small JSON fragment into the run directory.
``cmd_report`` merges the fragments into ``report.json``.

Sub-seeds all come from ``derive_seed(master, name)``; the names used are
listed in ``SEED_NAMES``.  Train and retrain share every data split; the
retrain run gets its own initialisation unless ``retrain.same_init`` is set.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import jsonschema
import numpy as np

from .config import ExperimentConfig
from .data import (
    ClientDataset, LabeledSet, PartitionSpec, Standardization, build_manifest, concat_sets,
    load_har_csv, load_idx_images, make_third_party, manifest_hash, partition, split_forget,
    split_holdout, synth_blobs,
)
from .errors import ConfigError, ContractError
from .federation import FederationConfig, FederationState, evaluate_clients, retrain_baseline, run_federation
from .mia import MiaSplits, evaluate_unlearning, train_attack
from .nn import Model, build_har_net, build_lenet5, build_mlp, load_model, save_model
from .seeding import derive_seed
from .tensor import SgdConfig
from .unlearning import UnlearnConfig, apply_unlearned, unlearn

logger = logging.getLogger(__name__)

REPORT_VERSION = 1

SEED_NAMES = (
    "data", "partition", "partition/test", "holdout/<client>", "reserve/<client>", "forget",
    "federation", "retrain", "unlearn/<kind>", "third_party/<kind>/unlearn", "third_party/<kind>/out",
    "third_party/<kind>/eval", "mia/<kind>/attack", "mia/<kind>/eval",
)


@dataclass
class Prepared:
    clients: List[ClientDataset]
    manifest: dict
    manifest_sha256: str
    input_shape: tuple
    num_classes: int


def _seed(cfg: ExperimentConfig, name: str) -> int:
    return derive_seed(cfg.seed, name)


# -- data -------------------------------------------------------------------------


def _client_pools(cfg: ExperimentConfig):
    """Per-client (train_pool, test) pairs before reserve/forget carving."""
    ds = cfg.dataset
    ds.check_paths()
    if ds.kind == "synth":
        sets = synth_blobs(ds.clients, ds.classes, ds.dim, ds.samples_per_client, ds.non_iid_skew,
                           seed=_seed(cfg, "data"), center_scale=ds.center_scale, spread=ds.spread)
        return [split_holdout(s, ds.test_fraction, _seed(cfg, f"holdout/{i}")) for i, s in enumerate(sets)]
    if ds.kind == "idx":
        train = load_idx_images(ds.train_images, ds.train_labels)
        test = load_idx_images(ds.test_images, ds.test_labels)
        rng = np.random.default_rng(_seed(cfg, "data"))
        if ds.subset is not None and ds.subset < len(train):
            train = train.subset(np.sort(rng.choice(len(train), ds.subset, replace=False)))
        if ds.test_subset is not None and ds.test_subset < len(test):
            test = test.subset(np.sort(rng.choice(len(test), ds.test_subset, replace=False)))
        # test ids continue after the training ids so manifests never collide
        test = LabeledSet(test.features, test.labels, test.meta, test.ids + int(train.ids.max()) + 1)
        spec = PartitionSpec(cfg.partition.scheme, cfg.partition.num_clients,
                             cfg.partition.shards_per_client, _seed(cfg, "partition"))
        tspec = PartitionSpec("iid", cfg.partition.num_clients, seed=_seed(cfg, "partition/test"))
        return list(zip(partition(train, spec), partition(test, tspec)))
    sets = load_har_csv(ds.paths, ds.window_len, ds.stride, ds.num_classes)
    return [split_holdout(s, ds.test_fraction, _seed(cfg, f"holdout/{i}")) for i, s in enumerate(sets)]


def prepare(cfg: ExperimentConfig) -> Prepared:
    """Build standardized client datasets, carve D_re and D_f, and the split manifest."""
    pools = _client_pools(cfg)
    if len(pools) < 2:
        raise ConfigError(f"need at least 2 clients, dataset yields {len(pools)}")
    if not 0 <= cfg.unlearn.client < len(pools):
        raise ConfigError(f"unlearn.client {cfg.unlearn.client} outside [0, {len(pools)})")
    staged = []
    for i, (pool, test) in enumerate(pools):
        train, reserved = split_holdout(pool, cfg.dataset.reserve_fraction, _seed(cfg, f"reserve/{i}"))
        staged.append((train, test, reserved if len(reserved) else None))
    # statistics from training data only
    stats = Standardization.fit(concat_sets([t for t, _, _ in staged]).features)
    clients = []
    for i, (train, test, reserved) in enumerate(staged):
        clients.append(ClientDataset(
            i, train.standardized(stats), test.standardized(stats),
            reserved=None if reserved is None else reserved.standardized(stats),
        ))
    u = cfg.unlearn.client
    try:
        clients[u] = split_forget(clients[u], cfg.unlearn.forget_fraction, cfg.unlearn.forget_mode,
                                  _seed(cfg, "forget"))
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    manifest = build_manifest(clients, {
        "unlearn_client": u,
        "standardization": stats.to_json(),
        "dataset_kind": cfg.dataset.kind,
    })
    meta = clients[0].train.meta
    return Prepared(clients, manifest, manifest_hash(manifest), tuple(meta.input_shape), meta.num_classes)


def _unlearn_client(prep: Prepared, cfg: ExperimentConfig) -> ClientDataset:
    return next(c for c in prep.clients if c.client_id == cfg.unlearn.client)


def model_builder(cfg: ExperimentConfig, prep: Prepared):
    arch, shape, k = cfg.model.arch, prep.input_shape, prep.num_classes
    if arch == "mlp":
        if len(shape) != 1:
            raise ConfigError(f"mlp needs flat features, dataset has shape {shape}")
        return lambda seed: build_mlp(shape[0], cfg.model.hidden, k, seed)
    if arch == "lenet5":
        if shape != (1, 28, 28):
            raise ConfigError(f"lenet5 needs 1x28x28 inputs, dataset has shape {shape}")
        return lambda seed: build_lenet5(k, seed)
    if len(shape) != 3 or shape[1] != 1:
        raise ConfigError(f"har_net needs C x 1 x L windows, dataset has shape {shape}")
    return lambda seed: build_har_net(shape[0], shape[2], k, seed)


def federation_config(cfg: ExperimentConfig, n_clients: int, seed_name: str) -> FederationConfig:
    f = cfg.federation
    try:
        return FederationConfig(n_clients, f.rounds, f.local_epochs, f.batch_size, f.sgd(),
                                _seed(cfg, seed_name), f.weighting, f.parallel)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


def unlearn_config(cfg: ExperimentConfig, kind: str) -> UnlearnConfig:
    u = cfg.unlearn
    try:
        return UnlearnConfig(u.lam, u.epochs, u.minibatch, u.sgd(), u.early_stop_kl,
                             _seed(cfg, f"unlearn/{kind}"), u.kl_target, u.pairing)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


def third_party_set(cfg: ExperimentConfig, client: ClientDataset, kind: str, purpose: str) -> LabeledSet:
    """D_t (purpose "unlearn"), D_out ("out") or evaluation non-members ("eval")."""
    if kind == "reserved":
        if client.reserved is None or len(client.reserved) == 0:
            raise ConfigError("third-party kind 'reserved' needs a reserved split (dataset.reserve_fraction > 0)")
        pool = client.reserved
        size = len(pool) if purpose != "unlearn" or cfg.unlearn.third_party_size is None else min(
            cfg.unlearn.third_party_size, len(pool))
        return make_third_party(client, "reserved", size, _seed(cfg, f"third_party/{kind}/{purpose}"))
    if purpose == "unlearn":
        size = cfg.unlearn.third_party_size or max(len(client.retain), len(client.forget))
    elif purpose == "out":
        size = len(client.retain)
    else:
        size = len(client.forget)
    return make_third_party(client, "noise", size, _seed(cfg, f"third_party/{kind}/{purpose}"))


def accuracy_block(model: Model, prep: Prepared, client: ClientDataset) -> dict:
    per_client = evaluate_clients(model, prep.clients)
    return {
        "acc_forget": model.accuracy(client.forget.features, client.forget.labels),
        "acc_retain": model.accuracy(client.retain.features, client.retain.labels),
        "acc_test": per_client,
        "acc_test_mean": float(np.mean(per_client)),
    }


# -- run directory helpers ----------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"missing run artifact {path}") from None


def run_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_manifest(out: Path, prep: Prepared) -> None:
    path = out / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run the train stage first")
    stored = _read_json(path)
    if manifest_hash(stored) != prep.manifest_sha256:
        raise ConfigError(f"{path} does not match the splits this config produces")


# -- stages ------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, prep: Optional[Prepared] = None) -> FederationState:
    prep = prep or prepare(cfg)
    out = run_dir(cfg)
    build = model_builder(cfg, prep)
    fcfg = federation_config(cfg, len(prep.clients), "federation")
    state = run_federation(prep.clients, fcfg, build)
    save_model(state.server_model, out / "target.funl")
    _write_json(out / "manifest.json", prep.manifest)
    _write_json(out / "config.json", cfg.to_dict())
    state.write_round_log(out / "rounds.jsonl")
    client = _unlearn_client(prep, cfg)
    _write_json(out / "train.json", {
        "manifest_sha256": prep.manifest_sha256,
        "arch_id": state.server_model.arch_id,
        "rounds": fcfg.rounds,
        "comm_bytes": state.total_comm_bytes(),
        "target": accuracy_block(state.server_model, prep, client),
        "timing": {"train_seconds": state.wall_clock["train"]},
    })
    logger.info("train: %d rounds in %.2fs", fcfg.rounds, state.wall_clock["train"])
    return state


def cmd_unlearn(cfg: ExperimentConfig, kind: str, prep: Optional[Prepared] = None, model_path=None) -> dict:
    prep = prep or prepare(cfg)
    out = run_dir(cfg)
    _check_manifest(out, prep)
    client = _unlearn_client(prep, cfg)
    ucfg = unlearn_config(cfg, kind)
    d_t = third_party_set(cfg, client, kind, "unlearn")
    target = load_model(Path(model_path) if model_path else out / "target.funl")
    model_u, trace = unlearn(target, client.forget, client.retain, d_t, ucfg)
    state = FederationState(target, [target.copy() for _ in prep.clients], round=cfg.federation.rounds)
    apply_unlearned(state, model_u, client.client_id)
    save_model(model_u, out / f"unlearned_{kind}.funl")
    trace.write_jsonl(out / f"trace_{kind}.jsonl")
    frag = {
        "third_party": kind,
        "third_party_size": len(d_t),
        "lambda": ucfg.lam,
        "comm_bytes": state.total_comm_bytes(),
        "comm_messages": len(state.comm_log),
        "trace": trace.summary(),
        "accuracy": accuracy_block(model_u, prep, client),
        "timing": {"unlearn_seconds": trace.elapsed_seconds},
    }
    _write_json(out / f"unlearn_{kind}.json", frag)
    logger.info("unlearn[%s]: %d steps in %.3fs", kind, len(trace.steps), trace.elapsed_seconds)
    return frag


def cmd_retrain(cfg: ExperimentConfig, prep: Optional[Prepared] = None) -> dict:
    prep = prep or prepare(cfg)
    out = run_dir(cfg)
    _check_manifest(out, prep)
    build = model_builder(cfg, prep)
    seed_name = "federation" if cfg.retrain.same_init else "retrain"
    fcfg = federation_config(cfg, len(prep.clients), seed_name)
    client = _unlearn_client(prep, cfg)
    model, seconds = retrain_baseline(prep.clients, client.client_id, fcfg, build)
    save_model(model, out / "retrain.funl")
    frag = {
        "manifest_sha256": prep.manifest_sha256,
        "same_init": cfg.retrain.same_init,
        "accuracy": accuracy_block(model, prep, client),
        "timing": {"retrain_seconds": seconds},
    }
    _write_json(out / "retrain.json", frag)
    logger.info("retrain: %.2fs", seconds)
    return frag


def cmd_mia(cfg: ExperimentConfig, kind: str, prep: Optional[Prepared] = None,
            model_paths: Optional[Dict[str, str]] = None) -> dict:
    """Train Q on the target model, then audit target / unlearned / retrained models.

    ``model_paths`` maps a label to a model file; by default every model of
    this run that exists on disk is audited.  A path that is given explicitly
    but missing raises FileNotFoundError.  The target is always audited, and
    verdicts for labels not audited this time are kept from an earlier call.
    """
    prep = prep or prepare(cfg)
    out = run_dir(cfg)
    _check_manifest(out, prep)
    client = _unlearn_client(prep, cfg)
    if model_paths is None:
        model_paths = {"target": out / "target.funl"}
        for label, name in (("unlearned", f"unlearned_{kind}.funl"), ("retrain", "retrain.funl")):
            if (out / name).exists():
                model_paths[label] = out / name
    models = {label: load_model(p) for label, p in model_paths.items()}
    target = models.get("target") or load_model(out / "target.funl")
    d_out = third_party_set(cfg, client, kind, "out")
    nonmembers = third_party_set(cfg, client, kind, "eval")
    q = train_attack(target, MiaSplits(client.retain, d_out), cfg.mia.epochs,
                     SgdConfig(cfg.mia.learning_rate, cfg.mia.momentum), _seed(cfg, f"mia/{kind}/attack"))
    models.setdefault("target", target)
    frag_path = out / f"mia_{kind}.json"
    # Q is a deterministic function of the run, so earlier verdicts stay valid
    verdicts = _read_json(frag_path)["verdicts"] if frag_path.exists() else {}
    for label, m in models.items():
        verdicts[label] = evaluate_unlearning(q, m, client.forget, nonmembers,
                                              seed=_seed(cfg, f"mia/{kind}/eval")).to_dict()
    frag = {
        "third_party": kind,
        "attack": {"train_accuracy": q.train_accuracy, "n_members": len(client.retain), "n_nonmembers": len(d_out)},
        "verdicts": verdicts,
    }
    _write_json(frag_path, frag)
    return frag


# -- report --------------------------------------------------------------------------

_NUM = {"type": "number"}
_ACC = {"type": "number", "minimum": 0.0, "maximum": 1.0}
_ACC_BLOCK = {
    "type": "object",
    "additionalProperties": False,
    "required": ["acc_forget", "acc_retain", "acc_test", "acc_test_mean"],
    "properties": {
        "acc_forget": _ACC, "acc_retain": _ACC, "acc_test_mean": _ACC,
        "acc_test": {"type": "array", "items": _ACC},
    },
}
_VERDICT = {
    "type": "object",
    "additionalProperties": False,
    "required": ["mia_accuracy", "member_rate_on_forget", "member_rate_on_nonmember",
                 "n_forget", "n_nonmember", "threshold"],
    "properties": {
        "mia_accuracy": _ACC, "member_rate_on_forget": _ACC, "member_rate_on_nonmember": _ACC,
        "n_forget": {"type": "integer"}, "n_nonmember": {"type": "integer"}, "threshold": _NUM,
    },
}
_NULLABLE = lambda s: {"oneOf": [{"type": "null"}, s]}  # noqa: E731

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "config", "manifest_sha256", "num_clients", "unlearn_client",
                 "third_party_kinds", "target", "retrain", "unlearned", "mia", "timing"],
    "properties": {
        "schema_version": {"const": REPORT_VERSION},
        "config": {"type": "object"},
        "manifest_sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "num_clients": {"type": "integer", "minimum": 2},
        "unlearn_client": {"type": "integer", "minimum": 0},
        "third_party_kinds": {"type": "array", "items": {"enum": ["noise", "reserved"]}},
        "target": _ACC_BLOCK,
        "retrain": _NULLABLE(_ACC_BLOCK),
        "unlearned": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "required": ["accuracy", "lambda", "third_party_size", "comm_bytes", "comm_messages", "trace"],
                "properties": {
                    "accuracy": _ACC_BLOCK,
                    "lambda": _ACC,
                    "third_party_size": {"type": "integer"},
                    "comm_bytes": {"type": "integer"},
                    "comm_messages": {"type": "integer"},
                    "trace": {"type": "object"},
                },
            },
        },
        "mia": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "required": ["attack", "target", "unlearned", "retrain"],
                "properties": {
                    "attack": {"type": "object"},
                    "target": _VERDICT,
                    "unlearned": _NULLABLE(_VERDICT),
                    "retrain": _NULLABLE(_VERDICT),
                },
            },
        },
        "timing": {
            "type": "object",
            "additionalProperties": False,
            "required": ["train_seconds", "retrain_seconds", "unlearn_seconds", "speedup"],
            "properties": {
                "train_seconds": {"type": "number", "minimum": 0},
                "retrain_seconds": _NULLABLE({"type": "number", "minimum": 0}),
                "unlearn_seconds": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
                "speedup": {"type": "object", "additionalProperties": _NULLABLE(
                    {"type": "number", "exclusiveMinimum": 0})},
            },
        },
    },
}


def validate_report(report: dict) -> dict:
    try:
        jsonschema.validate(report, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ContractError(f"report does not match schema v{REPORT_VERSION}: {exc.message}") from None
    return report


def load_report(path) -> dict:
    """Read and validate a report.json; unknown fields are rejected."""
    return validate_report(json.loads(Path(path).read_text()))


def sig6(x: float) -> float:
    return float(f"{x:.6g}")


def speedup(retrain_seconds: float, unlearn_seconds: float) -> float:
    if not (retrain_seconds > 0 and unlearn_seconds > 0):
        raise ContractError("speedup needs positive retrain and unlearn times")
    return sig6(retrain_seconds / unlearn_seconds)


def cmd_report(out_dir) -> dict:
    out = Path(out_dir)
    config = _read_json(out / "config.json")
    train = _read_json(out / "train.json")
    retrain = _read_json(out / "retrain.json") if (out / "retrain.json").exists() else None
    kinds = [k for k in config["unlearn"]["third_party"] if (out / f"unlearn_{k}.json").exists()]
    unlearned, mia, unlearn_s, speed = {}, {}, {}, {}
    for k in kinds:
        frag = _read_json(out / f"unlearn_{k}.json")
        unlearn_s[k] = frag["timing"]["unlearn_seconds"]
        unlearned[k] = {key: frag[key] for key in
                        ("accuracy", "lambda", "third_party_size", "comm_bytes", "comm_messages", "trace")}
        speed[k] = speedup(retrain["timing"]["retrain_seconds"], unlearn_s[k]) if retrain else None
        if (out / f"mia_{k}.json").exists():
            m = _read_json(out / f"mia_{k}.json")
            v = m["verdicts"]
            mia[k] = {"attack": m["attack"], "target": v["target"],
                      "unlearned": v.get("unlearned"), "retrain": v.get("retrain")}
    report = {
        "schema_version": REPORT_VERSION,
        "config": config,
        "manifest_sha256": train["manifest_sha256"],
        "num_clients": len(train["target"]["acc_test"]),
        "unlearn_client": config["unlearn"]["client"],
        "third_party_kinds": kinds,
        "target": train["target"],
        "retrain": retrain["accuracy"] if retrain else None,
        "unlearned": unlearned,
        "mia": mia,
        "timing": {
            "train_seconds": train["timing"]["train_seconds"],
            "retrain_seconds": retrain["timing"]["retrain_seconds"] if retrain else None,
            "unlearn_seconds": unlearn_s,
            "speedup": speed,
        },
    }
    validate_report(report)
    _write_json(out / "report.json", report)
    (out / "accuracy_by_client.csv").write_text(accuracy_csv(report))
    return report


def accuracy_csv(report: dict) -> str:
    """One row per client.  ``unlearned_acc`` is the first third-party kind; each
    kind also gets its own ``unlearned_acc_<kind>`` column when more than one ran."""
    kinds = report["third_party_kinds"]
    header = ["client_id", "target_acc", "unlearned_acc", "retrain_acc"]
    if len(kinds) > 1:
        header += [f"unlearned_acc_{k}" for k in kinds]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i in range(report["num_clients"]):
        un = [report["unlearned"][k]["accuracy"]["acc_test"][i] for k in kinds]
        row = [i, report["target"]["acc_test"][i], un[0] if un else "",
               report["retrain"]["acc_test"][i] if report["retrain"] else ""]
        if len(kinds) > 1:
            row += un
        w.writerow(row)
    return buf.getvalue()


def run_all(cfg: ExperimentConfig) -> dict:
    """train -> retrain -> unlearn (each kind) -> mia (each kind) -> report."""
    prep = prepare(cfg)
    cmd_train(cfg, prep)
    if cfg.retrain.enabled:
        cmd_retrain(cfg, prep)
    for kind in cfg.unlearn.third_party:
        cmd_unlearn(cfg, kind, prep)
    for kind in cfg.unlearn.third_party:
        cmd_mia(cfg, kind, prep)
    return cmd_report(cfg.out)
