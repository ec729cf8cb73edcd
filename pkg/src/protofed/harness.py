"""Experiment orchestration: config files, output artifacts, audits.

An experiment is described by an INI file with six sections (dataset,
partition, model, loss, federation, run), every key optional. Outputs land
in the run directory: partition.json, rounds.csv, summary.json and, on
request, per-round model checkpoints. rounds.csv is byte-reproducible for
a fixed config, so runs can be diffed directly.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import Dataset, load_idx, partition_dirichlet, synth_blobs
from .federation import FedConfig, Topology, init_federation, run_round
from .losses import LossWeights
from .metrics import RoundRecord, average_accuracy
from .model import Arch, snapshot

__all__ = [
    "ExperimentConfig",
    "build_dataset",
    "run_experiment",
    "compare_clusterers",
    "partition_audit",
    "rounds_csv",
]

CSV_HEADER = "round,selected,ce,distill,align,proto,acc,rmse,mae,macro_f1"


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat view of one experiment; see _SCHEMA for the INI spelling."""

    # dataset
    data_kind: str = "blobs"  # "blobs" | "idx"
    classes: int = 3
    per_class: int = 100
    dim: int = 2
    spread: float = 0.15
    data_seed: int = 0
    domains: int = 1
    images: str = ""
    labels: str = ""
    images2: str = ""
    labels2: str = ""
    # partition
    clients: int = 10
    alpha: float = 0.3
    test_fraction: float = 0.2
    partition_seed: int = 0
    # model
    model_kind: str = "mlp"
    hidden: int = 64
    embedding_dim: int = 32
    # loss
    ce_weight: float = 0.9
    align_weight: float = 1.0
    proto_weight: float = 0.1
    balance: float = 0.5
    scale: float = 0.5
    temperature: float = 0.1
    # federation
    method: str = "mp-fedkd"
    rounds: int = 50
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.001
    fraction: float = 1.0
    clusters_per_class: int = 3
    aggregation: str = "normalized"
    prox_rho: float = 0.01
    fedproto_weight: float = 1.0
    workers: int = 1
    per_batch_protos: bool = False
    hubs: int = 1
    # run
    seed: int = 0
    out: str = "runs/exp"
    checkpoints: bool = False

    def __post_init__(self):
        if self.data_kind not in ("blobs", "idx"):
            raise ValueError(f"unknown dataset kind {self.data_kind!r}")
        if self.domains not in (1, 2):
            raise ValueError("domains must be 1 or 2")
        if self.data_kind == "idx" and (not self.images or not self.labels):
            raise ValueError("idx datasets need images and labels paths")
        if self.data_kind == "idx" and bool(self.images2) != bool(self.labels2):
            raise ValueError("a second domain needs both images2 and labels2")
        if self.hubs < 1:
            raise ValueError("hubs must be >= 1")

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            ce_weight=self.ce_weight,
            align_weight=self.align_weight,
            proto_weight=self.proto_weight,
            balance=self.balance,
            scale=self.scale,
            temperature=self.temperature,
        )

    def fed_config(self) -> FedConfig:
        return FedConfig(
            method=self.method,
            rounds=self.rounds,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            fraction=self.fraction,
            clusters_per_class=self.clusters_per_class,
            aggregation=self.aggregation,
            prox_rho=self.prox_rho,
            fedproto_weight=self.fedproto_weight,
            workers=self.workers,
            per_batch_protos=self.per_batch_protos,
            weights=self.loss_weights(),
        )

    @classmethod
    def from_ini_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(
            delimiters=("=",), inline_comment_prefixes=("#", ";")
        )
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ValueError(f"bad config syntax: {exc}") from exc
        values = {}
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ValueError(f"unknown config section [{section}]")
            table = _SCHEMA[section]
            for key, raw in parser[section].items():
                if key not in table:
                    raise ValueError(f"unknown key {key!r} in section [{section}]")
                attr, caster = table[key]
                try:
                    values[attr] = caster(raw)
                except ValueError as exc:
                    raise ValueError(f"bad value for [{section}] {key}: {exc}") from exc
        return cls(**values)

    @classmethod
    def from_ini(cls, path: Union[str, Path]) -> "ExperimentConfig":
        return cls.from_ini_text(Path(path).read_text())

    def override(self, **fields) -> "ExperimentConfig":
        """Replace the given fields, dropping entries set to None."""
        actual = {k: v for k, v in fields.items() if v is not None}
        return dataclasses.replace(self, **actual) if actual else self


_SCHEMA = {
    "dataset": {
        "kind": ("data_kind", str),
        "classes": ("classes", int),
        "per_class": ("per_class", int),
        "dim": ("dim", int),
        "spread": ("spread", float),
        "seed": ("data_seed", int),
        "domains": ("domains", int),
        "images": ("images", str),
        "labels": ("labels", str),
        "images2": ("images2", str),
        "labels2": ("labels2", str),
    },
    "partition": {
        "clients": ("clients", int),
        "alpha": ("alpha", float),
        "test_fraction": ("test_fraction", float),
        "seed": ("partition_seed", int),
    },
    "model": {
        "kind": ("model_kind", str),
        "hidden": ("hidden", int),
        "embedding_dim": ("embedding_dim", int),
    },
    "loss": {
        "ce_weight": ("ce_weight", float),
        "align_weight": ("align_weight", float),
        "proto_weight": ("proto_weight", float),
        "balance": ("balance", float),
        "scale": ("scale", float),
        "temperature": ("temperature", float),
    },
    "federation": {
        "method": ("method", str),
        "rounds": ("rounds", int),
        "epochs": ("epochs", int),
        "batch_size": ("batch_size", int),
        "learning_rate": ("learning_rate", float),
        "fraction": ("fraction", float),
        "clusters_per_class": ("clusters_per_class", int),
        "aggregation": ("aggregation", str),
        "prox_rho": ("prox_rho", float),
        "fedproto_weight": ("fedproto_weight", float),
        "workers": ("workers", int),
        "per_batch_protos": ("per_batch_protos", _bool),
        "hubs": ("hubs", int),
    },
    "run": {
        "seed": ("seed", int),
        "out": ("out", str),
        "checkpoints": ("checkpoints", _bool),
    },
}


def build_dataset(cfg: ExperimentConfig):
    """The dataset named by the config: one Dataset, or a pair for the
    distinct-domain case (the second blob domain is an independent draw)."""
    if cfg.data_kind == "blobs":
        first = synth_blobs(
            cfg.classes, cfg.per_class, cfg.dim, cfg.spread, cfg.data_seed,
            domain_tag="a" if cfg.domains == 2 else None,
        )
        if cfg.domains == 1:
            return first
        second = synth_blobs(
            cfg.classes, cfg.per_class, cfg.dim, cfg.spread, cfg.data_seed + 1,
            domain_tag="b",
        )
        return first, second
    first = load_idx(cfg.images, cfg.labels)
    if cfg.images2:
        return first, load_idx(cfg.images2, cfg.labels2)
    return first


def _build_arch(cfg: ExperimentConfig, dataset: Dataset) -> Arch:
    input_dim = dataset.features.shape[1]
    return Arch(
        kind=cfg.model_kind,
        input_dim=input_dim,
        embedding_dim=cfg.embedding_dim,
        num_classes=dataset.num_classes,
        hidden=cfg.hidden,
        image_shape=dataset.image_shape if cfg.model_kind == "cnn" else None,
    )


def rounds_csv(records: Sequence[RoundRecord]) -> str:
    """Deterministic CSV of the round log. Participant ids are space
    separated inside their field; floats use repr so the text round-trips
    bit for bit. Wall time is deliberately not included."""
    lines = [CSV_HEADER]
    for r in records:
        sel = " ".join(str(c) for c in r.selected)
        lines.append(
            ",".join(
                [
                    str(r.round_idx),
                    sel,
                    repr(r.ce),
                    repr(r.distill),
                    repr(r.align),
                    repr(r.proto),
                    repr(r.acc),
                    repr(r.rmse),
                    repr(r.mae),
                    repr(r.macro_f1),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def _write_checkpoint(out: Path, server, round_idx: int) -> None:
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    blob = snapshot(server.model, round_idx).to_bytes()
    (ck / f"round_{round_idx:03d}.model").write_bytes(blob)
    table = {
        str(c): [float(v) for v in np.asarray(vec, dtype=np.float64)]
        for c, vec in server.protos.as_arrays().items()
    }
    (ck / f"round_{round_idx:03d}.protos.json").write_text(
        json.dumps(table, sort_keys=True)
    )


def run_experiment(cfg: ExperimentConfig) -> tuple[dict, list[RoundRecord]]:
    """Full pipeline: data, partition, training rounds, artifacts on disk."""
    t_start = time.perf_counter()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    source = build_dataset(cfg)
    dataset, plan = partition_dirichlet(
        source, cfg.clients, cfg.alpha, cfg.test_fraction, cfg.partition_seed
    )
    (out / "partition.json").write_text(plan.to_json())

    arch = _build_arch(cfg, dataset)
    fedcfg = cfg.fed_config()
    server, clients = init_federation(arch, plan, cfg.seed)
    topology = Topology.round_robin(list(clients), cfg.hubs)

    records: list[RoundRecord] = []
    for _ in range(fedcfg.rounds):
        server, rec = run_round(server, clients, dataset, fedcfg, topology)
        records.append(rec)
        if cfg.checkpoints:
            _write_checkpoint(out, server, rec.round_idx)

    (out / "rounds.csv").write_text(rounds_csv(records))

    accs = [r.acc for r in records]
    summary = {
        "dataset": dataset.name,
        "method": cfg.method,
        "clients": cfg.clients,
        "rounds": len(records),
        "average_accuracy": average_accuracy(accs),
        "final_accuracy": records[-1].acc,
        "best_accuracy": max(accs),
        "final_macro_f1": records[-1].macro_f1,
        "wall_time_seconds": time.perf_counter() - t_start,
        "round_wall_times": [r.wall_time for r in records],
        "traffic": {
            "down_bytes_per_hub": list(topology.bytes_down),
            "up_bytes_per_hub": list(topology.bytes_up),
            "total_down_bytes": topology.total_down,
            "total_up_bytes": topology.total_up,
        },
        "config": dataclasses.asdict(cfg),
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2))
    return summary, records


def compare_clusterers(cfg: ExperimentConfig) -> dict:
    """Run the hierarchical and kmeans prototype variants side by side.

    Both runs share every seed; only the within-class clusterer differs.
    Writes clusterer_compare.csv with one accuracy series per variant.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    series = {}
    summaries = {}
    for variant in ("mp-fedkd", "mp-fedkd-kmeans"):
        sub = cfg.override(method=variant, out=str(out / variant))
        summary, records = run_experiment(sub)
        series[variant] = [r.acc for r in records]
        summaries[variant] = summary
    lines = ["round,acc_mp_fedkd,acc_mp_fedkd_kmeans"]
    for i, (a, b) in enumerate(zip(series["mp-fedkd"], series["mp-fedkd-kmeans"]), start=1):
        lines.append(f"{i},{repr(a)},{repr(b)}")
    (out / "clusterer_compare.csv").write_text("\n".join(lines) + "\n")
    return {
        "mp-fedkd": summaries["mp-fedkd"]["average_accuracy"],
        "mp-fedkd-kmeans": summaries["mp-fedkd-kmeans"]["average_accuracy"],
        "out": str(out / "clusterer_compare.csv"),
    }


def partition_audit(cfg: ExperimentConfig) -> dict:
    """Materialize the partition alone and report class balance numbers."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    source = build_dataset(cfg)
    dataset, plan = partition_dirichlet(
        source, cfg.clients, cfg.alpha, cfg.test_fraction, cfg.partition_seed
    )
    (out / "partition.json").write_text(plan.to_json())

    C = dataset.num_classes
    header = "client,train,test," + ",".join(f"class_{c}" for c in range(C))
    lines = [header]
    for s in plan.shards:
        counts = ",".join(str(int(v)) for v in s.histogram)
        lines.append(f"{s.client_id},{s.train.size},{s.test.size},{counts}")
    (out / "partition_audit.csv").write_text("\n".join(lines) + "\n")

    hist = np.stack([s.histogram for s in plan.shards])  # clients x classes
    class_totals = hist.sum(axis=0)
    shares = hist / np.maximum(class_totals, 1)
    return {
        "clients": cfg.clients,
        "alpha": cfg.alpha,
        "kind": plan.kind,
        "max_class_share": float(shares.max()),
        "out": str(out / "partition_audit.csv"),
    }
