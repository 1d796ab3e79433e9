"""Run orchestration: data setup, federation, evaluation and persistence."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from superfed import persist as io
from superfed.config import RunConfig, parse_noise, parse_partition
from superfed.data import (
    ClientSplit,
    LabeledDataset,
    apply_noise,
    build_transition,
    gen_blobs,
    load_idx,
    partition_dirichlet,
    partition_pathological,
    split_train_test,
)
from superfed.evaluation import PlaneGrid, lambda_grid, plane_probe
from superfed.federation import ClientState, FedConfig, RoundRecord, RunResult, run
from superfed.nn import NetworkSpec, init_weights
from superfed.rng import stream

log = logging.getLogger(__name__)

__all__ = [
    "OUT_ROOT_ENV",
    "Setup",
    "Simulation",
    "fed_config",
    "build_dataset",
    "build_clients",
    "simulate",
    "summarize",
    "output_dir",
    "execute",
]

OUT_ROOT_ENV = "SUPERFED_OUT_ROOT"


def fed_config(cfg: RunConfig, workers: int = 1) -> FedConfig:
    return FedConfig(
        rounds=cfg.rounds,
        personalization_start=cfg.personalization_start,
        batch_size=cfg.batch_size,
        local_epochs=cfg.local_epochs,
        clients=cfg.clients,
        fraction=cfg.fraction,
        lr=cfg.lr,
        mu=cfg.mu,
        nu=cfg.nu,
        scheme=cfg.scheme,
        seed=cfg.seed,
        local_init=cfg.local_init,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        cos_per_layer=cfg.cos_per_layer,
        workers=workers,
    )


def build_dataset(cfg: RunConfig) -> LabeledDataset:
    d = cfg.dataset
    if d.kind == "blobs":
        ds = gen_blobs(d.class_count, d.dims, d.per_class, d.spread,
                       stream(cfg.seed, "dataset"), center_scale=d.center_scale)
    else:
        ds = load_idx(d.images, d.labels, class_count=d.class_count)
    if d.limit is not None and d.limit < len(ds):
        keep = np.sort(stream(cfg.seed, "dataset_limit").permutation(len(ds))[: d.limit])
        ds = ds.subset(keep)
    return ds


@dataclass
class Setup:
    dataset: LabeledDataset
    clients: list[ClientState]
    dropped: int
    noise: dict = field(default_factory=dict)


def _test_checksum(clients) -> str:
    h = hashlib.sha256()
    for c in clients:
        h.update(np.ascontiguousarray(c.split.test.labels).tobytes())
    return h.hexdigest()


def build_clients(cfg: RunConfig, ds: LabeledDataset | None = None) -> Setup:
    """Partition, split each client 80/20 (by default) and corrupt training labels."""
    ds = build_dataset(cfg) if ds is None else ds
    scheme, alpha = parse_partition(cfg.partition)
    part_rng = stream(cfg.seed, "partition")
    if scheme == "pathological":
        part = partition_pathological(ds, cfg.clients, part_rng, cfg.shards_per_client)
    else:
        part = partition_dirichlet(ds, cfg.clients, alpha, part_rng)

    splits = [
        split_train_test(ds, idx, stream(cfg.seed, "split", i), cfg.test_fraction, client_id=i)
        for i, idx in enumerate(part)
    ]
    kind, eps = parse_noise(cfg.noise)
    before = _test_checksum([ClientState(s.client_id, s) for s in splits])
    flipped = total = 0
    if kind != "none":
        t = build_transition(kind, eps, ds.class_count)
        noisy_splits = []
        for s in splits:
            noisy = apply_noise(s.train.labels, t, stream(cfg.seed, "noise", s.client_id))
            flipped += int(np.sum(noisy != s.train.labels))
            total += len(noisy)
            noisy_splits.append(ClientSplit(s.client_id, s.train.with_labels(noisy), s.test,
                                            s.train_indices, s.test_indices))
        splits = noisy_splits
    clients = [ClientState(s.client_id, s) for s in splits]
    after = _test_checksum(clients)
    if before != after:
        raise RuntimeError("label noise touched a test split")
    noise = {
        "kind": kind,
        "epsilon": eps,
        "flipped": flipped,
        "train_labels": total,
        "empirical_flip_rate": flipped / total if total else 0.0,
        "test_label_checksum": after,
    }
    return Setup(ds, clients, int(part.dropped.size), noise)


@dataclass
class Simulation:
    cfg: RunConfig
    setup: Setup
    spec: NetworkSpec
    result: RunResult
    plane: PlaneGrid | None


def _plane(cfg: RunConfig, result: RunResult, clients) -> PlaneGrid | None:
    if cfg.plane_resolution == 0:
        return None
    local = [c.local_model for c in clients if c.local_model is not None][:2]
    if len(local) < 2:
        return None
    pooled = LabeledDataset(
        np.concatenate([c.split.test.features for c in clients]),
        np.concatenate([c.split.test.labels for c in clients]),
        clients[0].split.test.class_count,
    )
    anchors = (result.server.global_model, local[0], local[1])
    try:
        return plane_probe(anchors, pooled, cfg.plane_resolution, cfg.plane_margin,
                           l2=cfg.weight_decay)
    except ValueError as exc:
        log.warning("skipping loss plane: %s", exc)
        return None


def simulate(cfg: RunConfig, workers: int = 1, on_round=None) -> Simulation:
    setup = build_clients(cfg)
    spec = NetworkSpec((setup.dataset.dims, *cfg.hidden, setup.dataset.class_count))
    initial = init_weights(spec, stream(cfg.seed, "global_init"))
    result = run(
        fed_config(cfg, workers),
        setup.clients,
        initial,
        eval_every=cfg.eval_every,
        lambda_grid=lambda_grid(cfg.lambda_step),
        bins=cfg.calibration_bins,
        on_round=on_round,
    )
    plane = _plane(cfg, result, setup.clients)
    return Simulation(cfg, setup, spec, result, plane)


def summarize(sim: Simulation) -> dict:
    cfg = sim.cfg
    comm = sim.result.comm
    return {
        "config_hash": cfg.hash,
        "config": cfg.to_dict(),
        "status": "ok",
        "rounds_completed": sim.result.server.round,
        "network": list(sim.spec.layer_dims),
        "reductions": {
            "fedavg": cfg.mu == 0.0 and cfg.nu == 0.0 and cfg.personalization_start >= cfg.rounds,
            "fedprox": cfg.mu > 0.0 and cfg.nu == 0.0 and cfg.personalization_start >= cfg.rounds,
            "mu": cfg.mu,
            "nu": cfg.nu,
            "lambda_always_zero": cfg.personalization_start >= cfg.rounds,
        },
        "partition": {"scheme": cfg.partition, "dropped": sim.setup.dropped},
        "noise": sim.setup.noise,
        "communication": {
            "bytes_down": int(sum(comm.down)),
            "bytes_up": int(sum(comm.up)),
            "model_bytes": sim.result.server.global_model.nbytes,
        },
        "final": sim.result.report.summary(),
    }


def output_dir(cfg: RunConfig) -> Path:
    if cfg.out:
        return Path(cfg.out)
    return Path(os.environ.get(OUT_ROOT_ENV, "runs")) / cfg.hash


def execute(cfg: RunConfig, workers: int = 1) -> int:
    """Run ``cfg`` end to end and write its artifacts; returns a process exit status."""
    out = output_dir(cfg)
    records: list[RoundRecord] = []
    try:
        sim = simulate(cfg, workers, on_round=lambda rec, _server: records.append(rec))
    except Exception as exc:  # noqa: BLE001 - any failure must still flush partial output
        log.error("run failed: %s", exc)
        summary = {
            "config_hash": cfg.hash,
            "config": cfg.to_dict(),
            "status": "failed",
            "error": f"{type(exc).__name__}: {exc}",
            "rounds_completed": len(records),
        }
        try:
            io.persist(out, cfg.hash, records, summary)
        except OSError as io_exc:
            log.error("%s", io_exc)
        return 1

    models = {"global": sim.result.server.global_model}
    for c in sim.setup.clients:
        if c.local_model is not None:
            models[f"local/{c.id}"] = c.local_model
    try:
        paths = io.persist(out, cfg.hash, records, summarize(sim), sim.result.report.sweep,
                           sim.plane, models)
    except OSError as exc:
        log.error("%s", exc)
        return 2
    for rec in records:
        log.debug("round %d wall time %.3fs", rec.round, rec.wall_time)
    log.info("wrote %s", ", ".join(str(p) for p in paths))
    return 0
