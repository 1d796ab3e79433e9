"""Output files of a run: CSV time series and grids, JSON summary, binary checkpoint.

Checkpoint layout (all integers unsigned 32-bit little-endian)::

    magic            8 bytes  b"SPFDCKPT"
    version          u32      1
    config hash      16 bytes ASCII hex
    n_dims           u32
    dims             n_dims x u32     network layer widths
    n_models         u32
    per model:
        name_len     u32
        name         name_len bytes UTF-8
        values       float64 little-endian, flattened parameter order
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from superfed.errors import CheckpointError
from superfed.evaluation import LambdaSweep, PlaneGrid
from superfed.federation import RoundRecord
from superfed.nn import NetworkSpec, WeightVector

__all__ = [
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "ROUND_METRICS",
    "write_rounds",
    "write_sweep",
    "write_plane",
    "write_summary",
    "save_checkpoint",
    "load_checkpoint",
    "persist",
]

CHECKPOINT_MAGIC = b"SPFDCKPT"
CHECKPOINT_VERSION = 1
ROUND_METRICS = ("global_top1", "global_loss")


def _fmt(x) -> str:
    # repr round-trips doubles exactly, which keeps reruns byte-identical
    return "" if x is None else repr(float(x))


def _open_csv(path: Path):
    try:
        return open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def write_rounds(path: Path, records: Sequence[RoundRecord], config_hash: str) -> Path:
    with _open_csv(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_hash", "round", "mean_train_loss", "selected_ids", *ROUND_METRICS])
        for rec in records:
            w.writerow([
                config_hash,
                rec.round,
                _fmt(rec.mean_train_loss),
                " ".join(str(i) for i in rec.selected),
                *(_fmt(rec.metrics.get(k)) for k in ROUND_METRICS),
            ])
    return path


def write_sweep(path: Path, sweep: LambdaSweep, config_hash: str) -> Path:
    with _open_csv(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_hash", "client_id", "lambda", "top1", "loss"])
        for cid, lam, top1, loss in sweep.rows():
            w.writerow([config_hash, cid, _fmt(lam), _fmt(top1), _fmt(loss)])
    return path


def write_plane(path: Path, plane: PlaneGrid, config_hash: str) -> Path:
    with _open_csv(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_hash", "x", "y", "loss"])
        for x, y, loss in plane.rows():
            w.writerow([config_hash, _fmt(x), _fmt(y), _fmt(loss)])
    return path


def write_summary(path: Path, summary: Mapping) -> Path:
    try:
        path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def save_checkpoint(path: Path, models: Mapping[str, WeightVector], config_hash: str) -> Path:
    specs = {w.spec for w in models.values()}
    if len(specs) != 1:
        raise CheckpointError("all models in one checkpoint must share a network layout")
    (spec,) = specs
    digest = config_hash.encode("ascii")
    if len(digest) != 16:
        raise CheckpointError("config hash must be 16 ASCII characters")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        digest,
        struct.pack("<I", len(spec.layer_dims)),
        struct.pack(f"<{len(spec.layer_dims)}I", *spec.layer_dims),
        struct.pack("<I", len(models)),
    ]
    for name, w in models.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, w.flatten().astype("<f8").tobytes()]
    try:
        Path(path).write_bytes(b"".join(parts))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return Path(path)


def load_checkpoint(path) -> tuple[str, dict[str, WeightVector]]:
    """Return ``(config_hash, {name: model})`` from a checkpoint file."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}, needed {n} more")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    magic = take(8)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
        )
    digest = take(16).decode("ascii")
    (n_dims,) = struct.unpack("<I", take(4))
    dims = struct.unpack(f"<{n_dims}I", take(4 * n_dims))
    spec = NetworkSpec(dims)
    (n_models,) = struct.unpack("<I", take(4))
    models = {}
    for _ in range(n_models):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        flat = np.frombuffer(take(8 * spec.size), dtype="<f8").astype(np.float64)
        models[name] = WeightVector.from_flat(spec, flat)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return digest, models


def persist(
    outdir,
    config_hash: str,
    records: Sequence[RoundRecord],
    summary: Mapping,
    sweep: LambdaSweep | None = None,
    plane: PlaneGrid | None = None,
    models: Mapping[str, WeightVector] | None = None,
) -> list[Path]:
    """Write every available artifact into ``outdir``; returns the paths written."""
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
    written = [write_rounds(out / "rounds.csv", records, config_hash)]
    if sweep is not None:
        written.append(write_sweep(out / "lambda_sweep.csv", sweep, config_hash))
    if plane is not None:
        written.append(write_plane(out / "plane.csv", plane, config_hash))
    if models:
        written.append(save_checkpoint(out / "models.ckpt", models, config_hash))
    written.append(write_summary(out / "summary.json", summary))
    return written
