"""Run configuration: JSON documents, presets and flag overrides.

:func:`parse_config` is the only sanctioned way to build a :class:`RunConfig`;
it validates everything before returning. Unknown keys and invariant
violations raise :class:`~superfed.errors.ConfigError` carrying the
dotted path of the offending field.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from superfed.errors import ConfigError

__all__ = [
    "DatasetConfig",
    "RunConfig",
    "PRESETS",
    "parse_config",
    "parse_partition",
    "parse_noise",
    "config_hash",
]

PERSONALIZATION_FRACTION = 0.4


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"
    class_count: int = 10
    dims: int = 20
    per_class: int = 300
    spread: float = 2.0
    center_scale: float = 1.0
    images: str | None = None
    labels: str | None = None
    limit: int | None = None


@dataclass(frozen=True)
class RunConfig:
    rounds: int = 50
    personalization_start: int | None = None
    batch_size: int = 10
    local_epochs: int = 5
    clients: int = 50
    fraction: float = 0.1
    lr: float = 0.01
    mu: float = 0.01
    nu: float = 2.0
    scheme: str = "mm"
    seed: int = 0
    local_init: str = "fresh"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    cos_per_layer: bool = False
    hidden: tuple[int, ...] = (64, 64)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: str = "pathological"
    shards_per_client: int = 2
    noise: str = "none"
    test_fraction: float = 0.2
    eval_every: int = 0
    lambda_step: float = 0.1
    calibration_bins: int = 10
    plane_resolution: int = 11
    plane_margin: float = 0.2
    preset: str | None = None
    out: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @property
    def hash(self) -> str:
        return config_hash(self)


# key -> accepted python types; bool is rejected wherever int is expected
_RUN_TYPES: dict[str, tuple] = {
    "rounds": (int,), "personalization_start": (int, str, type(None)), "batch_size": (int,),
    "local_epochs": (int,), "clients": (int,), "fraction": (int, float), "lr": (int, float),
    "mu": (int, float), "nu": (int, float), "scheme": (str,), "seed": (int,),
    "local_init": (str,), "momentum": (int, float), "weight_decay": (int, float),
    "cos_per_layer": (bool,), "hidden": (list, tuple), "dataset": (dict,),
    "partition": (str,), "shards_per_client": (int,), "noise": (str,),
    "test_fraction": (int, float), "eval_every": (int,), "lambda_step": (int, float),
    "calibration_bins": (int,), "plane_resolution": (int,), "plane_margin": (int, float),
    "preset": (str, type(None)), "out": (str, type(None)),
}
_DATASET_TYPES: dict[str, tuple] = {
    "kind": (str,), "class_count": (int,), "dims": (int,), "per_class": (int,),
    "spread": (int, float), "center_scale": (int, float), "images": (str, type(None)),
    "labels": (str, type(None)), "limit": (int, type(None)),
}

_MNIST = {"kind": "idx", "images": "train-images-idx3-ubyte", "labels": "train-labels-idx1-ubyte",
          "class_count": 10}

PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    "fedavg-reduction": {"mu": 0.0, "nu": 0.0, "personalization_start": "never"},
    "fedprox-reduction": {"mu": 0.01, "nu": 0.0, "personalization_start": "never"},
    "superfed-lm": {"scheme": "lm"},
    "noise-pair-0.1": {"noise": "pair:0.1"},
    "noise-pair-0.4": {"noise": "pair:0.4"},
    "noise-symmetric-0.2": {"noise": "symmetric:0.2"},
    "noise-symmetric-0.6": {"noise": "symmetric:0.6"},
    "mnist-pathological": {
        "rounds": 500, "local_epochs": 10, "batch_size": 10, "clients": 50, "fraction": 0.1,
        "lr": 0.01, "hidden": [200, 200], "partition": "pathological", "dataset": _MNIST,
    },
    "mnist-label-noise": {
        "rounds": 500, "local_epochs": 10, "batch_size": 10, "clients": 100, "fraction": 0.05,
        "lr": 0.01, "hidden": [200, 200], "partition": "dirichlet:10",
        "noise": "symmetric:0.6", "dataset": _MNIST,
    },
}


def parse_partition(spec: str) -> tuple[str, float | None]:
    """``"pathological"`` or ``"dirichlet:<alpha>"``."""
    name, _, arg = spec.partition(":")
    if name == "pathological" and not arg:
        return name, None
    if name == "dirichlet":
        try:
            alpha = float(arg)
        except ValueError:
            raise ValueError(f"bad Dirichlet concentration {arg!r}") from None
        if not alpha > 0:
            raise ValueError("Dirichlet concentration must be positive")
        return name, alpha
    raise ValueError(f"unknown partition {spec!r}; use 'pathological' or 'dirichlet:<alpha>'")


def parse_noise(spec: str) -> tuple[str, float]:
    """``"none"``, ``"pair:<eps>"`` or ``"symmetric:<eps>"``."""
    name, _, arg = spec.partition(":")
    if name == "none" and not arg:
        return name, 0.0
    if name in ("pair", "symmetric"):
        try:
            eps = float(arg)
        except ValueError:
            raise ValueError(f"bad noise ratio {arg!r}") from None
        if not 0.0 <= eps < 1.0:
            raise ValueError("noise ratio must lie in [0, 1)")
        return name, eps
    raise ValueError(f"unknown noise {spec!r}; use none, pair:<eps> or symmetric:<eps>")


def _check_types(doc: Mapping[str, Any], types: Mapping[str, tuple], prefix: str) -> None:
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in types:
            raise ConfigError(path, "unknown key")
        allowed = types[key]
        if isinstance(value, bool) and bool not in allowed:
            raise ConfigError(path, f"expected {'/'.join(t.__name__ for t in allowed)}, got bool")
        if not isinstance(value, allowed):
            names = "/".join(t.__name__ for t in allowed)
            raise ConfigError(path, f"expected {names}, got {type(value).__name__}")


def _validate(cfg: RunConfig) -> None:
    def need(ok: bool, path: str, msg: str) -> None:
        if not ok:
            raise ConfigError(path, msg)

    need(cfg.rounds >= 0, "rounds", "must be >= 0")
    need(cfg.personalization_start is not None and 0 <= cfg.personalization_start <= cfg.rounds,
         "personalization_start", f"must satisfy 0 <= L <= R (R={cfg.rounds})")
    need(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    need(cfg.local_epochs >= 1, "local_epochs", "must be >= 1")
    need(cfg.clients >= 1, "clients", "must be >= 1")
    need(0.0 < cfg.fraction <= 1.0, "fraction", "must lie in (0, 1]")
    need(cfg.lr > 0.0, "lr", "must be positive")
    need(cfg.mu >= 0.0, "mu", "must be >= 0")
    need(cfg.nu >= 0.0, "nu", "must be >= 0")
    need(cfg.scheme in ("mm", "lm"), "scheme", "must be 'mm' or 'lm'")
    need(cfg.local_init in ("fresh", "copy"), "local_init", "must be 'fresh' or 'copy'")
    need(0.0 <= cfg.momentum < 1.0, "momentum", "must lie in [0, 1)")
    need(cfg.weight_decay >= 0.0, "weight_decay", "must be >= 0")
    need(len(cfg.hidden) >= 1 and all(isinstance(h, int) and not isinstance(h, bool) and h >= 1
                                      for h in cfg.hidden),
         "hidden", "must be a non-empty list of positive integers")
    need(cfg.shards_per_client >= 1, "shards_per_client", "must be >= 1")
    need(0.0 < cfg.test_fraction < 1.0, "test_fraction", "must lie in (0, 1)")
    need(cfg.eval_every >= 0, "eval_every", "must be >= 0")
    need(cfg.calibration_bins >= 1, "calibration_bins", "must be >= 1")
    need(cfg.plane_resolution == 0 or cfg.plane_resolution >= 2, "plane_resolution",
         "must be 0 (disabled) or >= 2")
    need(cfg.plane_margin >= 0.0, "plane_margin", "must be >= 0")
    need(cfg.preset is None or cfg.preset in PRESETS, "preset", f"unknown preset {cfg.preset!r}")
    for path, parser, value in (("partition", parse_partition, cfg.partition),
                                ("noise", parse_noise, cfg.noise)):
        try:
            parser(value)
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None
    n = round(1.0 / cfg.lambda_step) if cfg.lambda_step > 0 else 0
    need(n >= 1 and abs(n * cfg.lambda_step - 1.0) < 1e-9, "lambda_step", "must divide 1")

    ds = cfg.dataset
    need(ds.kind in ("blobs", "idx"), "dataset.kind", "must be 'blobs' or 'idx'")
    if ds.kind == "blobs":
        need(ds.class_count >= 2, "dataset.class_count", "must be >= 2")
        need(ds.dims >= 1, "dataset.dims", "must be >= 1")
        need(ds.per_class >= 1, "dataset.per_class", "must be >= 1")
        need(ds.spread >= 0.0, "dataset.spread", "must be >= 0")
    else:
        need(bool(ds.images), "dataset.images", "required for idx datasets")
        need(bool(ds.labels), "dataset.labels", "required for idx datasets")
        need(ds.class_count >= 2, "dataset.class_count", "must be >= 2")
    need(ds.limit is None or ds.limit >= 2, "dataset.limit", "must be >= 2")


def _merge(base: dict, update: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key == "dataset" and isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = {**out[key], **value}
        else:
            out[key] = copy.deepcopy(value)
    return out


def _resolve_personalization(doc: dict) -> None:
    rounds = doc.get("rounds", RunConfig.rounds)
    start = doc.get("personalization_start")
    if start is None:
        doc["personalization_start"] = int(PERSONALIZATION_FRACTION * rounds)
    elif start == "never":
        doc["personalization_start"] = rounds
    elif isinstance(start, str):
        raise ConfigError("personalization_start", "must be an integer, null or 'never'")


def parse_config(
    source: str | Path | Mapping[str, Any] | None = None,
    overrides: Mapping[str, Any] | None = None,
    preset: str | None = None,
) -> RunConfig:
    """Build a validated config from a JSON file or mapping, a preset and overrides.

    Precedence: overrides > document > preset > defaults. A ``preset`` key in
    the document is honoured when no explicit preset is passed.
    ``personalization_start`` defaults to ``floor(0.4 * rounds)``; the value
    ``"never"`` sets it to ``rounds``.
    """
    if source is None:
        doc: dict[str, Any] = {}
    elif isinstance(source, Mapping):
        doc = dict(source)
    else:
        try:
            doc = json.loads(Path(source).read_text())
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read {source}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON in {source}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config document must be a JSON object")

    overrides = dict(overrides or {})
    preset = preset or overrides.get("preset") or doc.get("preset")
    if preset is not None and preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}; known: {', '.join(PRESETS)}")

    for part, prefix in ((doc, ""), (overrides, "")):
        _check_types(part, _RUN_TYPES, prefix)
        if "dataset" in part:
            _check_types(part["dataset"], _DATASET_TYPES, "dataset.")

    merged = _merge(PRESETS.get(preset, {}) if preset else {}, doc)
    merged = _merge(merged, overrides)
    merged["preset"] = preset
    _resolve_personalization(merged)

    ds_doc = dict(merged.pop("dataset", {}))
    for key in ("spread", "center_scale"):
        if key in ds_doc:
            ds_doc[key] = float(ds_doc[key])
    dataset = DatasetConfig(**ds_doc)
    if "hidden" in merged:
        merged["hidden"] = tuple(merged["hidden"])
    for key in ("fraction", "lr", "mu", "nu", "momentum", "weight_decay", "test_fraction",
                "lambda_step", "plane_margin"):
        if key in merged:
            merged[key] = float(merged[key])
    cfg = RunConfig(dataset=dataset, **merged)
    _validate(cfg)
    return cfg


def config_hash(cfg: RunConfig) -> str:
    """Short digest of everything that influences numeric outputs (``out`` excluded)."""
    d = cfg.to_dict()
    d.pop("out", None)
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
