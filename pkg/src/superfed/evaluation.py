"""Accuracy, calibration, lambda sweeps along the client subspace and loss-plane probes."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from superfed.data import LabeledDataset
from superfed.mixing import LambdaAssignment, mix
from superfed.nn import WeightVector, cross_entropy, forward, softmax

__all__ = [
    "DEFAULT_GRID",
    "CalibrationBins",
    "LambdaSweep",
    "BestAverage",
    "PlaneGrid",
    "EvalReport",
    "lambda_grid",
    "top_k_accuracy",
    "calibration_errors",
    "evaluate_model",
    "lambda_sweep",
    "best_average",
    "plane_basis",
    "plane_weights",
    "plane_probe",
    "regularized_loss",
    "global_metrics",
    "evaluate_clients",
]


def lambda_grid(step: float = 0.1) -> np.ndarray:
    """Inclusive grid ``0, step, ..., 1``; ``step`` must divide 1."""
    n = round(1.0 / step)
    if n < 1 or not math.isclose(n * step, 1.0, rel_tol=1e-9):
        raise ValueError(f"grid step {step} does not divide [0, 1]")
    return np.round(np.linspace(0.0, 1.0, n + 1), 12)


DEFAULT_GRID = lambda_grid(0.1)


def top_k_accuracy(logits: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    """Fraction of rows whose label ranks within the top ``k`` logits.

    Equal logits rank the lower class id first.
    """
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if not 1 <= k <= c:
        raise ValueError(f"k={k} outside [1, {c}]")
    if n == 0:
        return float("nan")
    true = logits[np.arange(n), y][:, None]
    ids = np.arange(c)[None, :]
    ahead = (logits > true) | ((logits == true) & (ids < y[:, None]))
    rank = ahead.sum(axis=1)
    return float(np.mean(rank < k))


@dataclass
class CalibrationBins:
    """Equal-width confidence bins over (0, 1]; bin ``b`` is ``(b/M, (b+1)/M]``."""

    edges: np.ndarray
    count: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def bin_count(self) -> int:
        return len(self.count)


def calibration_errors(
    confidences, correct, bins: int = 10
) -> tuple[float, float, CalibrationBins]:
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("calibration error is undefined for an empty sample")
    if bins < 1:
        raise ValueError("need at least one bin")
    if conf.shape != hit.shape:
        raise ValueError("confidences and correctness flags differ in length")
    if (conf <= 0.0).any() or (conf > 1.0).any():
        raise ValueError("confidences must lie in (0, 1]")

    which = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    count = np.bincount(which, minlength=bins)
    conf_sum = np.bincount(which, weights=conf, minlength=bins)
    hit_sum = np.bincount(which, weights=hit, minlength=bins)
    nonempty = count > 0
    mean_conf = np.where(nonempty, conf_sum / np.maximum(count, 1), np.nan)
    mean_acc = np.where(nonempty, hit_sum / np.maximum(count, 1), np.nan)

    gaps = np.abs(mean_acc[nonempty] - mean_conf[nonempty])
    ece = float(np.sum(count[nonempty] / conf.size * gaps))
    mce = float(gaps.max())
    table = CalibrationBins(np.linspace(0.0, 1.0, bins + 1), count, mean_conf, mean_acc)
    return ece, mce, table


def evaluate_model(w: WeightVector, ds: LabeledDataset) -> tuple[np.ndarray, float, float]:
    """Logits, top-1 accuracy and mean cross-entropy of ``w`` on ``ds``."""
    logits, _ = forward(w, ds.features)
    return logits, top_k_accuracy(logits, ds.labels, 1), cross_entropy(logits, ds.labels)


# ---------------------------------------------------------------- lambda sweep


def _row_stat(fn, a: np.ndarray) -> np.ndarray:
    # grid rows with no local models at all are legitimately all-NaN
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fn(a, axis=1)


@dataclass
class LambdaSweep:
    """Per-grid-point, per-client test accuracy and loss.

    ``top1[j, i]`` is client ``client_ids[i]`` at ``grid[j]``. Clients without
    a local model carry NaN everywhere except the ``lambda = 0`` row and are
    listed in ``missing_local``.
    """

    grid: np.ndarray
    client_ids: list[int]
    top1: np.ndarray
    loss: np.ndarray
    missing_local: list[int] = field(default_factory=list)

    @property
    def mean_top1(self) -> np.ndarray:
        return _row_stat(np.nanmean, self.top1)

    @property
    def std_top1(self) -> np.ndarray:
        return _row_stat(np.nanstd, self.top1)

    @property
    def mean_loss(self) -> np.ndarray:
        return _row_stat(np.nanmean, self.loss)

    def rows(self):
        for i, cid in enumerate(self.client_ids):
            for j, lam in enumerate(self.grid):
                if not np.isnan(self.top1[j, i]):
                    yield cid, float(lam), float(self.top1[j, i]), float(self.loss[j, i])


def lambda_sweep(clients, w_g: WeightVector, grid: Sequence[float] | None = None) -> LambdaSweep:
    """Evaluate ``mix(w_g, w_l_i, lam)`` on each client's test split for every grid point."""
    grid = DEFAULT_GRID if grid is None else np.asarray(grid, dtype=np.float64)
    ids = [c.id for c in clients]
    top1 = np.full((len(grid), len(ids)), np.nan)
    loss = np.full_like(top1, np.nan)
    missing = []
    for i, c in enumerate(clients):
        test = c.split.test
        for j, lam in enumerate(grid):
            if c.local_model is None:
                if lam != 0.0:
                    continue
                w = w_g
            else:
                w = mix(w_g, c.local_model, LambdaAssignment.model(float(lam)))
            _, top1[j, i], loss[j, i] = evaluate_model(w, test)
        if c.local_model is None:
            missing.append(c.id)
    return LambdaSweep(np.asarray(grid), ids, top1, loss, missing)


@dataclass
class BestAverage:
    lam: float
    accuracy: float
    std: float
    per_client_lams: dict[int, float]
    per_client_accuracy: float
    per_client_std: float


def best_average(sweep: LambdaSweep) -> BestAverage:
    """Shared lambda maximizing the cross-client mean top-1 (ties: lowest lambda).

    Also reports the variant where every client keeps its own best lambda.
    """
    if sweep.top1.size == 0:
        raise ValueError("empty sweep")
    means = sweep.mean_top1
    j = int(np.nanargmax(means))
    filled = np.where(np.isnan(sweep.top1), -np.inf, sweep.top1)
    own = filled.argmax(axis=0)
    own_acc = filled[own, np.arange(len(sweep.client_ids))]
    return BestAverage(
        lam=float(sweep.grid[j]),
        accuracy=float(means[j]),
        std=float(sweep.std_top1[j]),
        per_client_lams={cid: float(sweep.grid[k]) for cid, k in zip(sweep.client_ids, own)},
        per_client_accuracy=float(own_acc.mean()),
        per_client_std=float(own_acc.std()),
    )


# ---------------------------------------------------------------- loss plane


@dataclass
class PlaneGrid:
    anchors: tuple[WeightVector, WeightVector, WeightVector]
    u: WeightVector
    v: WeightVector
    anchor_coords: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    loss: np.ndarray

    def rows(self):
        for iy, y in enumerate(self.ys):
            for ix, x in enumerate(self.xs):
                yield float(x), float(y), float(self.loss[iy, ix])


def plane_basis(a1: WeightVector, a2: WeightVector, a3: WeightVector, tol: float = 1e-10):
    """Orthonormal ``(u, v)`` spanning the anchors' plane, plus the anchors' 2-D coordinates."""
    d2, d3 = a2 - a1, a3 - a1
    n2 = d2.norm()
    if n2 <= tol:
        raise ValueError("first two anchors coincide")
    u = d2 * (1.0 / n2)
    along = d3.dot(u)
    ortho = d3 - u * along
    n3 = ortho.norm()
    if n3 <= tol * max(1.0, d3.norm()):
        raise ValueError("anchors are collinear; the plane is degenerate")
    v = ortho * (1.0 / n3)
    coords = np.array([[0.0, 0.0], [n2, 0.0], [along, n3]])
    return u, v, coords


def plane_weights(a1: WeightVector, u: WeightVector, v: WeightVector, x: float, y: float) -> WeightVector:
    return a1 + u * x + v * y


def regularized_loss(w: WeightVector, ds: LabeledDataset, l2: float = 0.0) -> float:
    """Cross-entropy plus ``l2 / 2 * ||w||^2`` (the penalty whose gradient SGD decay applies)."""
    logits, _ = forward(w, ds.features)
    return cross_entropy(logits, ds.labels) + 0.5 * l2 * w.dot(w)


def plane_probe(
    anchors: Sequence[WeightVector],
    ds: LabeledDataset,
    resolution: int = 11,
    margin: float = 0.2,
    l2: float = 0.0,
) -> PlaneGrid:
    """Loss on a regular grid over the plane through three anchors.

    The grid covers the anchors' bounding box padded by ``margin`` times its
    extent on every side.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    a1, a2, a3 = anchors
    u, v, coords = plane_basis(a1, a2, a3)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    pad = margin * (hi - lo)
    xs = np.linspace(lo[0] - pad[0], hi[0] + pad[0], resolution)
    ys = np.linspace(lo[1] - pad[1], hi[1] + pad[1], resolution)
    loss = np.empty((resolution, resolution))
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            loss[iy, ix] = regularized_loss(plane_weights(a1, u, v, x, y), ds, l2)
    return PlaneGrid((a1, a2, a3), u, v, coords, xs, ys, loss)


# ---------------------------------------------------------------- reports


def global_metrics(w_g: WeightVector, clients) -> dict[str, float]:
    """Mean top-1 and loss of the global model across every client's test split."""
    scores = [evaluate_model(w_g, c.split.test)[1:] for c in clients]
    acc, loss = np.array(scores).T
    return {"global_top1": float(acc.mean()), "global_loss": float(loss.mean())}


@dataclass
class EvalReport:
    sweep: LambdaSweep
    best: BestAverage
    headline_lambda: float
    top1: float
    top1_std: float
    top5: float
    ece: float
    ece_std: float
    mce: float
    mce_std: float
    per_client: dict[int, dict[str, float]]

    def summary(self) -> dict:
        return {
            "headline_lambda": self.headline_lambda,
            "top1": self.top1,
            "top1_std": self.top1_std,
            "top5": self.top5,
            "ece": self.ece,
            "ece_std": self.ece_std,
            "mce": self.mce,
            "mce_std": self.mce_std,
            "best_average": {
                "lambda": self.best.lam,
                "top1": self.best.accuracy,
                "std": self.best.std,
            },
            "per_client_best": {
                "top1": self.best.per_client_accuracy,
                "std": self.best.per_client_std,
            },
            "grid_mean_top1": [float(a) for a in self.sweep.mean_top1],
            "grid_std_of_mean_top1": float(np.std(self.sweep.mean_top1)),
            "clients_without_local_model": list(self.sweep.missing_local),
        }


def evaluate_clients(
    clients,
    w_g: WeightVector,
    grid: Sequence[float] | None = None,
    bins: int = 10,
    personalized: bool = True,
) -> EvalReport:
    """Final all-client evaluation.

    The headline model is ``mix(w_g, w_l, lam*)`` with the best shared
    ``lam*`` of the sweep; for runs that never personalized (the FedAvg and
    FedProx reductions) it is the global model itself.
    """
    sweep = lambda_sweep(clients, w_g, grid)
    best = best_average(sweep)
    lam = best.lam if personalized else 0.0
    k = min(5, w_g.spec.class_count)

    per_client = {}
    for c in clients:
        w = w_g if c.local_model is None else mix(w_g, c.local_model, LambdaAssignment.model(lam))
        logits, _ = forward(w, c.split.test.features)
        labels = c.split.test.labels
        probs = softmax(logits)
        conf = probs.max(axis=1)
        correct = probs.argmax(axis=1) == labels
        ece, mce, _ = calibration_errors(conf, correct, bins)
        per_client[c.id] = {
            "top1": top_k_accuracy(logits, labels, 1),
            "top5": top_k_accuracy(logits, labels, k),
            "ece": ece,
            "mce": mce,
        }

    def stat(key, fn):
        return float(fn([m[key] for m in per_client.values()]))

    return EvalReport(
        sweep=sweep,
        best=best,
        headline_lambda=lam,
        top1=stat("top1", np.mean),
        top1_std=stat("top1", np.std),
        top5=stat("top5", np.mean),
        ece=stat("ece", np.mean),
        ece_std=stat("ece", np.std),
        mce=stat("mce", np.mean),
        mce_std=stat("mce", np.std),
        per_client=per_client,
    )
