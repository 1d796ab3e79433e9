"""Acceptance criteria, one test each; run with ``pytest tests/test_acceptance.py -s``.

Every test prints a single ``[PASS]`` or ``[FAIL]`` line with the measured
quantities before asserting.
"""

import time
from functools import lru_cache

import numpy as np
import pytest

from superfed.config import parse_config
from superfed.data import (
    LabeledDataset,
    apply_noise,
    build_transition,
    gen_blobs,
    partition_dirichlet,
    partition_pathological,
)
from superfed.evaluation import calibration_errors, evaluate_model, lambda_sweep
from superfed.experiment import execute, simulate
from superfed.federation import ClientState, FedConfig, aggregate, run
from superfed.data import split_train_test
from superfed.mixing import (
    LambdaAssignment,
    RegularizerConfig,
    assemble_gradients,
    cos_sq_penalty,
    mix,
    prox_penalty,
)
from superfed.nn import NetworkSpec, WeightVector, cross_entropy, forward, init_weights, loss_and_grad

from oracles import central_diff, random_weights, reference_fedavg, rel_err

pytestmark = pytest.mark.slow


def verdict(number, title, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}")
    assert ok, detail


# ------------------------------------------------------------------ shared desk runs

DESK = {
    "rounds": 50,
    "personalization_start": 20,
    "local_epochs": 5,
    "batch_size": 10,
    "clients": 50,
    "fraction": 0.1,
    "mu": 0.01,
    "nu": 2.0,
    "scheme": "mm",
    "hidden": [64, 64],
    "partition": "pathological",
    "dataset": {"kind": "blobs", "class_count": 10, "dims": 20, "per_class": 300, "spread": 2.0},
    "plane_resolution": 0,
}

VARIANTS = {
    "superfed": {},
    "superfed-nu0": {"nu": 0.0},
    "fedavg": {"mu": 0.0, "nu": 0.0, "personalization_start": "never"},
}


def desk_config(variant, seed, noise="none"):
    return parse_config({**DESK, **VARIANTS[variant], "seed": seed, "noise": noise})


@lru_cache(maxsize=None)
def desk_run(variant, seed, noise="none"):
    return simulate(desk_config(variant, seed, noise))


# ------------------------------------------------------------------ 1


def test_criterion_1_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    spec = NetworkSpec((2, 8, 4))
    worst = {"cos": 0.0, "prox": 0.0, "objective": 0.0}
    for _ in range(100):
        f, l, g = (random_weights(spec, rng) for _ in range(3))
        lam = LambdaAssignment.model(float(rng.random()))
        cfg = RegularizerConfig(mu=float(rng.uniform(0, 1)), nu=float(rng.uniform(0, 3)))
        x = rng.normal(size=(6, 2))
        y = rng.integers(0, 4, 6)

        def as_w(v):
            return WeightVector.from_flat(spec, v)

        _, cf, cl = cos_sq_penalty(f, l)
        fd_cf = central_diff(lambda v: cos_sq_penalty(as_w(v), l)[0], f.flatten())
        fd_cl = central_diff(lambda v: cos_sq_penalty(f, as_w(v))[0], l.flatten())
        worst["cos"] = max(worst["cos"], rel_err(cf.flatten(), fd_cf), rel_err(cl.flatten(), fd_cl))

        _, pf = prox_penalty(f, g)
        fd_pf = central_diff(lambda v: prox_penalty(as_w(v), g)[0], f.flatten())
        worst["prox"] = max(worst["prox"], rel_err(pf.flatten(), fd_pf))

        def objective(vf, vl):
            wf, wl = as_w(vf), as_w(vl)
            logits, _ = forward(mix(wf, wl, lam), x)
            return (cross_entropy(logits, y) + cfg.mu * prox_penalty(wf, g)[0]
                    + cfg.nu * cos_sq_penalty(wf, wl)[0])

        w_mix = mix(f, l, lam)
        _, trace = forward(w_mix, x)
        _, task = loss_and_grad(w_mix, trace, y)
        gf, gl = assemble_gradients(task, lam, f, l, g, cfg)
        fd_f = central_diff(lambda v: objective(v, l.flatten()), f.flatten())
        fd_l = central_diff(lambda v: objective(f.flatten(), v), l.flatten())
        worst["objective"] = max(worst["objective"], rel_err(gf.flatten(), fd_f),
                                 rel_err(gl.flatten(), fd_l))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-5 and elapsed < 30
    verdict(1, "gradients vs central differences (2-8-4, 100 draws)", ok,
            ", ".join(f"{k} max rel err {v:.2e}" for k, v in worst.items()) + f", {elapsed:.1f}s")


# ------------------------------------------------------------------ 2


def _reduction_clients(K):
    ds = gen_blobs(5, 8, 60, 1.5, np.random.default_rng(77))
    part = partition_pathological(ds, K, np.random.default_rng(78))
    return [ClientState(i, split_train_test(ds, idx, np.random.default_rng(200 + i), 0.2, client_id=i))
            for i, idx in enumerate(part)]


def test_criterion_2_reduction_oracles():
    start = time.perf_counter()
    K, R = 10, 20
    spec = NetworkSpec((8, 16, 5))
    gaps = {}
    for name, mu in (("fedavg", 0.0), ("fedprox", 0.01)):
        clients = _reduction_clients(K)
        initial = init_weights(spec, np.random.default_rng(5))
        cfg = FedConfig(rounds=R, personalization_start=R, mu=mu, nu=0.0, clients=K, fraction=0.5,
                        batch_size=10, local_epochs=2, lr=0.05, seed=21)
        ours = []
        run(cfg, clients, initial, on_round=lambda rec, s: ours.append(s.global_model.copy()))
        data = [(c.split.train.features, c.split.train.labels) for c in clients]
        ref = reference_fedavg(data, initial, rounds=R, clients=K, fraction=0.5, batch_size=10,
                               local_epochs=2, lr=0.05, seed=21, mu=mu)
        gaps[name] = max(np.abs(a.flatten() - b.flatten()).max() for a, b in zip(ours, ref))
        gaps[name] = gaps[name] if len(ours) == len(ref) == R else np.inf
    elapsed = time.perf_counter() - start
    ok = max(gaps.values()) <= 1e-9 and elapsed < 60
    verdict(2, "FedAvg/FedProx reductions vs reference loop (K=10, R=20)", ok,
            ", ".join(f"{k} max |diff| {v:.1e}" for k, v in gaps.items()) + f", {elapsed:.1f}s")


# ------------------------------------------------------------------ 3


def test_criterion_3_aggregation():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        spec = NetworkSpec((int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        models = [(random_weights(spec, rng), int(rng.integers(1, 5000)))
                  for _ in range(int(rng.integers(1, 12)))]
        total = float(sum(n for _, n in models))
        oracle = [sum(float(w.flatten()[j]) * n for w, n in models) / total for j in range(spec.size)]
        worst = max(worst, float(np.abs(aggregate(models).flatten() - oracle).max()))
    verdict(3, "weighted aggregation vs oracle (100 configs)", worst <= 1e-12, f"max |diff| {worst:.1e}")


# ------------------------------------------------------------------ 4


def test_criterion_4_partitioners():
    y = np.repeat(np.arange(10), 4800)
    ds = LabeledDataset(np.zeros((y.size, 1)), y, 10)
    part = partition_pathological(ds, 50, np.random.default_rng(4))
    sizes = {len(c) for c in part}
    labels = max(len(np.unique(y[c])) for c in part)

    y2 = np.repeat(np.arange(10), 1000)
    ds2 = LabeledDataset(np.zeros((y2.size, 1)), y2, 10)
    dev = 0.0
    for c in partition_dirichlet(ds2, 10, 1e6, np.random.default_rng(4)):
        dev = max(dev, float(np.abs(np.bincount(y2[c], minlength=10) / len(c) - 0.1).max()))
    ok = sizes == {960} and labels <= 2 and dev <= 0.05
    verdict(4, "partitioners", ok,
            f"pathological sizes {sorted(sizes)}, max labels/client {labels}; "
            f"dirichlet(1e6) max share deviation {dev:.4f}")


# ------------------------------------------------------------------ 5


def test_criterion_5_label_noise():
    row_err = 0.0
    for kind in ("pair", "symmetric"):
        for eps in (0.0, 0.1, 0.4, 0.6, 0.9):
            for n in (2, 3, 10, 62):
                t = build_transition(kind, eps, n).entries
                row_err = max(row_err, float(np.abs(t.sum(axis=1) - 1).max()))
    rng = np.random.default_rng(5)
    rate_err = 0.0
    for kind, eps in (("pair", 0.1), ("pair", 0.4), ("symmetric", 0.2), ("symmetric", 0.6)):
        y = rng.integers(0, 10, 100000)
        noisy = apply_noise(y, build_transition(kind, eps, 10), rng)
        rate_err = max(rate_err, abs(float(np.mean(noisy != y)) - eps))
    pair = build_transition("pair", 0.1, 3).entries
    sym = build_transition("symmetric", 0.6, 10).entries
    shapes = (np.array_equal(pair, [[0.9, 0.1, 0], [0, 0.9, 0.1], [0.1, 0, 0.9]])
              and np.all(np.diag(sym) == 0.4) and np.all(sym[~np.eye(10, dtype=bool)] == 0.6 / 9))
    ok = row_err <= 1e-12 and rate_err <= 0.01 and shapes
    verdict(5, "label noise", ok,
            f"max row-sum err {row_err:.1e}, max flip-rate err {rate_err:.4f}, matrix forms {shapes}")


# ------------------------------------------------------------------ 6


def test_criterion_6_calibration():
    cases = [
        (([1.0, 1.0], [True, True]), (0.0, 0.0)),
        (([0.8, 0.8], [True, False]), (0.3, 0.3)),
        (([0.95], [False]), (0.95, 0.95)),
    ]
    hand = all(np.allclose(calibration_errors(*args)[:2], want, rtol=0, atol=1e-15) for args, want in cases)
    rng = np.random.default_rng(6)
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(1, 100))
        ece, mce, _ = calibration_errors(rng.uniform(1e-9, 1.0, n), rng.random(n) < rng.random())
        violations += ece > mce
    verdict(6, "calibration metrics", hand and violations == 0,
            f"hand cases match {hand}, ECE>MCE violations {violations}/1000")


# ------------------------------------------------------------------ 7


def test_criterion_7_desk_personalization():
    start = time.perf_counter()
    ours, base = [], []
    for seed in range(3):
        ours.append(desk_run("superfed", seed).result.report.best.accuracy)
        base.append(desk_run("fedavg", seed).result.report.top1)
    elapsed = time.perf_counter() - start
    ok = np.median(ours) >= np.median(base) and elapsed < 600
    verdict(7, "desk personalization, median over 3 seeds", ok,
            f"SuPerFed-MM best_average {np.median(ours):.4f} {np.round(ours, 4).tolist()} vs "
            f"FedAvg {np.median(base):.4f} {np.round(base, 4).tolist()}, {elapsed:.0f}s")


# ------------------------------------------------------------------ 8


def test_criterion_8_connectivity():
    with_nu, without = [], []
    for seed in range(5):
        with_nu.append(float(np.std(desk_run("superfed", seed).result.report.sweep.mean_top1)))
        without.append(float(np.std(desk_run("superfed-nu0", seed).result.report.sweep.mean_top1)))
    paired = float(np.median(np.subtract(with_nu, without)))

    sim = desk_run("superfed", 0)
    w_g = sim.result.server.global_model
    clients = [c for c in sim.setup.clients if c.local_model is not None]
    sweep = lambda_sweep(clients, w_g, [0.0, 1.0])
    exact = all(
        sweep.top1[0, i] == evaluate_model(w_g, c.split.test)[1]
        and sweep.loss[0, i] == evaluate_model(w_g, c.split.test)[2]
        and sweep.top1[1, i] == evaluate_model(c.local_model, c.split.test)[1]
        and sweep.loss[1, i] == evaluate_model(c.local_model, c.split.test)[2]
        for i, c in enumerate(clients)
    )
    ok = paired < 0 and exact
    verdict(8, "connectivity, cross-grid std nu=2 vs nu=0 (paired, 5 seeds)", ok,
            f"median paired diff {paired:+.5f}; medians {np.median(with_nu):.5f} vs "
            f"{np.median(without):.5f}; endpoints exact {exact}")


# ------------------------------------------------------------------ 9


def test_criterion_9_noise_robustness():
    start = time.perf_counter()
    ours, base = [], []
    for seed in range(3):
        ours.append(desk_run("superfed", seed, "symmetric:0.6").result.report.ece)
        base.append(desk_run("fedavg", seed, "symmetric:0.6").result.report.ece)
    elapsed = time.perf_counter() - start
    ok = np.median(ours) <= np.median(base) and elapsed < 900
    verdict(9, "symmetric 0.6 noise, final ECE median over 3 seeds", ok,
            f"SuPerFed-MM {np.median(ours):.4f} {np.round(ours, 4).tolist()} vs "
            f"FedAvg {np.median(base):.4f} {np.round(base, 4).tolist()}, {elapsed:.0f}s")


# ------------------------------------------------------------------ 10


def _csvs(path):
    return {p.name: p.read_bytes() for p in sorted(path.glob("*.csv"))}


def test_criterion_10_determinism(tmp_path):
    checks = {}
    for variant, noise in (("superfed", "none"), ("fedavg", "symmetric:0.6")):
        doc = {**DESK, **VARIANTS[variant], "rounds": 10, "personalization_start": 4, "noise": noise,
               "plane_resolution": 5}
        if variant == "fedavg":
            doc["personalization_start"] = "never"
        outs = []
        for i, workers in enumerate((1, 1, 4)):
            cfg = parse_config(doc, {"out": str(tmp_path / f"{variant}-{i}")})
            assert execute(cfg, workers=workers) == 0
            outs.append(_csvs(tmp_path / f"{variant}-{i}"))
        checks[variant] = outs[0] == outs[1] == outs[2] and len(outs[0]) == 3
    verdict(10, "byte-identical CSVs across reruns and serial/parallel", all(checks.values()),
            ", ".join(f"{k} identical {v}" for k, v in checks.items()))
