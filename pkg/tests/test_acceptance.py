"""Acceptance suite: one PASS/FAIL line per headline criterion.

The end-to-end criteria share one session fixture that runs the full default
pipeline twice with the same seed; that takes tens of minutes on one core.
"""

import json
import math
import time

import numpy as np
import pytest

from envchan import channel as ch
from envchan.harness import PipelineConfig, load_dataset, recognize, run_pipeline
from envchan.pointcloud import dbscan, min_perimeter_rectangle
from envchan.recognizer import (
    MlpModel,
    TrainConfig,
    classify_cluster,
    learning_rate,
    load_checkpoint,
    mlp_gradients,
)
from envchan.scenegen import TransceiverPose

from oracles import brute_min_perimeter, labels_from_clusters, naive_dbscan

RUNTIME_LIMIT_S = 30 * 60


@pytest.fixture(scope="session")
def full_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    config = PipelineConfig(seed=0)
    t0 = time.perf_counter()
    first = run_pipeline(config, base / "run1")
    elapsed = time.perf_counter() - t0
    run_pipeline(config, base / "run2")
    return {"dirs": (base / "run1", base / "run2"), "report": first, "elapsed": elapsed, "config": config}


# ---------------------------------------------------------------- 1, 2: recognizer accuracy


@pytest.mark.slow
def test_accuracy_per_condition(full_runs, report_line):
    conds = full_runs["report"]["evaluation"]["conditions"]
    assert len(conds) == 9
    worst_p = min(c["P"] for c in conds.values())
    worst_gain = min(c["P"] - c["baseline_P"] for c in conds.values())
    elapsed = full_runs["elapsed"]
    ok = worst_p >= 0.85 and worst_gain >= 0.20 and elapsed <= RUNTIME_LIMIT_S
    cells = ", ".join(f"{k} {c['P']:.3f}/{c['baseline_P']:.3f}" for k, c in conds.items())
    report_line(
        1,
        "per-condition P >= 0.85, gain over baseline >= 20 pp, runtime <= 30 min",
        ok,
        f"min P {worst_p:.4f}, min gain {worst_gain:.4f}, runtime {elapsed / 60:.1f} min; P/baseline: {cells}",
    )
    assert ok


@pytest.mark.slow
def test_error_histogram_mass(full_runs, report_line):
    hist = full_runs["report"]["evaluation"]["error_histogram"]
    mass = hist.get("0", 0.0) + hist.get("1", 0.0)
    ok = mass >= 0.85
    report_line(2, "error histogram mass at |error| <= 1 >= 0.85", ok, f"mass {mass:.4f}, histogram {hist}")
    assert ok


# ---------------------------------------------------------------- 3: rectangle oracle


def test_calipers_match_brute_force(report_line):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(1000):
        n = int(rng.integers(3, 300))
        kind = k % 4
        if kind == 0:
            pts = rng.normal(size=(n, 2)) * rng.uniform(0.1, 20, 2)
        elif kind == 1:
            pts = rng.uniform(-50, 50, (n, 2))
        elif kind == 2:  # rotated thin boxes, the car-like case
            phi = rng.uniform(0, math.pi)
            base = rng.uniform(0, 1, (n, 2)) * [rng.uniform(2, 15), rng.uniform(0.2, 3)]
            R = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
            pts = base @ R.T + rng.uniform(-100, 100, 2)
        else:  # few points on a coarse grid: collinear and duplicate points
            pts = rng.integers(-3, 4, (max(3, n // 20), 2)).astype(float)
        _, length, width, _ = min_perimeter_rectangle(pts)
        worst = max(worst, abs(2 * (length + width) - brute_min_perimeter(pts)))
    ok = worst <= 1e-9
    report_line(3, "rotating calipers perimeter = brute force within 1e-9 on 1000 sets", ok, f"max abs diff {worst:.3e}")
    assert ok


# ---------------------------------------------------------------- 4: DBSCAN oracle


def test_dbscan_matches_naive(report_line):
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(10, 2001))
        centers = rng.uniform(-15, 15, (int(rng.integers(1, 8)), 3))
        pts = centers[rng.integers(len(centers), size=n)] + rng.normal(scale=rng.uniform(0.2, 2.5), size=(n, 3))
        if rng.random() < 0.3:  # voxel-like lattice with exact-distance ties
            pts = np.round(pts / 0.3) * 0.3
        eps, mp = float(rng.uniform(0.4, 2.0)), int(rng.integers(1, 12))
        clusters, _ = dbscan(pts, eps, mp)
        if not np.array_equal(labels_from_clusters(n, clusters), naive_dbscan(pts, eps, mp)):
            mismatches += 1
    ok = mismatches == 0
    report_line(4, "DBSCAN partition = naive reference on 200 clouds (n <= 2000)", ok, f"{mismatches} mismatches")
    assert ok


# ---------------------------------------------------------------- 5: gradient check


def _finite_difference(model, X, y, h=1e-5):
    out = []
    for a in model.weights + model.biases:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            lp = mlp_gradients(model, X, y)[0]
            a[idx] = old - h
            lm = mlp_gradients(model, X, y)[0]
            a[idx] = old
            g[idx] = (lp - lm) / (2 * h)
        out.append(g)
    return out


def test_gradient_check(report_line):
    rng = np.random.default_rng(5)
    worst = 0.0
    for k in range(50):
        sizes = (14, int(rng.integers(2, 9)), int(rng.integers(2, 9)), 1)
        model = MlpModel.init(sizes, seed=k)
        model.biases = [rng.normal(scale=0.2, size=b.shape) for b in model.biases]
        batch = int(rng.integers(1, 17))
        X = rng.normal(size=(batch, 14))
        y = rng.integers(0, 5, batch).astype(float)
        _, gw, gb = mlp_gradients(model, X, y)
        num = _finite_difference(model, X, y)
        a = np.concatenate([g.ravel() for g in gw + gb])
        n = np.concatenate([g.ravel() for g in num])
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(rel.max()))
    ok = worst < 1e-4
    report_line(5, "analytic vs central-difference gradients, relative error < 1e-4 on 50 models", ok, f"max rel {worst:.3e}")
    assert ok


# ---------------------------------------------------------------- 6: learning-rate schedule


def test_learning_rate_schedule(report_line):
    cfg = TrainConfig()
    bad = [e for e in range(cfg.epochs) if learning_rate(e, cfg) != 1e-3 * 0.9 ** math.floor(e / 4)]
    ok = not bad and cfg.epochs == 200
    report_line(6, "lr(epoch) = 1e-3 * 0.9^floor(epoch/4) for all 200 epochs", ok, f"{len(bad)} epochs differ")
    assert ok


# ---------------------------------------------------------------- 7: channel conservation


@pytest.mark.slow
def test_channel_conservation(full_runs, report_line):
    rng = np.random.default_rng(11)
    worst = full_runs["report"]["channel"]["max_power_error"]
    for k in range(500):
        tx = np.array([*rng.uniform(-80, 80, 2), rng.uniform(0.5, 3)])
        rx = np.array([*rng.uniform(-80, 80, 2), rng.uniform(0.5, 3)])
        pose = TransceiverPose(tx, rx, rng.normal(scale=10, size=3), rng.normal(scale=10, size=3))
        sc = [
            ch.ChannelScatterer(rng.uniform(-90, 90, 3), cls, int(rng.integers(4)), j, float(rng.uniform(0, 10)))
            for j, cls in enumerate(rng.choice(["static", "dynamic"], int(rng.integers(0, 20))))
        ]
        params = ch.ChannelParams(omega=float(rng.uniform(0, 10)), seed=k)
        cir = ch.synthesize_cir([s for s in sc if s.cls == "static"], [s for s in sc if s.cls == "dynamic"],
                                pose, params, t=0.1 * k, los_blocked=bool(rng.random() < 0.3))
        worst = max(worst, abs(sum(p.power for p in cir.paths) - 1), abs(ch.pdp(cir, params).powers.sum() - 1))
    paths = ch.geometric_delays(
        TransceiverPose(np.array([0, 0, 1.5]), np.array([60, 0, 1.5])),
        [ch.ChannelScatterer(np.array([30, 15, 2.0]), "static", 0, 0),
         ch.ChannelScatterer(np.array([20, -8, 1.0]), "dynamic", 1, 0)],
    )
    out = ch.power_allocation(ch.ChannelParams(omega=1.0, eta_gr=0.2, eta_sta=0.5, eta_dyn=0.3), paths)
    sums = [sum(p.power for p in out if p.kind == k) for k in ch.PATH_KINDS]
    group_err = max(abs(s - e) for s, e in zip(sums, (0.5, 0.1, 0.25, 0.15)))
    ok = worst <= 1e-12 and group_err <= 1e-12
    report_line(7, "power sums = 1 within 1e-12; group sums (0.5, 0.1, 0.25, 0.15)", ok,
                f"max conservation error {worst:.2e}, group error {group_err:.2e}")
    assert ok


# ---------------------------------------------------------------- 8: visibility-region soundness


@pytest.mark.slow
def test_vr_soundness(full_runs, report_line):
    run = full_runs["dirs"][0]
    report = full_runs["report"]
    config, links = load_dataset(run / "data", full_runs["config"])
    model = load_checkpoint(run / "model.ckpt")
    ratios = report["evaluation"]["vr_ratios"]
    violations, checked = 0, 0
    for ld in links:
        for k, rec in enumerate(ld.records):
            if ld.splits[k] != "test":
                continue
            pose = TransceiverPose.from_dict(rec["pose"])
            cuboids = ld.cuboids(k)
            counts = recognize(model, cuboids, pose, ratios, config.envelope)
            d = float(np.linalg.norm(pose.rx_position - pose.tx_position))
            for cub, n in zip(cuboids, counts):
                if n <= 0:
                    continue
                checked += 1
                rho = ratios[classify_cluster(cub, config.envelope)]
                s = np.linalg.norm(cub.center - pose.tx_position) + np.linalg.norm(cub.center - pose.rx_position)
                violations += int(s > rho * d)
    ok = violations == 0 and report["evaluation"]["vr_violations"] == 0 and checked > 0
    report_line(8, "no nonzero-count cluster outside its class VR on the test split", ok,
                f"{violations} violations over {checked} nonzero clusters")
    assert ok


# ---------------------------------------------------------------- 9: PDP fidelity


@pytest.mark.slow
def test_pdp_fidelity(full_runs, report_line):
    c = full_runs["report"]["channel"]
    ok = c["rmse_db_test"] <= 6.0 and c["los_bin_exact"] and c["drift_ok"]
    report_line(
        9,
        "PDP RMSE <= 6 dB, LoS bin exact, peak drift bounded",
        ok,
        f"link {c['link']}: RMSE {c['rmse_db_test']:.2f} dB (all snapshots {c['rmse_db_all']:.2f} dB), "
        f"LoS exact {c['los_bin_exact']}, max drift {c['max_path_drift_s']:.3e} s <= bound {c['drift_bound_s']:.3e} s: {c['drift_ok']}",
    )
    assert ok


# ---------------------------------------------------------------- 10: determinism


@pytest.mark.slow
def test_determinism(full_runs, report_line):
    a, b = full_runs["dirs"]
    same = {name: (a / name).read_bytes() == (b / name).read_bytes()
            for name in ("report.json", "model.ckpt", "training_log.csv", "pdp_series.csv")}
    ok = all(same.values()) and json.loads((a / "report.json").read_text()) == json.loads((b / "report.json").read_text())
    report_line(10, "two runs with the same config and seed give bit-identical report and checkpoint", ok,
                ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert ok
