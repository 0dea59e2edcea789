"""Dataset orchestration, evaluation metrics and the end-to-end pipeline.

On-disk dataset layout (one directory per run)::

    config.json                 full pipeline configuration
    index.json                  list of DatasetIndex records
    <layout>_<vtd>/scene.json   scene at snapshot 0
    <layout>_<vtd>/<link_id>/gt.jsonl        ground truth, one line per snapshot
    <layout>_<vtd>/<link_id>/clusters.jsonl  cuboids and count labels per snapshot
    <layout>_<vtd>/<link_id>/clouds/NNNN.txt preprocessed clouds (optional)
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import shutil
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import channel as ch
from .geometry import segments_hit_boxes
from .pointcloud import (
    ClusterCuboid,
    concatenate,
    dbscan,
    fit_cuboid,
    remove_ground,
    voxel_downsample,
    write_cluster_dump,
)
from .recognizer import (
    TrainConfig,
    VehicleEnvelope,
    VREllipsoid,
    assign_positions,
    classify_cluster,
    count_targets,
    feature_matrix,
    fit_vr,
    load_checkpoint,
    predict_counts,
    save_checkpoint,
    train,
    vr_filter,
    write_training_log,
)
from .rtoracle import DEFAULT_REFLECTION_LOSS, GroundTruth, read_ground_truths, trace_ground_truth, write_ground_truths
from .scenegen import (
    LAYOUTS,
    VTDS,
    LidarConfig,
    Scene,
    SceneConfig,
    TransceiverPose,
    advance_scene,
    build_scene,
    load_scene,
    save_scene,
    sensor_position,
    simulate_lidar,
    transceiver_pose,
    write_cloud,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
PDP_FLOOR = 1e-12


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


class DataError(RuntimeError):
    """Missing, malformed or inconsistent dataset files."""


# ---------------------------------------------------------------------------
# metrics


def _aligned(pred, truth):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValueError("pred and truth must be aligned")
    return pred, truth


def accuracy(pred, truth) -> float:
    """``1 - sum|pred - truth| / sum(truth)``, pooled and not clamped."""
    pred, truth = _aligned(pred, truth)
    n_all = int(truth.sum())
    if n_all == 0:
        raise ValueError("accuracy is undefined when the truth holds no scatterers")
    return 1.0 - int(np.abs(pred - truth).sum()) / n_all


def error_histogram(pred, truth) -> dict[int, float]:
    """Empirical distribution of per-cluster ``|pred - truth|``."""
    pred, truth = _aligned(pred, truth)
    if len(pred) == 0:
        return {}
    values, counts = np.unique(np.abs(pred - truth), return_counts=True)
    return {int(v): float(c) / len(pred) for v, c in zip(values, counts)}


def binary_accuracy(pred, truth) -> float:
    """Fraction of clusters where scatterer presence is predicted correctly."""
    pred, truth = _aligned(pred, truth)
    if len(pred) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean((pred > 0) == (truth > 0)))


def regression_accuracy(pred, truth) -> float:
    """Fraction of clusters whose count is predicted exactly."""
    pred, truth = _aligned(pred, truth)
    if len(pred) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(pred == truth))


def random_baseline(train_truth_counts, eval_cluster_count: int, seed: int = 0) -> np.ndarray:
    """Counts drawn independently from the empirical training distribution."""
    train_truth_counts = np.asarray(train_truth_counts, dtype=np.int64).ravel()
    if len(train_truth_counts) == 0:
        raise ValueError("need at least one training count")
    values, counts = np.unique(train_truth_counts, return_counts=True)
    rng = np.random.default_rng(seed)
    return rng.choice(values, size=int(eval_cluster_count), p=counts / counts.sum()).astype(np.int64)


def compare_pdp(sim, truth, floor: float = PDP_FLOOR) -> float:
    """RMS dB difference over bins whose truth power exceeds ``floor``.

    ``sim`` and ``truth`` are equal-length sequences of Pdp on identical grids.
    """
    sim, truth = list(sim), list(truth)
    if len(sim) != len(truth):
        raise ValueError("PDP sequences differ in length")
    diffs = []
    for s, t in zip(sim, truth):
        if len(s.delay_bins) != len(t.delay_bins) or not np.array_equal(s.delay_bins, t.delay_bins):
            raise ValueError("PDP delay grids differ")
        keep = t.powers > floor
        ds = 10 * np.log10(np.maximum(s.powers[keep], floor))
        dt = 10 * np.log10(np.maximum(t.powers[keep], floor))
        diffs.append(ds - dt)
    d = np.concatenate(diffs) if diffs else np.zeros(0)
    if len(d) == 0:
        raise ValueError("no bins above the floor")
    return float(np.sqrt(np.mean(d**2)))


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    layouts: tuple[str, ...] = LAYOUTS
    vtds: tuple[str, ...] = VTDS
    snapshots: int = 100
    links: int = 6
    z_threshold: float = 0.2
    voxel: float = 0.3
    eps: float = 1.0
    min_pts: int = 8
    label_inflate: float = 0.2
    vr_coverage: float = 0.95
    pdp_layout: str = "crossing"
    pdp_vtd: str = "high"
    pdp_link: int = 0
    store_clouds: bool = False
    reflection_loss: dict = field(default_factory=lambda: dict(DEFAULT_REFLECTION_LOSS))
    scene: SceneConfig = field(default_factory=SceneConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    channel: ch.ChannelParams = field(default_factory=ch.ChannelParams)
    envelope: VehicleEnvelope = field(default_factory=VehicleEnvelope)

    def __post_init__(self):
        if self.snapshots < 1 or self.links < 1:
            raise ValueError("snapshots and links must be >= 1")
        if set(self.layouts) - set(LAYOUTS) or set(self.vtds) - set(VTDS):
            raise ValueError("unknown layout or vtd")
        if self.links > len(_link_pairs(self.scene)):
            raise ValueError("more links requested than the scene provides")
        if not 0 < self.vr_coverage <= 1:
            raise ValueError("vr_coverage must be in (0, 1]")
        if self.voxel <= 0 or self.eps <= 0 or self.min_pts < 1 or self.z_threshold < 0:
            raise ValueError("invalid preprocessing parameters")

    def conditions(self) -> list[tuple[str, str]]:
        return [(layout, vtd) for layout in self.layouts for vtd in self.vtds]


def _link_pairs(scene_cfg: SceneConfig):
    n = scene_cfg.link_vehicles
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    return obj


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def _from_jsonable(cls, data, where="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name in _NESTED.get(cls, {}) else None
        if name in _NESTED.get(cls, {}):
            kwargs[name] = _from_jsonable(type(default), value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = _tuplify(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_NESTED = {
    PipelineConfig: {"scene", "lidar", "train", "channel", "envelope"},
}


def config_to_dict(config: PipelineConfig) -> dict:
    return _to_jsonable(config)


def config_from_dict(data: dict) -> PipelineConfig:
    return _from_jsonable(PipelineConfig, data)


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def save_config(config: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2) + "\n")


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class DatasetIndex:
    layout: str
    vtd: str
    link_id: str
    link: tuple[int, int]
    snapshots: int
    scene_path: str
    ground_truth_path: str
    clusters_path: str
    clouds_dir: str | None = None

    @property
    def condition(self) -> tuple[str, str]:
        return (self.vtd, self.layout)

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetIndex":
        return cls(**{**d, "link": tuple(d["link"])})


def link_id(layout: str, vtd: str, k: int) -> str:
    return f"{layout}_{vtd}_{k}"


def split_assignment(link: str, n_snapshots: int, seed: int, fractions=(0.6, 0.2, 0.2)) -> list[str]:
    """Per-snapshot split labels, a pure function of ``(link, snapshot, seed)``.

    A seeded permutation of the link's snapshots is cut at the rounded
    cumulative fractions, so every split is within one sample of its share.
    """
    rng = np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(link.encode())])
    perm = rng.permutation(n_snapshots)
    cuts = np.round(np.cumsum(fractions) * n_snapshots).astype(int)
    labels = np.empty(n_snapshots, dtype=object)
    start = 0
    for name, stop in zip(SPLITS, cuts):
        labels[perm[start:stop]] = name
        start = stop
    return [str(x) for x in labels]


def _lidar_seed(seed: int, snapshot: int, vehicle: int) -> list[int]:
    return [seed & 0xFFFFFFFF, snapshot, vehicle]


def process_link_snapshot(cloud_tx, cloud_rx, config: PipelineConfig):
    """Steps from raw clouds to clusters and circumscribed cuboids."""
    cloud = voxel_downsample(remove_ground(concatenate(cloud_tx, cloud_rx), config.z_threshold), config.voxel)
    clusters, noise = dbscan(cloud, config.eps, config.min_pts)
    cuboids = [fit_cuboid(cloud, c) for c in clusters]
    return cloud, clusters, cuboids, noise


def snapshot_clouds(scene: Scene, vehicles, config: PipelineConfig, seed: int):
    """One LiDAR sweep from every listed vehicle, host vehicle excluded."""
    return {
        v: simulate_lidar(
            scene,
            sensor_position(scene, v, config.lidar),
            config.lidar,
            seed=int(np.random.default_rng(_lidar_seed(seed, scene.snapshot_index, v)).integers(2**31)),
            exclude=(v,),
        )
        for v in sorted(vehicles)
    }


def generate_condition(layout: str, vtd: str, config: PipelineConfig, out_dir) -> list[DatasetIndex]:
    """Simulate one (layout, vtd) condition and write its files under ``out_dir``."""
    out_dir = Path(out_dir)
    cond_dir = out_dir / f"{layout}_{vtd}"
    cond_dir.mkdir(parents=True, exist_ok=True)
    scene0 = build_scene(layout, vtd, config.seed, config.scene)
    save_scene(scene0, cond_dir / "scene.json")
    links = scene0.links[: config.links]
    vehicles = {v for pair in links for v in pair}

    gts = {k: [] for k in range(len(links))}
    records = {k: [] for k in range(len(links))}
    for snap in range(config.snapshots):
        scene = advance_scene(scene0, snap)
        clouds = snapshot_clouds(scene, vehicles, config, config.seed)
        for k, pair in enumerate(links):
            pose = transceiver_pose(scene, pair, config.lidar)
            gt = trace_ground_truth(scene, pose, config.reflection_loss)
            cloud, clusters, cuboids, noise = process_link_snapshot(clouds[pair[0]], clouds[pair[1]], config)
            labels = count_targets(cuboids, gt.scatterers, config.label_inflate)
            gts[k].append(gt)
            records[k].append(
                {
                    "snapshot": snap,
                    "pose": pose.to_dict(),
                    "points": len(cloud),
                    "noise": len(noise),
                    "sizes": [len(c) for c in clusters],
                    "cuboids": [c.to_dict() for c in cuboids],
                    "labels": labels.tolist(),
                }
            )
            if config.store_clouds:
                cdir = cond_dir / link_id(layout, vtd, k) / "clouds"
                cdir.mkdir(parents=True, exist_ok=True)
                write_cloud(cloud, cdir / f"{snap:04d}.txt")
                write_cluster_dump(clusters, cuboids, cdir / f"{snap:04d}.clusters.txt")

    index = []
    for k, pair in enumerate(links):
        lid = link_id(layout, vtd, k)
        ldir = cond_dir / lid
        ldir.mkdir(parents=True, exist_ok=True)
        write_ground_truths(gts[k], ldir / "gt.jsonl")
        with open(ldir / "clusters.jsonl", "w") as fh:
            for rec in records[k]:
                fh.write(json.dumps(rec) + "\n")
        index.append(
            DatasetIndex(
                layout=layout,
                vtd=vtd,
                link_id=lid,
                link=tuple(int(v) for v in pair),
                snapshots=config.snapshots,
                scene_path=str((cond_dir / "scene.json").relative_to(out_dir)),
                ground_truth_path=str((ldir / "gt.jsonl").relative_to(out_dir)),
                clusters_path=str((ldir / "clusters.jsonl").relative_to(out_dir)),
                clouds_dir=str((ldir / "clouds").relative_to(out_dir)) if config.store_clouds else None,
            )
        )
    return index


def write_index(entries, data_dir) -> None:
    entries = sorted(entries, key=lambda e: (e.layout, e.vtd, e.link_id))
    Path(data_dir, "index.json").write_text(json.dumps([e.to_dict() for e in entries], indent=1) + "\n")


def read_index(data_dir) -> list[DatasetIndex]:
    path = Path(data_dir, "index.json")
    try:
        entries = [DatasetIndex.from_dict(d) for d in json.loads(path.read_text())]
    except (OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
        raise DataError(f"cannot read dataset index {path}: {exc}") from exc
    return entries


def _generate_one(args) -> list[DatasetIndex]:
    layout, vtd, config, out_dir = args
    log.info("generating %s/%s", layout, vtd)
    return generate_condition(layout, vtd, config, out_dir)


def generate_dataset(config: PipelineConfig, out_dir, conditions=None, workers=None) -> list[DatasetIndex]:
    """Generate the given (layout, vtd) conditions, merging into any existing index.

    Conditions are independent (each seeds its own RNG and writes its own
    directory), so they run in a process pool of ``workers`` processes
    (default: CPU count); the output does not depend on the worker count.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.json")
    existing = read_index(out_dir) if (out_dir / "index.json").exists() else []
    jobs = [(layout, vtd, config, out_dir) for layout, vtd in conditions or config.conditions()]
    workers = min(workers or os.cpu_count() or 1, len(jobs))
    entries = []
    if workers <= 1:
        for job in jobs:
            entries += _generate_one(job)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_generate_one, jobs):
                entries += part
    done = {(e.layout, e.vtd) for e in entries}
    merged = [e for e in existing if (e.layout, e.vtd) not in done] + entries
    write_index(merged, out_dir)
    return merged


@dataclass
class LinkData:
    entry: DatasetIndex
    ground_truths: list[GroundTruth]
    records: list[dict]
    splits: list[str]

    def poses(self):
        return [TransceiverPose.from_dict(r["pose"]) for r in self.records]

    def cuboids(self, k: int):
        return [ClusterCuboid.from_dict(d) for d in self.records[k]["cuboids"]]


def load_link(data_dir, entry: DatasetIndex, config: PipelineConfig) -> LinkData:
    data_dir = Path(data_dir)
    try:
        gts = read_ground_truths(data_dir / entry.ground_truth_path)
        with open(data_dir / entry.clusters_path) as fh:
            records = [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot read link {entry.link_id}: {exc}") from exc
    if len(gts) != entry.snapshots or len(records) != entry.snapshots:
        raise DataError(f"link {entry.link_id}: expected {entry.snapshots} snapshots")
    for rec in records:
        if len(rec["cuboids"]) != len(rec["labels"]):
            raise DataError(f"link {entry.link_id}: cuboids and labels misaligned")
    splits = split_assignment(entry.link_id, entry.snapshots, config.seed, config.train.split)
    return LinkData(entry, gts, records, splits)


def load_dataset(data_dir, config: PipelineConfig | None = None):
    """``(config, [LinkData])`` for a generated dataset directory."""
    data_dir = Path(data_dir)
    if config is None:
        cpath = data_dir / "config.json"
        if not cpath.exists():
            raise DataError(f"{cpath} missing")
        config = load_config(cpath)
    return config, [load_link(data_dir, e, config) for e in read_index(data_dir)]


def _samples(links, split: str):
    X, y = [], []
    for ld in links:
        for k, rec in enumerate(ld.records):
            if ld.splits[k] != split or not rec["cuboids"]:
                continue
            X.append(feature_matrix(ld.cuboids(k), TransceiverPose.from_dict(rec["pose"])))
            y.append(np.asarray(rec["labels"], dtype=float))
    if not X:
        return np.zeros((0, 14)), np.zeros(0)
    return np.concatenate(X), np.concatenate(y)


# ---------------------------------------------------------------------------
# training and evaluation


def train_model(links, config: PipelineConfig):
    X_tr, y_tr = _samples(links, "train")
    X_va, y_va = _samples(links, "val")
    if len(X_tr) == 0:
        raise DataError("training split is empty")
    log.info("training on %d clusters (%d validation)", len(X_tr), len(X_va))
    return train(X_tr, y_tr, X_va, y_va, config.train)


def fit_visibility_regions(links, config: PipelineConfig) -> dict[str, float]:
    """Pooled VR ratios from the training-split ground truth.

    A class without any training scatterer borrows the other class's ratio.
    """
    gts = [gt for ld in links for gt, s in zip(ld.ground_truths, ld.splits) if s == "train"]
    ratios = {}
    for kind in ("static", "dynamic"):
        try:
            ratios[kind] = fit_vr(gts, kind, config.vr_coverage)
        except ValueError:
            ratios[kind] = None
    if ratios["static"] is None and ratios["dynamic"] is None:
        raise DataError("no training scatterers to fit visibility regions")
    for kind, other in (("static", "dynamic"), ("dynamic", "static")):
        if ratios[kind] is None:
            log.warning("no %s scatterers in training; using the %s VR ratio", kind, other)
            ratios[kind] = ratios[other]
    return ratios


def recognize(model, cuboids, pose: TransceiverPose, ratios, envelope: VehicleEnvelope):
    """Predicted counts after the visibility-region filter."""
    counts = predict_counts(model, cuboids, pose)
    if len(cuboids) == 0:
        return counts
    vr_s = VREllipsoid.from_ratio(pose, ratios["static"], "static")
    vr_d = VREllipsoid.from_ratio(pose, ratios["dynamic"], "dynamic")
    return vr_filter(cuboids, counts, vr_s, vr_d, pose, envelope)


def vr_violations(cuboids, counts, pose, ratios, envelope) -> int:
    bad = 0
    for cub, n in zip(cuboids, counts):
        if n <= 0:
            continue
        kind = classify_cluster(cub, envelope)
        if not VREllipsoid.from_ratio(pose, ratios[kind], kind).contains(cub.center)[0]:
            bad += 1
    return bad


def _condition_key(layout, vtd) -> str:
    return f"{layout}/{vtd}"


def _baseline_seed(seed: int, key: str) -> list[int]:
    return [seed & 0xFFFFFFFF, zlib.crc32(key.encode())]


def evaluate(model, links, config: PipelineConfig) -> dict:
    """Recognizer and baseline metrics on the test split, per condition and pooled."""
    ratios = fit_visibility_regions(links, config)
    _, y_train = _samples(links, "train")
    train_counts = y_train.astype(np.int64)

    per_cond: dict[str, dict] = {}
    all_pred, all_truth, all_base = [], [], []
    violations = 0
    fig6 = []
    for layout, vtd in config.conditions():
        key = _condition_key(layout, vtd)
        preds, truths = [], []
        for ld in links:
            if (ld.entry.layout, ld.entry.vtd) != (layout, vtd):
                continue
            for k, rec in enumerate(ld.records):
                if ld.splits[k] != "test":
                    continue
                pose = TransceiverPose.from_dict(rec["pose"])
                cuboids = ld.cuboids(k)
                pred = recognize(model, cuboids, pose, ratios, config.envelope)
                truth = np.asarray(rec["labels"], dtype=np.int64)
                violations += vr_violations(cuboids, pred, pose, ratios, config.envelope)
                preds.append(pred)
                truths.append(truth)
                fig6.append((ld.entry.link_id, rec["snapshot"], int(pred.sum()), int(truth.sum())))
        if not preds:
            raise DataError(f"no test data for condition {key}")
        pred, truth = np.concatenate(preds), np.concatenate(truths)
        base = random_baseline(train_counts, len(truth), _baseline_seed(config.seed, key))
        n_all = int(truth.sum())
        per_cond[key] = {
            "layout": layout,
            "vtd": vtd,
            "clusters": int(len(truth)),
            "n_all": n_all,
            "n_error": int(np.abs(pred - truth).sum()),
            "P": accuracy(pred, truth) if n_all else None,
            "baseline_P": accuracy(base, truth) if n_all else None,
            "binary_accuracy": binary_accuracy(pred, truth),
            "baseline_binary_accuracy": binary_accuracy(base, truth),
            "regression_accuracy": regression_accuracy(pred, truth),
            "error_histogram": {str(k): v for k, v in error_histogram(pred, truth).items()},
        }
        all_pred.append(pred)
        all_truth.append(truth)
        all_base.append(base)

    pred, truth, base = np.concatenate(all_pred), np.concatenate(all_truth), np.concatenate(all_base)
    return {
        "conditions": per_cond,
        "pooled": {
            "clusters": int(len(truth)),
            "n_all": int(truth.sum()),
            "n_error": int(np.abs(pred - truth).sum()),
            "P": accuracy(pred, truth),
            "baseline_P": accuracy(base, truth),
            "binary_accuracy": binary_accuracy(pred, truth),
            "baseline_binary_accuracy": binary_accuracy(base, truth),
            "regression_accuracy": regression_accuracy(pred, truth),
        },
        "error_histogram": {str(k): v for k, v in error_histogram(pred, truth).items()},
        "vr_ratios": ratios,
        "vr_violations": violations,
        "snapshot_totals": fig6,
    }


# ---------------------------------------------------------------------------
# channel synthesis from ground truth and from recognized scatterers


def ground_truth_scatterers(gt: GroundTruth):
    """Channel scatterers of one snapshot, keyed by (object, face) for persistence."""
    static, dynamic = [], []
    for s in gt.scatterers:
        cs = ch.ChannelScatterer(
            position=s.position,
            cls=s.kind,
            cluster=s.source_object_id,
            index=s.face,
            reflection_loss=s.reflection_loss,
            key=(s.source_object_id, s.face),
        )
        (dynamic if s.kind == "dynamic" else static).append(cs)
    return static, dynamic


def _cuboid_boxes(cuboids):
    centers = np.array([c.center for c in cuboids]).reshape(-1, 3)
    halves = np.array([c.yaw_halves for c in cuboids]).reshape(-1, 3)
    yaws = np.array([c.angle for c in cuboids])
    return centers, halves, yaws


def cuboid_los_blocked(cuboids, pose: TransceiverPose) -> bool:
    """LoS state as seen by the recognizer: does Tx-Rx cross a fitted cuboid?"""
    if not cuboids:
        return False
    centers, halves, yaws = _cuboid_boxes(cuboids)
    seg = segments_hit_boxes(pose.tx_position[None], pose.rx_position[None], centers, halves, yaws)
    return bool(seg.any())


def recognized_scatterers(cloud, clusters, cuboids, counts, pose, config: PipelineConfig, seed: int):
    """Place each cluster's predicted scatterers and split them by cluster class."""
    static, dynamic = [], []
    losses = {**DEFAULT_REFLECTION_LOSS, **config.reflection_loss}
    for cl, cub, n in zip(clusters, cuboids, counts):
        if n <= 0:
            continue
        kind = classify_cluster(cub, config.envelope)
        pos = assign_positions(cloud, cl, int(n), seed=seed + cl.label, pose=pose)
        loss = losses["car"] if kind == "dynamic" else losses["building"]
        for j, p in enumerate(pos):
            cs = ch.ChannelScatterer(p, kind, cl.label, j, loss, key=("recognized", cl.label, j))
            (dynamic if kind == "dynamic" else static).append(cs)
    return static, dynamic


def _pdp_pair(cir_a, cir_b, params):
    n = max(len(ch.pdp(cir_a, params).powers), len(ch.pdp(cir_b, params).powers))
    return ch.pdp(cir_a, params, n), ch.pdp(cir_b, params, n)


def max_closing_speed(scene: Scene) -> float:
    """Upper bound on the rate of change of any single-bounce path length."""
    speeds = [float(np.linalg.norm(o.velocity)) for o in scene.vehicles]
    return 4.0 * max(speeds, default=0.0)


def simulate_link(model, data_dir, entry: DatasetIndex, config: PipelineConfig, ratios, train_counts=None) -> dict:
    """Ground-truth, recognized and random-baseline channels of one link over all snapshots."""
    data_dir = Path(data_dir)
    ld = load_link(data_dir, entry, config)
    scene0 = load_scene(data_dir / entry.scene_path)
    params = config.channel
    dt = scene0.snapshot_period
    bound_speed = max_closing_speed(scene0)
    out = {"truth": [], "recognized": [], "baseline": [], "splits": ld.splits}
    for k in range(entry.snapshots):
        scene = advance_scene(scene0, k)
        gt = ld.ground_truths[k]
        pose = TransceiverPose.from_dict(ld.records[k]["pose"])
        clouds = snapshot_clouds(scene, set(entry.link), config, config.seed)
        cloud, clusters, cuboids, _ = process_link_snapshot(clouds[entry.link[0]], clouds[entry.link[1]], config)
        if len(cuboids) != len(ld.records[k]["cuboids"]):
            raise DataError(f"link {entry.link_id} snapshot {k}: regenerated clusters differ from the dataset")
        t = k * dt
        st, dy = ground_truth_scatterers(gt)
        cir_truth = ch.synthesize_cir(st, dy, pose, params, t, gt.los_blocked, k)
        counts = recognize(model, cuboids, pose, ratios, config.envelope)
        seed = int(np.random.default_rng([config.seed, k]).integers(2**31))
        blocked = cuboid_los_blocked(cuboids, pose)
        st, dy = recognized_scatterers(cloud, clusters, cuboids, counts, pose, config, seed)
        cir_rec = ch.synthesize_cir(st, dy, pose, params, t, blocked, k)
        out["truth"].append(cir_truth)
        out["recognized"].append(cir_rec)
        if train_counts is not None:
            base = random_baseline(train_counts, len(cuboids), _baseline_seed(seed, entry.link_id))
            st, dy = recognized_scatterers(cloud, clusters, cuboids, base, pose, config, seed)
            out["baseline"].append(ch.synthesize_cir(st, dy, pose, params, t, blocked, k))
    out["bound_speed"] = bound_speed
    out["dt"] = dt
    return out


def pdp_fidelity(sim: dict, config: PipelineConfig) -> dict:
    """PDP agreement between recognized and ground-truth channels on one link."""
    params = config.channel
    pairs = [_pdp_pair(r, t, params) for r, t in zip(sim["recognized"], sim["truth"])]
    test = [p for p, s in zip(pairs, sim["splits"]) if s == "test"]
    rmse_test = compare_pdp([p[0] for p in test], [p[1] for p in test])
    rmse_all = compare_pdp([p[0] for p in pairs], [p[1] for p in pairs])

    los_exact = True
    for cir in sim["truth"] + sim["recognized"]:
        tx_rx = [p for p in cir.paths if p.kind == "los"]
        first = ch.pdp(cir, params).delay_bins[0]
        if first != cir.tau_los or (tx_rx and tx_rx[0].delay != cir.tau_los):
            los_exact = False

    # consistency: paths sharing an identity across adjacent snapshots
    bound = sim["bound_speed"] / ch.SPEED_OF_LIGHT * sim["dt"] + 1e-12
    worst, pairs_checked, peak_drift = 0.0, 0, 0.0
    truth = sim["truth"]
    for a, b in zip(truth[:-1], truth[1:]):
        da = {p.key: p.delay for p in a.paths}
        for p in b.paths:
            if p.key in da:
                worst = max(worst, abs(p.delay - da[p.key]))
                pairs_checked += 1
        pa = max(a.paths, key=lambda p: p.power)
        pb = max(b.paths, key=lambda p: p.power)
        if pa.key == pb.key:
            peak_drift = max(peak_drift, abs(pb.delay - pa.delay))
    return {
        "rmse_db_test": rmse_test,
        "rmse_db_all": rmse_all,
        "los_bin_exact": los_exact,
        "drift_bound_s": bound,
        "max_path_drift_s": worst,
        "max_peak_drift_s": peak_drift,
        "drift_pairs": pairs_checked,
        "drift_ok": worst <= bound and peak_drift <= bound,
    }


# ---------------------------------------------------------------------------
# report artifacts


def _pdp_rows(sim, config: PipelineConfig):
    params = config.channel
    rows = []
    for model_name in ("recognized", "baseline", "truth"):
        for cir in sim[model_name]:
            p = ch.pdp(cir, params)
            for d, pw in zip(p.delay_bins, p.powers):
                rows.append([model_name, cir.snapshot_index, repr(float(d)), repr(float(pw))])
    return rows


def write_report_csvs(run_dir) -> list[Path]:
    """Plot-ready CSVs for the figure analogues from a finished run directory."""
    run_dir = Path(run_dir)
    try:
        report = json.loads((run_dir / "report.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read report in {run_dir}: {exc}") from exc
    written = []

    def emit(name, header, rows):
        path = run_dir / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        written.append(path)

    conds = report["evaluation"]["conditions"]
    emit(
        "fig4_accuracy.csv",
        ["layout", "vtd", "P", "n_all", "n_error", "clusters"],
        [[c["layout"], c["vtd"], c["P"], c["n_all"], c["n_error"], c["clusters"]] for c in conds.values()],
    )
    rows = [["all", "all", e, p] for e, p in report["evaluation"]["error_histogram"].items()]
    for c in conds.values():
        rows += [[c["layout"], c["vtd"], e, p] for e, p in c["error_histogram"].items()]
    emit("fig5_error_histogram.csv", ["layout", "vtd", "abs_error", "probability"], rows)
    emit(
        "fig6_counts.csv",
        ["link_id", "snapshot", "predicted_total", "truth_total"],
        report["evaluation"]["snapshot_totals"],
    )
    emit(
        "fig7_baseline.csv",
        ["layout", "vtd", "P", "baseline_P", "binary_accuracy", "baseline_binary_accuracy", "regression_accuracy"],
        [
            [c["layout"], c["vtd"], c["P"], c["baseline_P"], c["binary_accuracy"],
             c["baseline_binary_accuracy"], c["regression_accuracy"]]
            for c in conds.values()
        ],
    )
    pdp_path = run_dir / "pdp_series.csv"
    if pdp_path.exists():
        shutil.copyfile(pdp_path, run_dir / "fig8_pdp.csv")
        written.append(run_dir / "fig8_pdp.csv")
    return written


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_model(ckpt_path):
    try:
        return load_checkpoint(ckpt_path)
    except (OSError, ValueError, IndexError) as exc:
        raise DataError(f"cannot read checkpoint {ckpt_path}: {exc}") from exc


def run_train(data_dir, config: PipelineConfig, ckpt_path, log_path=None):
    _, links = load_dataset(data_dir, config)
    result = train_model(links, config)
    save_checkpoint(result.model, ckpt_path)
    if log_path is not None:
        write_training_log(result.history, log_path)
    return result


def run_eval(data_dir, ckpt_path, config: PipelineConfig | None = None) -> dict:
    config, links = load_dataset(data_dir, config)
    model = read_model(ckpt_path)
    return evaluate(model, links, config)


def run_simulate(data_dir, ckpt_path, link: str, out_dir, config: PipelineConfig | None = None) -> dict:
    """Channels of one link from ground truth, recognized and baseline scatterers."""
    config, links = load_dataset(data_dir, config)
    matches = [ld for ld in links if ld.entry.link_id == link]
    if not matches:
        raise DataError(f"unknown link {link!r}")
    model = read_model(ckpt_path)
    ratios = fit_visibility_regions(links, config)
    _, y_train = _samples(links, "train")
    sim = simulate_link(model, data_dir, matches[0].entry, config, ratios, y_train.astype(np.int64))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fid = pdp_fidelity(sim, config)
    ch.write_cir_csv(sim["truth"], out_dir / "cir_truth.csv")
    ch.write_cir_csv(sim["recognized"], out_dir / "cir_recognized.csv")
    with open(out_dir / "pdp_series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "snapshot", "delay_s", "power"])
        w.writerows(_pdp_rows(sim, config))
    _dump_json({"link": link, **fid}, out_dir / "pdp_fidelity.json")
    return fid


def run_pipeline(config: PipelineConfig, out_dir) -> dict:
    """Generate, train, evaluate and synthesize channels; write every artifact.

    The run directory is removed again if any stage fails.
    """
    out_dir = Path(out_dir)
    fresh = not out_dir.exists()
    out_dir.mkdir(parents=True, exist_ok=True)
    data_dir = out_dir / "data"
    try:
        generate_dataset(config, data_dir)
        _, links = load_dataset(data_dir, config)
        split_counts = {s: sum(ld.splits.count(s) for ld in links) for s in SPLITS}
        result = train_model(links, config)
        save_checkpoint(result.model, out_dir / "model.ckpt")
        write_training_log(result.history, out_dir / "training_log.csv")
        model = load_checkpoint(out_dir / "model.ckpt")
        evaluation = evaluate(model, links, config)

        pdp_entry = [
            ld.entry
            for ld in links
            if (ld.entry.layout, ld.entry.vtd) == (config.pdp_layout, config.pdp_vtd)
        ]
        channel_report = None
        if pdp_entry:
            entry = pdp_entry[min(config.pdp_link, len(pdp_entry) - 1)]
            _, y_train = _samples(links, "train")
            sim = simulate_link(model, data_dir, entry, config, evaluation["vr_ratios"], y_train.astype(np.int64))
            channel_report = {"link": entry.link_id, **pdp_fidelity(sim, config)}
            conservation = 0.0
            for cir in sim["truth"] + sim["recognized"] + sim["baseline"]:
                conservation = max(
                    conservation,
                    abs(sum(p.power for p in cir.paths) - 1.0),
                    abs(float(ch.pdp(cir, config.channel).powers.sum()) - 1.0),
                )
            channel_report["max_power_error"] = conservation
            ch.write_cir_csv(sim["truth"], out_dir / "cir_truth.csv")
            ch.write_cir_csv(sim["recognized"], out_dir / "cir_recognized.csv")
            with open(out_dir / "pdp_series.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["model", "snapshot", "delay_s", "power"])
                w.writerows(_pdp_rows(sim, config))

        report = {
            "config": config_to_dict(config),
            "split_counts": split_counts,
            "training": {
                "best_epoch": result.best_epoch,
                "final_train_mse": result.history[-1].train_mse,
                "best_val_mse": min(h.val_mse for h in result.history),
            },
            "evaluation": evaluation,
            "channel": channel_report,
        }
        _dump_json(report, out_dir / "report.json")
        write_report_csvs(out_dir)
        return report
    except BaseException:
        if fresh:
            shutil.rmtree(out_dir, ignore_errors=True)
        else:
            for name in ("data", "model.ckpt", "training_log.csv", "report.json", "pdp_series.csv"):
                p = out_dir / name
                if p.is_dir():
                    shutil.rmtree(p, ignore_errors=True)
                elif p.exists():
                    p.unlink()
        raise


def finite_report(report: dict) -> bool:
    """True when every float in the report is finite (NaN would break bit-identity checks)."""

    def walk(x):
        if isinstance(x, float):
            return math.isfinite(x)
        if isinstance(x, dict):
            return all(walk(v) for v in x.values())
        if isinstance(x, (list, tuple)):
            return all(walk(v) for v in x)
        return True

    return walk(report)
