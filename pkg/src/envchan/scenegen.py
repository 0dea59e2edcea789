"""Procedural crossroad scenes and a ray-casting spinning LiDAR.

Scenes are worlds of cuboids: buildings lining the street(s), trees on the
sidewalks, cars and buses driving along straight lanes, and a single ground
slab whose top face is the plane z = 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import cast_rays

LAYOUTS = ("vertical", "horizontal", "crossing")
VTDS = ("low", "medium", "high")
KINDS = ("building", "car", "bus", "tree", "ground")
VEHICLE_KINDS = ("car", "bus")


@dataclass(frozen=True)
class SceneObject:
    id: int
    kind: str
    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float = 0.0
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown object kind {self.kind!r}")
        if min(self.dims) <= 0:
            raise ValueError(f"object {self.id}: dims must be strictly positive")
        if self.kind not in VEHICLE_KINDS and any(self.velocity):
            raise ValueError(f"object {self.id}: {self.kind} cannot move")

    @property
    def is_vehicle(self) -> bool:
        return self.kind in VEHICLE_KINDS

    @property
    def top(self) -> float:
        return self.center[2] + self.dims[2] / 2

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "center": list(self.center),
            "dims": list(self.dims),
            "yaw": self.yaw,
            "velocity": list(self.velocity),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(
            id=int(d["id"]),
            kind=d["kind"],
            center=tuple(float(v) for v in d["center"]),
            dims=tuple(float(v) for v in d["dims"]),
            yaw=float(d.get("yaw", 0.0)),
            velocity=tuple(float(v) for v in d.get("velocity", (0.0, 0.0, 0.0))),
        )


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    layout: str
    vtd: str
    seed: int = 0
    snapshot_index: int = 0
    snapshot_period: float = 0.1
    links: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        grounds = [o for o in self.objects if o.kind == "ground"]
        if len(grounds) != 1:
            raise ValueError("a scene needs exactly one ground object")

    def by_id(self, object_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)

    @property
    def vehicles(self) -> list[SceneObject]:
        return [o for o in self.objects if o.is_vehicle]

    def boxes(self, include_ground: bool = True, exclude=()):
        """Box arrays ``(ids, centers, halves, yaws)`` for the geometry kernels."""
        objs = [
            o
            for o in self.objects
            if (include_ground or o.kind != "ground") and o.id not in exclude
        ]
        ids = np.array([o.id for o in objs], dtype=np.int64)
        centers = np.array([o.center for o in objs], dtype=float).reshape(-1, 3)
        halves = np.array([o.dims for o in objs], dtype=float).reshape(-1, 3) / 2
        yaws = np.array([o.yaw for o in objs], dtype=float)
        return ids, centers, halves, yaws

    def bounds(self):
        """Axis-aligned (lo, hi) corners of the ground slab, z up to the tallest object."""
        ground = next(o for o in self.objects if o.kind == "ground")
        lo = np.array(ground.center) - np.array(ground.dims) / 2
        hi = np.array(ground.center) + np.array(ground.dims) / 2
        hi[2] = max(o.top for o in self.objects) + 50.0
        return lo, hi

    def to_dict(self) -> dict:
        return {
            "layout": self.layout,
            "vtd": self.vtd,
            "seed": self.seed,
            "snapshot_index": self.snapshot_index,
            "snapshot_period": self.snapshot_period,
            "links": [list(link) for link in self.links],
            "objects": [o.to_dict() for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            objects=tuple(SceneObject.from_dict(o) for o in d["objects"]),
            layout=d["layout"],
            vtd=d["vtd"],
            seed=int(d["seed"]),
            snapshot_index=int(d.get("snapshot_index", 0)),
            snapshot_period=float(d.get("snapshot_period", 0.1)),
            links=tuple(tuple(int(v) for v in link) for link in d.get("links", ())),
        )


@dataclass(frozen=True)
class LidarConfig:
    channels: int = 16
    scan_rate: float = 10.0
    points_per_second: int = 240_000
    fov_up: float = 15.0
    fov_down: float = -25.0
    max_range: float = 100.0
    # sensor height above the host vehicle roof
    mount_height: float = 0.3
    range_noise: float = 0.0

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if not self.fov_down < self.fov_up:
            raise ValueError("fov_down must be below fov_up")
        if self.points_per_second % self.channels:
            raise ValueError("points_per_second must be divisible by channels")
        if self.scan_rate <= 0 or self.max_range <= 0 or self.range_noise < 0:
            raise ValueError("scan_rate and max_range must be positive, range_noise >= 0")

    @property
    def azimuth_steps(self) -> int:
        return int(round(self.points_per_second / self.scan_rate / self.channels))

    def elevations(self) -> np.ndarray:
        """Channel elevation angles in radians, evenly spanning the vertical FoV."""
        if self.channels == 1:
            return np.radians([(self.fov_up + self.fov_down) / 2])
        return np.radians(np.linspace(self.fov_down, self.fov_up, self.channels))


@dataclass(frozen=True)
class TransceiverPose:
    tx_position: np.ndarray
    rx_position: np.ndarray
    tx_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rx_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("tx_position", "rx_position", "tx_velocity", "rx_velocity"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.array_equal(self.tx_position, self.rx_position):
            raise ValueError("Tx and Rx must not coincide")

    def to_dict(self) -> dict:
        return {
            "tx_position": self.tx_position.tolist(),
            "rx_position": self.rx_position.tolist(),
            "tx_velocity": self.tx_velocity.tolist(),
            "rx_velocity": self.rx_velocity.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransceiverPose":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


@dataclass(frozen=True)
class SceneConfig:
    """Knobs of the procedural generator. Defaults are placeholders, not measured values."""

    road_half_width: float = 7.0
    sidewalk: float = 3.0
    extent: float = 150.0
    lane_offsets: tuple[float, ...] = (-5.25, -1.75, 1.75, 5.25)
    vtd_counts: tuple[tuple[str, int], ...] = (("low", 4), ("medium", 10), ("high", 20))
    link_vehicles: int = 4
    link_span: float = 30.0
    traffic_span: float = 70.0
    speed_range: tuple[float, float] = (1.5, 4.0)
    bus_fraction: float = 0.25
    car_dims: tuple[float, float, float] = (4.5, 1.8, 2.0)
    bus_dims: tuple[float, float, float] = (12.0, 2.5, 3.0)
    tree_dims: tuple[float, float, float] = (1.0, 1.0, 6.0)
    tree_spacing: float = 15.0
    tree_offset: float = 8.5
    building_length: tuple[float, float] = (12.0, 35.0)
    building_depth: tuple[float, float] = (10.0, 20.0)
    building_height: tuple[float, float] = (10.0, 30.0)
    building_gap: tuple[float, float] = (2.0, 6.0)
    snapshot_period: float = 0.1

    def vehicle_count(self, vtd: str) -> int:
        return dict(self.vtd_counts)[vtd]

    @property
    def building_front(self) -> float:
        return self.road_half_width + self.sidewalk


def _streets(layout: str) -> list[int]:
    # street axis: 0 runs along x, 1 runs along y
    return {"vertical": [0], "horizontal": [1], "crossing": [0, 1]}[layout]


def _footprint(center, dims, yaw):
    """Axis-aligned footprint (xmin, xmax, ymin, ymax) of a yawed box."""
    c, s = abs(math.cos(yaw)), abs(math.sin(yaw))
    hx = (dims[0] * c + dims[1] * s) / 2
    hy = (dims[0] * s + dims[1] * c) / 2
    return center[0] - hx, center[0] + hx, center[1] - hy, center[1] + hy


def _overlaps(a, b, margin=0.0):
    return not (
        a[1] + margin <= b[0] or b[1] + margin <= a[0] or a[3] + margin <= b[2] or b[3] + margin <= a[2]
    )


def _in_corridor(fp, streets, cfg: SceneConfig):
    for axis in streets:
        # a street along x occupies |y| < front; along y occupies |x| < front
        lo, hi = (fp[2], fp[3]) if axis == 0 else (fp[0], fp[1])
        if hi > -cfg.building_front and lo < cfg.building_front:
            return True
    return False


def _place_buildings(rng, streets, cfg: SceneConfig):
    placed = []
    for axis in streets:
        for side in (-1.0, 1.0):
            s = -cfg.extent + rng.uniform(0.0, cfg.building_gap[1])
            while s < cfg.extent:
                length = rng.uniform(*cfg.building_length)
                depth = rng.uniform(*cfg.building_depth)
                height = rng.uniform(*cfg.building_height)
                gap = rng.uniform(*cfg.building_gap)
                along = s + length / 2
                across = side * (cfg.building_front + depth / 2)
                if axis == 0:
                    center, dims = (along, across, height / 2), (length, depth, height)
                else:
                    center, dims = (across, along, height / 2), (depth, length, height)
                fp = _footprint(center, dims, 0.0)
                if not _in_corridor(fp, streets, cfg) and not any(
                    _overlaps(fp, other[2], margin=1.0) for other in placed
                ):
                    placed.append((center, dims, fp))
                s += length + gap
    return [(c, d) for c, d, _ in placed]


def _place_trees(rng, streets, cfg: SceneConfig, buildings):
    trees = []
    building_fps = [_footprint(c, d, 0.0) for c, d in buildings]
    for axis in streets:
        for side in (-1.0, 1.0):
            s = -cfg.extent + rng.uniform(0.0, cfg.tree_spacing)
            while s < cfg.extent:
                across = side * cfg.tree_offset
                xy = (s, across) if axis == 0 else (across, s)
                center = (xy[0], xy[1], cfg.tree_dims[2] / 2)
                fp = _footprint(center, cfg.tree_dims, 0.0)
                other = [a for a in streets if a != axis]
                if not _in_corridor(fp, other, cfg) and not any(
                    _overlaps(fp, b, margin=0.5) for b in building_fps
                ):
                    trees.append(center)
                s += cfg.tree_spacing
    return trees


def _lane_speeds(rng, streets, cfg: SceneConfig):
    speeds = {}
    for axis in streets:
        for lane in range(len(cfg.lane_offsets)):
            speeds[(axis, lane)] = rng.uniform(*cfg.speed_range)
    return speeds


def _place_vehicles(rng, streets, cfg: SceneConfig, n_total: int):
    speeds = _lane_speeds(rng, streets, cfg)
    vehicles = []
    fps = []
    k = 0
    attempts = 0
    while len(vehicles) < n_total and attempts < 10_000:
        attempts += 1
        is_link = len(vehicles) < cfg.link_vehicles
        if len(streets) == 2 and is_link:
            axis = streets[0] if len(vehicles) < cfg.link_vehicles // 2 else streets[1]
        else:
            axis = streets[int(rng.integers(len(streets)))]
        lane = int(rng.integers(len(cfg.lane_offsets)))
        span = cfg.link_span if is_link else cfg.traffic_span
        s = rng.uniform(-span, span)
        kind = "car" if is_link or rng.uniform() >= cfg.bus_fraction else "bus"
        offset = cfg.lane_offsets[lane]
        # lanes left of the centerline run in +s, right of it in -s
        direction = 1.0 if offset < 0 else -1.0
        speed = speeds[(axis, lane)] * direction
        dims = cfg.car_dims if kind == "car" else cfg.bus_dims
        if axis == 0:
            center = (s, offset, dims[2] / 2)
            yaw = 0.0 if direction > 0 else math.pi
            velocity = (speed, 0.0, 0.0)
        else:
            center = (-offset, s, dims[2] / 2)
            yaw = math.pi / 2 if direction > 0 else -math.pi / 2
            velocity = (0.0, speed, 0.0)
        fp = _footprint(center, dims, yaw)
        if any(_overlaps(fp, other, margin=2.0) for other in fps):
            continue
        # keep cross traffic out of the intersection box at t = 0
        if len(streets) == 2 and _in_corridor(fp, [a for a in streets if a != axis], cfg):
            continue
        fps.append(fp)
        vehicles.append((kind, center, dims, yaw, velocity))
        k += 1
    return vehicles


def build_scene(layout: str, vtd: str, seed: int, config: SceneConfig | None = None) -> Scene:
    """Deterministic crossroad scene for a street layout and traffic density.

    Static geometry and the first vehicles depend only on ``(layout, seed)``;
    denser traffic appends vehicles, so every VTD level shares the same
    transceiver links and vehicle counts grow monotonically from low to high.
    """
    cfg = config or SceneConfig()
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}")
    if vtd not in VTDS:
        raise ValueError(f"unknown vtd {vtd!r}")
    streets = _streets(layout)
    layout_key = LAYOUTS.index(layout)
    rng_static = np.random.default_rng([seed, layout_key, 0])
    rng_traffic = np.random.default_rng([seed, layout_key, 1])

    buildings = _place_buildings(rng_static, streets, cfg)
    trees = _place_trees(rng_static, streets, cfg, buildings)
    n_max = max(n for _, n in cfg.vtd_counts)
    vehicles = _place_vehicles(rng_traffic, streets, cfg, n_max)[: cfg.vehicle_count(vtd)]

    size = 2 * (cfg.extent + 60.0)
    objects = [SceneObject(0, "ground", (0.0, 0.0, -0.05), (size, size, 0.1))]
    for kind, center, dims, yaw, velocity in vehicles:
        objects.append(SceneObject(len(objects), kind, center, dims, yaw, velocity))
    for center, dims in buildings:
        objects.append(SceneObject(len(objects), "building", center, dims))
    for center in trees:
        objects.append(SceneObject(len(objects), "tree", center, cfg.tree_dims))

    link_ids = [o.id for o in objects[1 : 1 + cfg.link_vehicles]]
    links = tuple(
        (link_ids[i], link_ids[j]) for i in range(len(link_ids)) for j in range(i + 1, len(link_ids))
    )
    return Scene(
        objects=tuple(objects),
        layout=layout,
        vtd=vtd,
        seed=seed,
        snapshot_period=cfg.snapshot_period,
        links=links,
    )


def advance_scene(scene: Scene, n: int) -> Scene:
    """Move dynamic objects forward by ``n`` snapshots of straight-line motion."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return scene
    dt = n * scene.snapshot_period
    moved = tuple(
        replace(o, center=tuple(c + v * dt for c, v in zip(o.center, o.velocity))) if o.is_vehicle else o
        for o in scene.objects
    )
    return replace(scene, objects=moved, snapshot_index=scene.snapshot_index + n)


def vehicle_count(scene: Scene) -> int:
    return len(scene.vehicles)


def transceiver_pose(scene: Scene, link: tuple[int, int], lidar: LidarConfig | None = None) -> TransceiverPose:
    """Antenna pose for a link; antennas sit with the LiDAR above each vehicle roof."""
    mount = (lidar or LidarConfig()).mount_height
    tx, rx = scene.by_id(link[0]), scene.by_id(link[1])
    return TransceiverPose(
        tx_position=np.array([tx.center[0], tx.center[1], tx.top + mount]),
        rx_position=np.array([rx.center[0], rx.center[1], rx.top + mount]),
        tx_velocity=np.array(tx.velocity),
        rx_velocity=np.array(rx.velocity),
    )


def sensor_position(scene: Scene, vehicle_id: int, lidar: LidarConfig | None = None) -> np.ndarray:
    v = scene.by_id(vehicle_id)
    return np.array([v.center[0], v.center[1], v.top + (lidar or LidarConfig()).mount_height])


def lidar_directions(config: LidarConfig) -> np.ndarray:
    """Unit ray directions ordered channel-major, azimuth-minor."""
    el = config.elevations()[:, None]
    az = 2 * np.pi * np.arange(config.azimuth_steps)[None, :] / config.azimuth_steps
    dirs = np.stack(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.broadcast_to(np.sin(el), (el.shape[0], az.shape[1]))],
        axis=-1,
    )
    return dirs.reshape(-1, 3)


def _box_ray_window(sensor, center, half, yaw, config: LidarConfig):
    """Channel and azimuth index ranges whose rays can reach a box.

    Returns ``None`` when the box lies outside the vertical FoV or beyond
    max range, else ``(ch_lo, ch_hi, az_indices)``.
    """
    c, s = math.cos(yaw), math.sin(yaw)
    hx, hy, hz = half
    rel = np.array(center[:2]) - sensor[:2]
    corners = rel + np.array(
        [[c * sx * hx - s * sy * hy, s * sx * hx + c * sy * hy] for sx in (-1, 1) for sy in (-1, 1)]
    )
    # nearest/farthest horizontal distance from the sensor to the footprint
    local = np.array([c * -rel[0] + s * -rel[1], -s * -rel[0] + c * -rel[1]])
    r_min = math.hypot(max(abs(local[0]) - hx, 0.0), max(abs(local[1]) - hy, 0.0))
    r_max = float(np.max(np.hypot(corners[:, 0], corners[:, 1])))
    z_lo = center[2] - hz - sensor[2]
    z_hi = center[2] + hz - sensor[2]
    if math.hypot(r_min, min(abs(z_lo), abs(z_hi)) if z_lo * z_hi > 0 else 0.0) > config.max_range:
        return None
    el_lo = math.atan2(z_lo, r_min if z_lo < 0 else r_max)
    el_hi = math.atan2(z_hi, r_min if z_hi > 0 else r_max)
    elev = config.elevations()
    ch = np.nonzero((elev >= el_lo - 1e-9) & (elev <= el_hi + 1e-9))[0]
    if len(ch) == 0:
        return None
    n_az = config.azimuth_steps
    step = 2 * np.pi / n_az
    if r_min == 0.0:
        az = np.arange(n_az)
    else:
        mid = math.atan2(rel[1], rel[0])
        ang = np.arctan2(corners[:, 1], corners[:, 0]) - mid
        ang = (ang + np.pi) % (2 * np.pi) - np.pi
        a0 = mid + ang.min()
        a1 = mid + ang.max()
        k0 = math.floor(a0 / step) - 1
        k1 = math.ceil(a1 / step) + 1
        az = np.arange(k0, k1 + 1) % n_az
        az = np.unique(az)
    return int(ch[0]), int(ch[-1]), az


def _cast_sweep(scene: Scene, sensor, dirs, config: LidarConfig, exclude):
    """Nearest hits for the full ray grid, testing each box only against rays in its window."""
    n_az = config.azimuth_steps
    best_t = np.full(len(dirs), np.inf)
    best_i = np.full(len(dirs), -1, dtype=np.int64)
    for k, obj in enumerate(scene.objects):
        if obj.id in exclude:
            continue
        center = np.array(obj.center)
        half = np.array(obj.dims) / 2
        if obj.kind == "ground":
            # the slab is far wider than max range; only its top face matters
            top = center[2] + half[2]
            down = dirs[:, 2] < 0
            t = np.full(len(dirs), np.inf)
            t[down] = (top - sensor[2]) / dirs[down, 2]
            t[(t < 0) | (t > config.max_range)] = np.inf
            better = t < best_t
            best_t[better] = t[better]
            best_i[better] = k
            continue
        window = _box_ray_window(sensor, center, half, obj.yaw, config)
        if window is None:
            continue
        ch_lo, ch_hi, az = window
        rays = (np.arange(ch_lo, ch_hi + 1)[:, None] * n_az + az[None, :]).ravel()
        t, i = cast_rays(sensor, dirs[rays], center[None], half[None], np.array([obj.yaw]), config.max_range)
        better = t < best_t[rays]
        best_t[rays[better]] = t[better]
        best_i[rays[better]] = k
    return best_t, best_i


def simulate_lidar(
    scene: Scene,
    sensor: np.ndarray,
    config: LidarConfig | None = None,
    seed: int = 0,
    exclude=(),
) -> np.ndarray:
    """One full sweep of a spinning LiDAR at ``sensor``.

    Returns the nearest-hit points (N, 3). Objects in ``exclude`` (typically
    the host vehicle) are transparent. Range noise, when configured, is drawn
    from a generator seeded by ``seed``.
    """
    config = config or LidarConfig()
    sensor = np.asarray(sensor, dtype=float)
    lo, hi = scene.bounds()
    if np.any(sensor < lo) or np.any(sensor > hi):
        raise ValueError("sensor lies outside the scene bounds")
    dirs = lidar_directions(config)
    t, idx = _cast_sweep(scene, sensor, dirs, config, exclude)
    hit = idx >= 0
    t = t[hit]
    if config.range_noise > 0:
        rng = np.random.default_rng(seed)
        t = np.clip(t + rng.normal(0.0, config.range_noise, size=t.shape), 0.0, config.max_range)
    return sensor + dirs[hit] * t[:, None]


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=1))


def load_scene(path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text()))


def write_cloud(points: np.ndarray, path) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write(f"# count={len(points)}\n")
        for x, y, z in points:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_cloud(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("# count="):
            raise ValueError(f"{path}: missing '# count=N' header")
        count = int(header.split("=", 1)[1])
        if count == 0:
            return np.zeros((0, 3))
        data = np.loadtxt(fh, dtype=float, ndmin=2).reshape(-1, 3)
    if len(data) != count:
        raise ValueError(f"{path}: header says {count} points, found {len(data)}")
    return data
