"""Single-bounce geometric-optics oracle (image method).

Produces the ground-truth scatterers and link state that the recognizer is
trained against and that the reference channel is synthesized from.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import segments_hit_boxes
from .scenegen import Scene, TransceiverPose

DEFAULT_REFLECTION_LOSS = {"building": 6.0, "car": 3.0, "bus": 3.0, "tree": 10.0}

# face index -> (local axis, sign); 0..5 = +x, -x, +y, -y, +z, -z
FACES = tuple((axis, sign) for axis in range(3) for sign in (1.0, -1.0))


@dataclass(frozen=True)
class Scatterer:
    position: np.ndarray
    kind: str
    source_object_id: int
    reflection_loss: float
    face: int = -1

    def to_dict(self) -> dict:
        return {
            "position": [float(v) for v in self.position],
            "kind": self.kind,
            "source_object_id": self.source_object_id,
            "reflection_loss": self.reflection_loss,
            "face": self.face,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scatterer":
        return cls(
            position=np.asarray(d["position"], dtype=float),
            kind=d["kind"],
            source_object_id=int(d["source_object_id"]),
            reflection_loss=float(d["reflection_loss"]),
            face=int(d.get("face", -1)),
        )


@dataclass(frozen=True)
class GroundTruth:
    snapshot_index: int
    scatterers: tuple[Scatterer, ...]
    los_blocked: bool
    tx: np.ndarray
    rx: np.ndarray
    ground_point: np.ndarray | None = None

    def of_kind(self, kind: str) -> list[Scatterer]:
        return [s for s in self.scatterers if s.kind == kind]

    def to_dict(self) -> dict:
        return {
            "snapshot": self.snapshot_index,
            "los_blocked": self.los_blocked,
            "tx": [float(v) for v in self.tx],
            "rx": [float(v) for v in self.rx],
            "ground_point": None if self.ground_point is None else [float(v) for v in self.ground_point],
            "scatterers": [s.to_dict() for s in self.scatterers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        gp = d.get("ground_point")
        return cls(
            snapshot_index=int(d["snapshot"]),
            scatterers=tuple(Scatterer.from_dict(s) for s in d["scatterers"]),
            los_blocked=bool(d["los_blocked"]),
            tx=np.asarray(d["tx"], dtype=float),
            rx=np.asarray(d["rx"], dtype=float),
            ground_point=None if gp is None else np.asarray(gp, dtype=float),
        )


def _blockers(scene: Scene):
    return scene.boxes(include_ground=False)


def los_blocked(scene: Scene, tx, rx) -> bool:
    """True iff the Tx-Rx segment passes through the interior of any non-ground object."""
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    if np.array_equal(tx, rx):
        raise ValueError("Tx and Rx must not coincide")
    _, centers, halves, yaws = _blockers(scene)
    return bool(segments_hit_boxes(tx[None], rx[None], centers, halves, yaws).any())


def face_frames(center, half, yaw):
    """World-frame (normals, plane points, in-plane axes) for the six faces of a box."""
    c, s = np.cos(yaw), np.sin(yaw)
    axes = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    normals, points, tangents = [], [], []
    for axis, sign in FACES:
        n = sign * axes[axis]
        normals.append(n)
        points.append(np.asarray(center) + sign * half[axis] * axes[axis])
        others = [a for a in range(3) if a != axis]
        tangents.append([(axes[a], half[a]) for a in others])
    return np.array(normals), np.array(points), tangents


def specular_point(tx, rx, normal, plane_point):
    """Reflection point on an infinite plane, or None if Tx and Rx are not both in front."""
    d_tx = float(np.dot(tx - plane_point, normal))
    d_rx = float(np.dot(rx - plane_point, normal))
    if d_tx <= 0.0 or d_rx <= 0.0:
        return None
    image = tx - 2.0 * d_tx * normal
    s = d_tx / (d_tx + d_rx)
    return image + s * (rx - image)


def ground_reflection_point(tx, rx):
    """Specular point on the ground plane z = 0 (None if either end is not above it)."""
    return specular_point(np.asarray(tx, float), np.asarray(rx, float), np.array([0.0, 0.0, 1.0]), np.zeros(3))


def trace_ground_truth(
    scene: Scene,
    pose: TransceiverPose,
    reflection_loss: dict | None = None,
    tol: float = 1e-9,
) -> GroundTruth:
    """First-order specular scatterers for one link at the scene's snapshot."""
    losses = {**DEFAULT_REFLECTION_LOSS, **(reflection_loss or {})}
    tx, rx = pose.tx_position, pose.rx_position
    if tx[2] <= 0 or rx[2] <= 0:
        raise ValueError("Tx and Rx must be above the ground")
    ids, centers, halves, yaws = _blockers(scene)

    candidates = []
    for k, obj_id in enumerate(ids):
        normals, points, tangents = face_frames(centers[k], halves[k], yaws[k])
        for f in range(6):
            p = specular_point(tx, rx, normals[f], points[f])
            if p is None:
                continue
            rel = p - points[f]
            if all(abs(float(np.dot(rel, axis))) <= h + tol for axis, h in tangents[f]):
                candidates.append((int(obj_id), f, p))

    scatterers = []
    if candidates:
        pts = np.array([c[2] for c in candidates])
        n = len(pts)
        starts = np.concatenate([np.repeat(tx[None], n, 0), pts])
        ends = np.concatenate([pts, np.repeat(rx[None], n, 0)])
        hits = segments_hit_boxes(starts, ends, centers, halves, yaws).any(axis=1)
        clear = ~(hits[:n] | hits[n:])
        for (obj_id, f, p), ok in zip(candidates, clear):
            if not ok:
                continue
            obj = scene.by_id(obj_id)
            scatterers.append(
                Scatterer(
                    position=p,
                    kind="dynamic" if obj.is_vehicle else "static",
                    source_object_id=obj_id,
                    reflection_loss=float(losses[obj.kind]),
                    face=f,
                )
            )

    gp = ground_reflection_point(tx, rx)
    if gp is not None:
        legs = segments_hit_boxes(np.array([tx, gp]), np.array([gp, rx]), centers, halves, yaws)
        if legs.any():
            gp = None
    return GroundTruth(
        snapshot_index=scene.snapshot_index,
        scatterers=tuple(scatterers),
        los_blocked=los_blocked(scene, tx, rx),
        tx=tx.copy(),
        rx=rx.copy(),
        ground_point=gp,
    )


def write_ground_truths(gts, path) -> None:
    """One JSON object per line, one line per snapshot."""
    with open(path, "w") as fh:
        for gt in gts:
            fh.write(json.dumps(gt.to_dict()) + "\n")


def read_ground_truths(path) -> list[GroundTruth]:
    with open(path) as fh:
        return [GroundTruth.from_dict(json.loads(line)) for line in fh if line.strip()]
