"""Point-cloud preprocessing, DBSCAN clustering and circumscribed cuboids.

Point clouds are plain ``(N, 3)`` float arrays in the world frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

DEGENERATE_FLOOR = 0.01


@dataclass(frozen=True)
class Cluster:
    label: int
    member_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.member_indices)


@dataclass(frozen=True)
class ClusterCuboid:
    center: np.ndarray
    length: float
    width: float
    height: float
    orientation: np.ndarray  # (cos, sin) of the long side in the ground plane

    @property
    def angle(self) -> float:
        return math.atan2(self.orientation[1], self.orientation[0])

    @property
    def yaw_halves(self):
        return np.array([self.length, self.width, self.height]) / 2

    def contains(self, points, inflate: float = 0.0) -> np.ndarray:
        """Membership mask for points (N, 3) against the (optionally inflated) cuboid."""
        rel = np.atleast_2d(points) - self.center
        c, s = self.orientation
        u = rel[:, 0] * c + rel[:, 1] * s
        v = -rel[:, 0] * s + rel[:, 1] * c
        h = self.yaw_halves + inflate
        return (np.abs(u) <= h[0]) & (np.abs(v) <= h[1]) & (np.abs(rel[:, 2]) <= h[2])

    def to_dict(self) -> dict:
        return {
            "center": [float(v) for v in self.center],
            "length": float(self.length),
            "width": float(self.width),
            "height": float(self.height),
            "angle": self.angle,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterCuboid":
        a = float(d["angle"])
        return cls(
            center=np.asarray(d["center"], dtype=float),
            length=float(d["length"]),
            width=float(d["width"]),
            height=float(d["height"]),
            orientation=np.array([math.cos(a), math.sin(a)]),
        )


def concatenate(tx_cloud, rx_cloud) -> np.ndarray:
    return np.concatenate(
        [np.asarray(tx_cloud, float).reshape(-1, 3), np.asarray(rx_cloud, float).reshape(-1, 3)]
    )


def remove_ground(cloud, z_threshold: float = 0.2) -> np.ndarray:
    if z_threshold < 0:
        raise ValueError("z_threshold must be >= 0")
    cloud = np.asarray(cloud, float).reshape(-1, 3)
    return cloud[cloud[:, 2] > z_threshold]


def voxel_downsample(cloud, voxel: float = 0.3) -> np.ndarray:
    """Replace the points of every occupied voxel by their centroid.

    Output rows are ordered by voxel index (lexicographic in x, y, z).
    """
    if voxel <= 0:
        raise ValueError("voxel must be > 0")
    cloud = np.asarray(cloud, float).reshape(-1, 3)
    if len(cloud) == 0:
        return cloud.copy()
    keys = np.floor(cloud / voxel).astype(np.int64)
    keys -= keys.min(axis=0)
    span = keys.max(axis=0) + 1
    # mixed-radix code keeps the lexicographic (x, y, z) order of the cells
    code = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
    _, inverse, counts = np.unique(code, return_inverse=True, return_counts=True)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud)
    return sums / counts[:, None]


def dbscan(cloud, eps: float = 1.0, min_pts: int = 8):
    """Density-based clustering with a fixed point-index scan order.

    A point is core when its closed ``eps``-ball (itself included) holds at
    least ``min_pts`` points. Clusters are numbered in the order their
    lowest-index core point is met; a border point joins the lowest-numbered
    cluster among its core neighbours, which is the cluster that reaches it
    first in a sequential scan.

    Returns ``(clusters, noise_indices)``.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    cloud = np.asarray(cloud, float).reshape(-1, 3)
    n = len(cloud)
    if n == 0:
        return [], np.zeros(0, dtype=np.int64)
    tree = cKDTree(cloud)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    degree = np.bincount(rows, minlength=n) + 1
    core = degree >= min_pts

    labels = np.full(n, -1, dtype=np.int64)
    core_idx = np.nonzero(core)[0]
    if len(core_idx):
        both = core[rows] & core[cols]
        pos = np.full(n, -1, dtype=np.int64)
        pos[core_idx] = np.arange(len(core_idx))
        graph = coo_matrix(
            (np.ones(both.sum()), (pos[rows[both]], pos[cols[both]])),
            shape=(len(core_idx), len(core_idx)),
        )
        _, comp = connected_components(graph, directed=False)
        # renumber components by their lowest core index (scan order)
        first = np.full(comp.max() + 1, n, dtype=np.int64)
        np.minimum.at(first, comp, core_idx)
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        labels[core_idx] = rank[comp]

        border = ~core[rows] & core[cols]
        if border.any():
            b_rows, b_labels = rows[border], labels[cols[border]]
            best = np.full(n, np.iinfo(np.int64).max)
            np.minimum.at(best, b_rows, b_labels)
            has = best != np.iinfo(np.int64).max
            labels[has & ~core] = best[has & ~core]

    clusters = []
    if labels.max() >= 0:
        order = np.argsort(labels, kind="stable")
        sorted_labels = labels[order]
        bounds = np.searchsorted(sorted_labels, np.arange(labels.max() + 2))
        for lab in range(labels.max() + 1):
            clusters.append(Cluster(lab, order[bounds[lab] : bounds[lab + 1]]))
    noise = np.nonzero(labels < 0)[0]
    return clusters, noise


def convex_hull_2d(points) -> np.ndarray:
    """Counter-clockwise hull vertices (monotone chain), collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, float).reshape(-1, 2).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=float).reshape(-1, 2)

    def build(seq):
        chain = []
        for px, py in seq:
            while len(chain) >= 2:
                (ox, oy), (ax, ay) = chain[-2], chain[-1]
                if (ax - ox) * (py - oy) - (ay - oy) * (px - ox) > 0:
                    break
                chain.pop()
            chain.append((px, py))
        return chain

    lower, upper = build(pts), build(reversed(pts))
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def min_perimeter_rectangle(points):
    """Minimum-perimeter enclosing rectangle of planar points by rotating calipers.

    Returns ``(center_xy, length, width, angle)`` with ``length >= width`` and
    ``angle`` the direction of the long side in ``[0, pi)``; a square reports
    its side direction reduced to ``[0, pi/2)``.
    """
    hull = convex_hull_2d(points)
    if len(hull) == 1:
        return hull[0].copy(), 0.0, 0.0, 0.0
    if len(hull) == 2:
        d = hull[1] - hull[0]
        angle = math.atan2(d[1], d[0]) % math.pi
        return (hull[0] + hull[1]) / 2, float(np.hypot(*d)), 0.0, angle

    m = len(hull)
    hx, hy = hull[:, 0].tolist(), hull[:, 1].tolist()
    edges = np.roll(hull, -1, axis=0) - hull
    dirs = (edges / np.hypot(edges[:, 0], edges[:, 1])[:, None]).tolist()

    def advance(k, dx, dy):
        # projections along a fixed direction are unimodal around a convex polygon
        for _ in range(m):
            j = k + 1 if k + 1 < m else 0
            if hx[j] * dx + hy[j] * dy > hx[k] * dx + hy[k] * dy:
                k = j
            else:
                break
        return k

    ex, ey = dirs[0]
    right = int(np.argmax(hull @ (ex, ey)))
    top = int(np.argmax(hull @ (-ey, ex)))
    left = int(np.argmin(hull @ (ex, ey)))
    best = None
    for i in range(m):
        ex, ey = dirs[i]
        nx, ny = -ey, ex
        right = advance(right, ex, ey)
        top = advance(top, nx, ny)
        left = advance(left, -ex, -ey)
        lo_e = hx[left] * ex + hy[left] * ey
        base = hx[i] * nx + hy[i] * ny
        along = hx[right] * ex + hy[right] * ey - lo_e
        across = hx[top] * nx + hy[top] * ny - base
        perim = 2.0 * (along + across)
        if best is None or perim < best[0]:
            best = (perim, i, along, across, lo_e, base)

    _, i, along, across, lo_e, lo_n = best
    e = np.array(dirs[i])
    nrm = np.array([-e[1], e[0]])
    pe, pn = hull @ e, hull @ nrm
    scale = max(1.0, float(np.abs(hull).max()))
    if abs(np.ptp(pe) + np.ptp(pn) - along - across) > 1e-12 * scale:
        # numerically degenerate hull (sliver): pointers lost track, sweep every edge
        d = np.array(dirs)
        n = np.column_stack([-d[:, 1], d[:, 0]])
        pe_all, pn_all = hull @ d.T, hull @ n.T
        per = np.ptp(pe_all, axis=0) + np.ptp(pn_all, axis=0)
        i = int(np.argmin(per))
        e, nrm = d[i], n[i]
        pe, pn = pe_all[:, i], pn_all[:, i]
    along, across = float(np.ptp(pe)), float(np.ptp(pn))
    lo_e, lo_n = float(pe.min()), float(pn.min())
    center = e * (lo_e + along / 2) + nrm * (lo_n + across / 2)
    if along >= across:
        length, width, angle = along, across, math.atan2(e[1], e[0])
    else:
        length, width, angle = across, along, math.atan2(nrm[1], nrm[0])
    if math.isclose(length, width, rel_tol=1e-12, abs_tol=1e-12):
        angle %= math.pi / 2
    else:
        angle %= math.pi
    return center, float(length), float(width), angle


def fit_cuboid(cloud, cluster: Cluster) -> ClusterCuboid:
    """Circumscribed cuboid: minimum-perimeter footprint extruded over the cluster height."""
    if len(cluster.member_indices) == 0:
        raise ValueError("cannot fit a cuboid to an empty cluster")
    pts = np.asarray(cloud, float)[cluster.member_indices]
    center_xy, length, width, angle = min_perimeter_rectangle(pts[:, :2])
    z_lo, z_hi = pts[:, 2].min(), pts[:, 2].max()
    return ClusterCuboid(
        center=np.array([center_xy[0], center_xy[1], (z_lo + z_hi) / 2]),
        length=max(length, DEGENERATE_FLOOR),
        width=max(width, DEGENERATE_FLOOR),
        height=max(z_hi - z_lo, DEGENERATE_FLOOR),
        orientation=np.array([math.cos(angle), math.sin(angle)]),
    )


def write_cluster_dump(clusters, cuboids, path) -> None:
    """Text dump, one line per cluster: label, member count, center, l, w, h, angle."""
    with open(path, "w") as fh:
        fh.write("# label count cx cy cz length width height angle_rad\n")
        for cl, cb in zip(clusters, cuboids):
            cx, cy, cz = cb.center
            fh.write(
                f"{cl.label} {len(cl)} {cx:.9g} {cy:.9g} {cz:.9g} "
                f"{cb.length:.9g} {cb.width:.9g} {cb.height:.9g} {cb.angle:.9g}\n"
            )


def read_cluster_dump(path):
    """Inverse of :func:`write_cluster_dump`: list of ``(label, count, ClusterCuboid)``."""
    out = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            f = line.split()
            a = float(f[8])
            out.append(
                (
                    int(f[0]),
                    int(f[1]),
                    ClusterCuboid(
                        center=np.array([float(f[2]), float(f[3]), float(f[4])]),
                        length=float(f[5]),
                        width=float(f[6]),
                        height=float(f[7]),
                        orientation=np.array([math.cos(a), math.sin(a)]),
                    ),
                )
            )
    return out
