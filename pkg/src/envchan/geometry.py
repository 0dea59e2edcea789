"""Vectorized ray/segment tests against yawed cuboids.

Cuboids are described by arrays ``centers`` (B, 3), ``halves`` (B, 3) holding
half-extents along the local length/width/height axes, and ``yaws`` (B,)
giving the rotation of the local x-axis about world z.
"""

from __future__ import annotations

import numpy as np


def to_local(points, centers, yaws):
    """Express world points in each box frame.

    ``points`` broadcasts against the leading box axis: (3,) -> (B, 3),
    (N, 3) -> (B, N, 3).
    """
    points = np.asarray(points, dtype=float)
    c = np.cos(yaws)
    s = np.sin(yaws)
    if points.ndim == 1:
        rel = points[None, :] - centers
        return np.stack(
            [c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1], rel[:, 2]],
            axis=-1,
        )
    rel = points[None, :, :] - centers[:, None, :]
    c = c[:, None]
    s = s[:, None]
    return np.stack(
        [c * rel[..., 0] + s * rel[..., 1], -s * rel[..., 0] + c * rel[..., 1], rel[..., 2]],
        axis=-1,
    )


def rotate_to_local(vectors, yaws):
    """Rotate direction vectors (N, 3) into every box frame -> (B, N, 3)."""
    vectors = np.asarray(vectors, dtype=float)
    c = np.cos(yaws)[:, None]
    s = np.sin(yaws)[:, None]
    return np.stack(
        [
            c * vectors[None, :, 0] + s * vectors[None, :, 1],
            -s * vectors[None, :, 0] + c * vectors[None, :, 1],
            np.broadcast_to(vectors[None, :, 2], c.shape[:1] + vectors.shape[:1]),
        ],
        axis=-1,
    )


def slab_interval(origin, direction, halves):
    """Parametric entry/exit of the line ``origin + t * direction`` through a box.

    All arguments are in box-local coordinates and broadcast together; the last
    axis holds x/y/z. Axes with zero direction either admit every t (origin
    inside that slab) or none.
    """
    origin, direction, halves = np.broadcast_arrays(origin, direction, halves)
    parallel = direction == 0.0
    safe = np.where(parallel, 1.0, direction)
    t1 = (-halves - origin) / safe
    t2 = (halves - origin) / safe
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    inside = np.abs(origin) <= halves
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    return lo.max(axis=-1), hi.min(axis=-1)


def cast_rays(origin, dirs, centers, halves, yaws, max_range=np.inf):
    """Nearest hit of rays from a single origin against a set of boxes.

    Returns ``(t, index)``; ``t`` is ``inf`` and ``index`` is -1 for rays that
    hit nothing within ``max_range``. Boxes containing the origin are ignored.
    """
    dirs = np.asarray(dirs, dtype=float)
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    if len(centers) == 0 or n == 0:
        return best_t, best_i
    o_loc = to_local(origin, centers, yaws)  # (B, 3)
    # chunk over boxes to bound temporary memory
    step = max(1, int(4_000_000 // max(n, 1)))
    for start in range(0, len(centers), step):
        sl = slice(start, start + step)
        d_loc = rotate_to_local(dirs, yaws[sl])  # (b, N, 3)
        t_in, t_out = slab_interval(o_loc[sl, None, :], d_loc, halves[sl, None, :])
        valid = (t_in <= t_out) & (t_in >= 0.0) & (t_in <= max_range)
        t_in = np.where(valid, t_in, np.inf)
        k = np.argmin(t_in, axis=0)
        t_k = t_in[k, np.arange(n)]
        better = t_k < best_t
        best_t[better] = t_k[better]
        best_i[better] = k[better] + start
    return best_t, best_i


def segments_hit_boxes(p0, p1, centers, halves, yaws, shrink=1e-9):
    """Whether each segment passes through the interior of each box.

    ``p0`` and ``p1`` are (S, 3). Boxes are shrunk by ``shrink`` so segments
    that only touch a surface (e.g. ending on a reflecting face) do not count.
    Returns a boolean array (S, B).
    """
    p0 = np.atleast_2d(np.asarray(p0, dtype=float))
    p1 = np.atleast_2d(np.asarray(p1, dtype=float))
    if len(centers) == 0:
        return np.zeros((p0.shape[0], 0), dtype=bool)
    o_loc = to_local(p0, centers, yaws)  # (B, S, 3)
    d_loc = rotate_to_local(p1 - p0, yaws)  # (B, S, 3)
    h = np.maximum(halves - shrink, 0.0)[:, None, :]
    t_in, t_out = slab_interval(o_loc, d_loc, h)
    lo = np.maximum(t_in, 0.0)
    hi = np.minimum(t_out, 1.0)
    return (lo < hi).T


def point_box_distance(points, center, half, yaw):
    """Euclidean distance from points (N, 3) to the surface of one box."""
    local = to_local(points, np.asarray(center, float)[None], np.array([yaw]))[0]
    q = np.abs(local) - np.asarray(half, float)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return np.abs(outside + inside)
