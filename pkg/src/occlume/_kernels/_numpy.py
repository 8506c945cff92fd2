"""Pure-numpy implementations of the hot kernels.

Semantics match the compiled core exactly: same squared-distance summation
order (dx*dx + dy*dy + dz*dz), same tie-breaking (lowest index wins), so the
two backends produce bitwise-identical results and either can serve as the
reference for the other.
"""

import numpy as np

BACKEND = "numpy"

# Above this many pairwise entries, nearest_neighbor chunks its query rows to
# bound memory; chunking does not change results.
_NN_CHUNK_ENTRIES = 16_000_000


def _sqdist_to(pts, p):
    dx = pts[:, 0] - p[0]
    dy = pts[:, 1] - p[1]
    dz = pts[:, 2] - p[2]
    return dx * dx + dy * dy + dz * dz


def farthest_point_sample(points, m, start=0):
    """Greedy maximin subset of `m` indices, ties broken by lowest index."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = pts.shape[0]
    sel = np.empty(m, dtype=np.int64)
    sel[0] = start
    best = _sqdist_to(pts, pts[start])
    best[start] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(best))
        sel[i] = nxt
        np.minimum(best, _sqdist_to(pts, pts[nxt]), out=best)
        best[nxt] = -1.0
    return sel


def knn(points, queries, k):
    """For each query, the k nearest point indices sorted by (distance, index)."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    qs = np.ascontiguousarray(queries, dtype=np.float64)
    out = np.empty((qs.shape[0], k), dtype=np.int64)
    for i in range(qs.shape[0]):
        d2 = _sqdist_to(pts, qs[i])
        out[i] = np.argsort(d2, kind="stable")[:k]
    return out


def nearest_neighbor(a, b):
    """Index into b of the nearest neighbor of each a row, plus squared distances."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    na = a.shape[0]
    idx = np.empty(na, dtype=np.int64)
    d2 = np.empty(na, dtype=np.float64)
    chunk = max(1, _NN_CHUNK_ENTRIES // max(1, b.shape[0]))
    for lo in range(0, na, chunk):
        hi = min(na, lo + chunk)
        dx = a[lo:hi, 0:1] - b[:, 0]
        dy = a[lo:hi, 1:2] - b[:, 1]
        dz = a[lo:hi, 2:3] - b[:, 2]
        dist = dx * dx + dy * dy + dz * dz
        arg = np.argmin(dist, axis=1)
        idx[lo:hi] = arg
        d2[lo:hi] = dist[np.arange(hi - lo), arg]
    return idx, d2


def zbuffer_scatter(cam, fx, fy, u0, v0, width, height):
    """Min-depth scatter of camera-space points onto a (height, width) grid.

    Points with z <= 0 or projecting off-image are dropped. Empty pixels hold
    +inf.
    """
    cam = np.ascontiguousarray(cam, dtype=np.float64)
    depth = np.full((height, width), np.inf, dtype=np.float64)
    z = cam[:, 2]
    front = z > 0.0
    if not front.any():
        return depth
    zf = z[front]
    u = np.floor(fx * cam[front, 0] / zf + u0)
    v = np.floor(fy * cam[front, 1] / zf + v0)
    ok = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    if not ok.any():
        return depth
    ui = u[ok].astype(np.int64)
    vi = v[ok].astype(np.int64)
    np.minimum.at(depth, (vi, ui), zf[ok])
    return depth
