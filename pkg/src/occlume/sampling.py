"""Classical point-set algorithms: random sampling, farthest point sampling,
k-nearest neighbors, and the Chamfer distance (metric form).
"""

from dataclasses import dataclass

import numpy as np

from occlume import _kernels
from occlume.geomesh import PointCloud
from occlume.rng import generator


@dataclass
class IndexSelection:
    indices: np.ndarray  # (m,) int64
    source_size: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self):
        return len(self.indices)


def _points_of(pc) -> np.ndarray:
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    return np.ascontiguousarray(pts.reshape(-1, 3), dtype=np.float64)


def random_sample(pc, m: int, seed: int) -> IndexSelection:
    """m distinct uniformly-drawn indices, deterministic per seed."""
    pts = _points_of(pc)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= {n}, got {m}")
    rng = generator(seed, "rs")
    return IndexSelection(rng.choice(n, size=m, replace=False), n)


def farthest_point_sample(pc, m: int, start: int = 0) -> IndexSelection:
    """Greedy maximin selection; ties break toward the lowest index."""
    pts = _points_of(pc)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= {n}, got {m}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    return IndexSelection(_kernels.farthest_point_sample(pts, m, start), n)


def fps_canonical_start(pts: np.ndarray) -> int:
    """Index of the point farthest from the centroid.

    Anchoring FPS here makes the selection a function of the point set rather
    than of its ordering.
    """
    pts = _points_of(pts)
    d = pts - pts.mean(axis=0)
    return int(np.argmax(d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2))


def knn(pc, queries, k: int) -> np.ndarray:
    """(Q, k) nearest-point indices per query, sorted by (distance, index)."""
    pts = _points_of(pc)
    qs = _points_of(queries)
    if not 1 <= k <= pts.shape[0]:
        raise ValueError(f"need 1 <= k <= {pts.shape[0]}, got {k}")
    return _kernels.knn(pts, qs, k)


def chamfer_distance(p, q) -> float:
    """Symmetric mean squared nearest-neighbor distance between two sets."""
    a = _points_of(p)
    b = _points_of(q)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer distance needs non-empty clouds")
    _, d_ab = _kernels.nearest_neighbor(a, b)
    _, d_ba = _kernels.nearest_neighbor(b, a)
    return float(d_ab.mean() + d_ba.mean())
