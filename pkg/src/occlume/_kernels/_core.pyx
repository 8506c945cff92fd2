# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: FPS, k-NN, nearest neighbor, z-buffer scatter.

Arithmetic order and tie-breaking mirror occlume._kernels._numpy exactly so
results are bitwise-identical across backends.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, floor

cnp.import_array()


def farthest_point_sample(points, Py_ssize_t m, Py_ssize_t start=0):
    cdef double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0]
    out = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] sel = out
    best_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] best = best_arr
    cdef Py_ssize_t i, j, arg
    cdef double px, py, pz, dx, dy, dz, d, bmax

    sel[0] = start
    px = pts[start, 0]; py = pts[start, 1]; pz = pts[start, 2]
    for j in range(n):
        dx = pts[j, 0] - px
        dy = pts[j, 1] - py
        dz = pts[j, 2] - pz
        best[j] = dx * dx + dy * dy + dz * dz
    best[start] = -1.0
    for i in range(1, m):
        arg = 0
        bmax = best[0]
        for j in range(1, n):
            if best[j] > bmax:
                bmax = best[j]
                arg = j
        sel[i] = arg
        px = pts[arg, 0]; py = pts[arg, 1]; pz = pts[arg, 2]
        for j in range(n):
            dx = pts[j, 0] - px
            dy = pts[j, 1] - py
            dz = pts[j, 2] - pz
            d = dx * dx + dy * dy + dz * dz
            if d < best[j]:
                best[j] = d
        best[arg] = -1.0
    return out


def knn(points, queries, Py_ssize_t k):
    cdef double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef double[:, ::1] qs = np.ascontiguousarray(queries, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t q = qs.shape[0]
    out = np.empty((q, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] idx = out
    bd_arr = np.empty(k, dtype=np.float64)
    bi_arr = np.empty(k, dtype=np.int64)
    cdef double[::1] bd = bd_arr
    cdef cnp.int64_t[::1] bi = bi_arr
    cdef Py_ssize_t i, j, p, cnt
    cdef double qx, qy, qz, dx, dy, dz, d

    for i in range(q):
        qx = qs[i, 0]; qy = qs[i, 1]; qz = qs[i, 2]
        cnt = 0
        for j in range(n):
            dx = pts[j, 0] - qx
            dy = pts[j, 1] - qy
            dz = pts[j, 2] - qz
            d = dx * dx + dy * dy + dz * dz
            if cnt < k:
                p = cnt
                while p > 0 and bd[p - 1] > d:
                    bd[p] = bd[p - 1]
                    bi[p] = bi[p - 1]
                    p -= 1
                bd[p] = d
                bi[p] = j
                cnt += 1
            elif d < bd[k - 1]:
                p = k - 1
                while p > 0 and bd[p - 1] > d:
                    bd[p] = bd[p - 1]
                    bi[p] = bi[p - 1]
                    p -= 1
                bd[p] = d
                bi[p] = j
        for p in range(k):
            idx[i, p] = bi[p]
    return out


def nearest_neighbor(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t na = av.shape[0]
    cdef Py_ssize_t nb = bv.shape[0]
    idx_out = np.empty(na, dtype=np.int64)
    d2_out = np.empty(na, dtype=np.float64)
    cdef cnp.int64_t[::1] idx = idx_out
    cdef double[::1] d2 = d2_out
    cdef Py_ssize_t i, j, besti
    cdef double ax, ay, az, dx, dy, dz, d, bestd

    for i in range(na):
        ax = av[i, 0]; ay = av[i, 1]; az = av[i, 2]
        bestd = INFINITY
        besti = 0
        for j in range(nb):
            dx = ax - bv[j, 0]
            dy = ay - bv[j, 1]
            dz = az - bv[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < bestd:
                bestd = d
                besti = j
        idx[i] = besti
        d2[i] = bestd
    return idx_out, d2_out


def zbuffer_scatter(cam, double fx, double fy, double u0, double v0,
                    Py_ssize_t width, Py_ssize_t height):
    cdef double[:, ::1] pts = np.ascontiguousarray(cam, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0]
    depth = np.full((height, width), np.inf, dtype=np.float64)
    cdef double[:, ::1] dep = depth
    cdef Py_ssize_t i, u, v
    cdef double z, uf, vf

    for i in range(n):
        z = pts[i, 2]
        if z <= 0.0:
            continue
        uf = floor(fx * pts[i, 0] / z + u0)
        vf = floor(fy * pts[i, 1] / z + v0)
        if uf < 0 or uf >= width or vf < 0 or vf >= height:
            continue
        u = <Py_ssize_t> uf
        v = <Py_ssize_t> vf
        if z < dep[v, u]:
            dep[v, u] = z
    return depth
