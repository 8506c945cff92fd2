"""Procedural meshes for desk-scale experiments: spheres, boxes, and tori
with jittered proportions, plus a builder that lays them out like a mesh
dataset root (class/split/file.off).
"""

from pathlib import Path

import numpy as np

from occlume.geomesh import Mesh, write_off
from occlume.rng import generator

TOY_CLASSES = ("box", "sphere", "torus")


def _z_rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sphere_mesh(seed: int, stacks: int = 16, slices: int = 24) -> Mesh:
    rng = generator(seed, "sphere")
    scales = rng.uniform(0.75, 1.25, size=3)
    verts = [np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0])]
    for i in range(1, stacks):
        theta = np.pi * i / stacks
        for j in range(slices):
            phi = 2.0 * np.pi * j / slices
            verts.append(np.array([
                np.sin(theta) * np.cos(phi),
                np.sin(theta) * np.sin(phi),
                np.cos(theta),
            ]))
    faces = []
    def ring(i, j):
        return 2 + (i - 1) * slices + (j % slices)
    for j in range(slices):
        faces.append((0, ring(1, j), ring(1, j + 1)))
        faces.append((1, ring(stacks - 1, j + 1), ring(stacks - 1, j)))
    for i in range(1, stacks - 1):
        for j in range(slices):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, c, d))
            faces.append((a, d, b))
    pts = np.array(verts) * scales
    pts = pts @ _z_rotation(rng.uniform(0.0, 2.0 * np.pi)).T
    return Mesh(pts, np.array(faces))


def box_mesh(seed: int) -> Mesh:
    rng = generator(seed, "box")
    half = rng.uniform(0.4, 1.0, size=3)
    corners = np.array([[sx, sy, sz]
                        for sx in (-1.0, 1.0)
                        for sy in (-1.0, 1.0)
                        for sz in (-1.0, 1.0)]) * half
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # x faces
        (0, 4, 5, 1), (2, 3, 7, 6),  # y faces
        (0, 2, 6, 4), (1, 5, 7, 3),  # z faces
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    pts = corners @ _z_rotation(rng.uniform(0.0, 2.0 * np.pi)).T
    return Mesh(pts, np.array(faces))


def torus_mesh(seed: int, major_steps: int = 28, minor_steps: int = 14) -> Mesh:
    rng = generator(seed, "torus")
    major = rng.uniform(0.6, 0.85)
    minor = rng.uniform(0.18, 0.32)
    verts = []
    for i in range(major_steps):
        u = 2.0 * np.pi * i / major_steps
        for j in range(minor_steps):
            v = 2.0 * np.pi * j / minor_steps
            verts.append(np.array([
                (major + minor * np.cos(v)) * np.cos(u),
                (major + minor * np.cos(v)) * np.sin(u),
                minor * np.sin(v),
            ]))
    faces = []
    def vid(i, j):
        return (i % major_steps) * minor_steps + (j % minor_steps)
    for i in range(major_steps):
        for j in range(minor_steps):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            faces.append((a, b, c))
            faces.append((a, c, d))
    pts = np.array(verts) @ _z_rotation(rng.uniform(0.0, 2.0 * np.pi)).T
    return Mesh(pts, np.array(faces))


def toy_mesh(class_name: str, seed: int) -> Mesh:
    if class_name == "sphere":
        return sphere_mesh(seed)
    if class_name == "box":
        return box_mesh(seed)
    if class_name == "torus":
        return torus_mesh(seed)
    raise ValueError(f"unknown toy class {class_name!r}")


def build_toy_mesh_root(out_dir, meshes_per_class: int = 30, seed: int = 0) -> Path:
    """Write a class/train/file.off tree of procedural meshes.

    The source split folder is irrelevant downstream (the occlusion builder
    splits by view parity) but keeps the expected dataset layout.
    """
    out_dir = Path(out_dir)
    for class_name in TOY_CLASSES:
        target = out_dir / class_name / "train"
        target.mkdir(parents=True, exist_ok=True)
        for i in range(meshes_per_class):
            mesh = toy_mesh(class_name, seed=seed * 1000003 + i)
            (target / f"{class_name}_{i:04d}.off").write_bytes(write_off(mesh))
    return out_dir
