"""Triangle meshes and point clouds: parsing, normalization, surface sampling,
and the on-disk formats (OFF read/write, PCB1 binary, XYZ text, PLY export).
"""

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from occlume.rng import generator

PCB1_MAGIC = b"PCB1"


class ParseError(ValueError):
    """Raised on malformed mesh or point-cloud files; names the offending line."""


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray     # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def validate(self):
        if self.vertices.shape[0] < 3:
            raise ValueError("mesh needs at least 3 vertices")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")


@dataclass
class PointCloud:
    points: np.ndarray            # (N, 3) float64
    label: Optional[int] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return self.points.shape[0]


@dataclass
class ClassCatalog:
    """Ordered class names with contiguous integer ids."""

    names: list[str]
    ids: dict[str, int] = field(init=False)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate class names")
        self.ids = {name: i for i, name in enumerate(self.names)}

    @classmethod
    def from_names(cls, names):
        return cls(sorted(set(names)))

    def __len__(self):
        return len(self.names)


# ---------------------------------------------------------------------------
# OFF format
# ---------------------------------------------------------------------------

def parse_off(data: bytes) -> Mesh:
    """Parse an ASCII OFF file.

    Tolerates the ModelNet40 quirk where the counts share the header line
    ("OFF490 552 0"). Quads and larger polygons are fan-triangulated from
    their first vertex.
    """
    text = data.decode("ascii", errors="replace")
    lines = text.splitlines()
    # Token stream annotated with 1-based line numbers, comments stripped.
    tokens: list[tuple[str, int]] = []
    for ln, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0]
        for tok in body.split():
            tokens.append((tok, ln))
    if not tokens:
        raise ParseError("line 1: empty OFF file")
    head, head_ln = tokens[0]
    if head == "OFF":
        pos = 1
    elif head.startswith("OFF") and head[3:].lstrip("-").isdigit():
        # Fused header: counts begin inside the first token.
        tokens[0] = (head[3:], head_ln)
        pos = 0
    else:
        raise ParseError(f"line {head_ln}: expected OFF header, got {head!r}")

    def take(expect, kind):
        nonlocal pos
        if pos >= len(tokens):
            last_ln = tokens[-1][1]
            raise ParseError(f"line {last_ln}: truncated file while reading {expect}")
        tok, ln = tokens[pos]
        pos += 1
        try:
            return kind(tok)
        except ValueError:
            raise ParseError(f"line {ln}: bad {expect} {tok!r}") from None

    n_verts = take("vertex count", int)
    n_faces = take("face count", int)
    take("edge count", int)
    if n_verts < 0 or n_faces < 0:
        raise ParseError(f"line {head_ln}: negative counts")

    verts = np.empty((n_verts, 3), dtype=np.float64)
    for i in range(n_verts):
        for j in range(3):
            verts[i, j] = take("vertex coordinate", float)

    faces: list[tuple[int, int, int]] = []
    for _ in range(n_faces):
        arity = take("face arity", int)
        if arity < 3:
            _, ln = tokens[pos - 1]
            raise ParseError(f"line {ln}: face with fewer than 3 vertices")
        idx = [take("face index", int) for _ in range(arity)]
        for k, v in enumerate(idx):
            if v < 0 or v >= n_verts:
                _, ln = tokens[pos - arity + k]
                raise ParseError(f"line {ln}: face index {v} out of range (have {n_verts} vertices)")
        for k in range(1, arity - 1):
            tri = (idx[0], idx[k], idx[k + 1])
            # Degenerate triangles (repeated indices) are dropped on load.
            if tri[0] != tri[1] and tri[0] != tri[2] and tri[1] != tri[2]:
                faces.append(tri)

    return Mesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_off(mesh: Mesh) -> bytes:
    out = [f"OFF\n{len(mesh.vertices)} {len(mesh.faces)} 0\n"]
    for v in mesh.vertices:
        out.append(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
    for f in mesh.faces:
        out.append(f"3 {f[0]} {f[1]} {f[2]}\n")
    return "".join(out).encode("ascii")


# ---------------------------------------------------------------------------
# Point cloud formats
# ---------------------------------------------------------------------------

def write_pcb(pc: PointCloud) -> bytes:
    pts = np.ascontiguousarray(pc.points, dtype="<f4")
    return PCB1_MAGIC + struct.pack("<I", len(pc)) + pts.tobytes()


def parse_pcb(data: bytes) -> PointCloud:
    if data[:4] != PCB1_MAGIC:
        raise ParseError("line 1: missing PCB1 magic")
    if len(data) < 8:
        raise ParseError("line 1: truncated PCB1 header")
    (count,) = struct.unpack("<I", data[4:8])
    need = 8 + count * 12
    if len(data) < need:
        raise ParseError(f"line 1: PCB1 payload truncated (need {need} bytes, have {len(data)})")
    pts = np.frombuffer(data[8:need], dtype="<f4").reshape(count, 3)
    return PointCloud(pts.astype(np.float64))


def write_xyz(pc: PointCloud) -> str:
    return "".join(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n" for p in pc.points)


def parse_xyz(text: str) -> PointCloud:
    pts = []
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"line {ln}: expected 3 coordinates, got {len(parts)}")
        try:
            pts.append([float(x) for x in parts])
        except ValueError:
            raise ParseError(f"line {ln}: bad coordinate") from None
    return PointCloud(np.array(pts, dtype=np.float64).reshape(-1, 3))


def write_ply(pc: PointCloud) -> str:
    """ASCII PLY with vertex positions only; lossless for f32 data."""
    head = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(pc)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    body = "".join(
        f"{float(np.float32(p[0]))!r} {float(np.float32(p[1]))!r} {float(np.float32(p[2]))!r}\n"
        for p in pc.points
    )
    return head + body


def parse_ply(text: str) -> PointCloud:
    lines = text.splitlines()
    count = None
    body_at = None
    for i, line in enumerate(lines):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        if line.strip() == "end_header":
            body_at = i + 1
            break
    if count is None or body_at is None:
        raise ParseError("line 1: not an ASCII PLY with a vertex element")
    pts = []
    for ln in range(body_at, body_at + count):
        parts = lines[ln].split()
        pts.append([float(x) for x in parts[:3]])
    return PointCloud(np.array(pts, dtype=np.float64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# Geometry operations
# ---------------------------------------------------------------------------

def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the farthest point has norm 1.

    A degenerate all-identical cloud is centered only (the scale divisor is
    clamped at 1e-12 to avoid NaN).
    """
    if len(pc) == 0:
        raise ValueError("cannot normalize an empty cloud")
    pts = pc.points - pc.points.mean(axis=0)
    radius = np.sqrt((pts * pts).sum(axis=1).max())
    pts = pts / max(radius, 1e-12)
    return PointCloud(pts, label=pc.label)


def face_areas(mesh: Mesh) -> np.ndarray:
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(mesh: Mesh, n: int, seed: int) -> PointCloud:
    """Draw n area-weighted uniform samples from the mesh surface.

    Deterministic for a given seed; face choice follows cumulative face area,
    position within a face uses the square-root barycentric construction.
    """
    mesh.validate()
    if n < 1:
        raise ValueError("need n >= 1")
    areas = face_areas(mesh)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("all faces degenerate (zero total area)")
    rng = generator(seed, "surface")
    cum = np.cumsum(areas)
    picks = np.searchsorted(cum, rng.random(n) * total, side="right")
    picks = np.minimum(picks, len(areas) - 1)
    r1 = rng.random(n)
    r2 = rng.random(n)
    s = np.sqrt(r1)
    u = 1.0 - s
    v = s * (1.0 - r2)
    w = s * r2
    a = mesh.vertices[mesh.faces[picks, 0]]
    b = mesh.vertices[mesh.faces[picks, 1]]
    c = mesh.vertices[mesh.faces[picks, 2]]
    pts = u[:, None] * a + v[:, None] * b + w[:, None] * c
    return PointCloud(pts)
