"""Occluded point cloud synthesis.

Pipeline: pinhole projection of a dense surface sample onto a z-buffered
depth map, back-projection of the surviving pixels, a 20-view dodecahedral
camera rig, the odd/even cross-view split, and a reproducible dataset
builder.
"""

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from occlume import _kernels, geomesh
from occlume.geomesh import ClassCatalog, Mesh, PointCloud
from occlume.rng import derive_seed, generator
from occlume.sampling import farthest_point_sample

GOLDEN = (1.0 + 5.0 ** 0.5) / 2.0

# Published sample count of the full occluded dataset built from ModelNet40.
# Exact reproduction depends on camera parameters, so checks use a +-5% band.
FULLSCALE_EXPECTED_TOTAL = 123_041
FULLSCALE_TOLERANCE = 0.05


@dataclass
class Intrinsics:
    f_x: float
    f_y: float
    u_0: float
    v_0: float
    width: int
    height: int

    def __post_init__(self):
        if self.f_x <= 0 or self.f_y <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.u_0 < self.width and 0 < self.v_0 < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass
class Extrinsics:
    r: np.ndarray  # (3, 3) rotation
    t: np.ndarray  # (3,) translation

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def validate(self):
        if not np.allclose(self.r.T @ self.r, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(self.r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.r.T + self.t

    def cam_to_world(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.t) @ self.r

    @property
    def camera_center(self) -> np.ndarray:
        return -self.r.T @ self.t


@dataclass
class DepthMap:
    depth: np.ndarray  # (H, W), +inf marks empty pixels

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def filled(self) -> int:
        return int(np.isfinite(self.depth).sum())


@dataclass
class ViewRig:
    extrinsics: list[Extrinsics]
    radius: float

    def __len__(self):
        return len(self.extrinsics)


def look_at(eye, target, up_hint=(0.0, 1.0, 0.0)) -> Extrinsics:
    """Camera at `eye` with its +z axis pointing toward `target`.

    An up hint parallel to the view axis falls back to the x axis.
    """
    eye = np.asarray(eye, dtype=np.float64).reshape(3)
    target = np.asarray(target, dtype=np.float64).reshape(3)
    fwd = target - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    z = fwd / norm
    up = np.asarray(up_hint, dtype=np.float64).reshape(3)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return Extrinsics(r, -r @ eye)


def dodecahedron_vertices() -> np.ndarray:
    """The 20 unit vertices of a regular dodecahedron.

    Canonical ordering: lexicographic by (z, y, x), which also fixes the
    odd/even split parity.
    """
    phi = GOLDEN
    raw = []
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            for sz in (-1.0, 1.0):
                raw.append((sx, sy, sz))
    for s1 in (-1.0, 1.0):
        for s2 in (-1.0, 1.0):
            raw.append((0.0, s1 / phi, s2 * phi))
            raw.append((s1 / phi, s2 * phi, 0.0))
            raw.append((s1 * phi, 0.0, s2 / phi))
    verts = np.array(raw, dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    order = np.lexsort((verts[:, 0], verts[:, 1], verts[:, 2]))
    return verts[order]


def dodecahedron_rig(radius: float) -> ViewRig:
    """20 cameras on dodecahedron vertices at `radius`, all looking at the origin."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    ex = [look_at(v * radius, (0.0, 0.0, 0.0)) for v in dodecahedron_vertices()]
    return ViewRig(ex, radius)


def cross_view_split(rig: ViewRig) -> tuple[list[int], list[int]]:
    """Odd 1-based view indices train, even ones test."""
    if len(rig) != 20:
        raise ValueError("rig must have exactly 20 views")
    train = [i for i in range(len(rig)) if (i + 1) % 2 == 1]
    test = [i for i in range(len(rig)) if (i + 1) % 2 == 0]
    return train, test


def view_split_name(view_index: int) -> str:
    return "train" if (view_index + 1) % 2 == 1 else "test"


def project_zbuffer(pc: PointCloud, ex: Extrinsics, ins: Intrinsics) -> DepthMap:
    """Project points through the pinhole model, keeping the nearest depth per pixel."""
    cam = ex.world_to_cam(pc.points)
    depth = _kernels.zbuffer_scatter(
        cam, ins.f_x, ins.f_y, ins.u_0, ins.v_0, ins.width, ins.height
    )
    return DepthMap(depth)


def reconstruct(dm: DepthMap, ex: Extrinsics, ins: Intrinsics) -> PointCloud:
    """Back-project every filled pixel through its center to world coordinates."""
    vs, us = np.nonzero(np.isfinite(dm.depth))
    z = dm.depth[vs, us]
    x = (us + 0.5 - ins.u_0) * z / ins.f_x
    y = (vs + 0.5 - ins.v_0) * z / ins.f_y
    cam = np.stack([x, y, z], axis=1)
    return PointCloud(ex.cam_to_world(cam))


@dataclass
class GenConfig:
    """Parameters of the occlusion generator (the key=value config file)."""

    density: int = 16384       # surface samples fed to the projector
    n_points: int = 1024       # output cloud size after resampling
    min_pixels: int = 64       # below this the mesh/view pair is unprojectable
    image_size: int = 256
    focal: float = 280.0
    radius: float = 2.2
    seed: int = 0

    def intrinsics(self) -> Intrinsics:
        half = self.image_size / 2.0
        return Intrinsics(self.focal, self.focal, half, half,
                          self.image_size, self.image_size)

    def rig(self) -> ViewRig:
        return dodecahedron_rig(self.radius)

    def to_kv(self) -> str:
        pairs = [
            ("density", self.density),
            ("n_points", self.n_points),
            ("min_pixels", self.min_pixels),
            ("image_size", self.image_size),
            ("focal", self.focal),
            ("radius", self.radius),
            ("seed", self.seed),
        ]
        return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n"
                       for k, v in pairs)

    @classmethod
    def from_kv(cls, text: str) -> "GenConfig":
        cfg = cls()
        for ln, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {ln}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in ("density", "n_points", "min_pixels", "image_size", "seed"):
                cfg = replace(cfg, **{key: int(value)})
            elif key in ("focal", "radius"):
                cfg = replace(cfg, **{key: float(value)})
            else:
                raise ValueError(f"line {ln}: unknown key {key!r}")
        return cfg

    def digest(self) -> str:
        return hashlib.sha256(self.to_kv().encode()).hexdigest()[:12]


def resample_to(pc: PointCloud, n: int, seed: int) -> PointCloud:
    """Fix the cloud size: FPS keeps the contour when oversampled, sampling
    with replacement pads when undersampled."""
    count = len(pc)
    if count == n:
        return pc
    if count > n:
        sel = farthest_point_sample(pc, n).indices
        return PointCloud(pc.points[sel], label=pc.label)
    rng = generator(seed, "pad")
    extra = rng.integers(0, count, size=n - count)
    return PointCloud(np.concatenate([pc.points, pc.points[extra]]), label=pc.label)


def make_occluded(mesh: Mesh, view: Extrinsics, cfg: GenConfig,
                  seed: Optional[int] = None) -> Optional[PointCloud]:
    """Full synthesis for one mesh/view pair; None when unprojectable."""
    if seed is None:
        seed = cfg.seed
    dense = geomesh.sample_surface(mesh, cfg.density, derive_seed(seed, "dense"))
    dense = geomesh.normalize_unit_sphere(dense)
    dm = project_zbuffer(dense, view, cfg.intrinsics())
    if dm.filled < cfg.min_pixels:
        return None
    rebuilt = reconstruct(dm, view, cfg.intrinsics())
    return resample_to(rebuilt, cfg.n_points, derive_seed(seed, "resample"))


# ---------------------------------------------------------------------------
# Dataset builder
# ---------------------------------------------------------------------------

@dataclass
class ManifestRow:
    sample_id: str
    class_name: str
    view: int
    split: str
    path: str          # relative to the manifest directory
    count: int


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    skipped: int
    cfg_hash: str
    seed: int

    def write(self, path) -> None:
        path = Path(path)
        lines = [f"# occlume-manifest cfg={self.cfg_hash} seed={self.seed} skipped={self.skipped}\n"]
        for r in self.rows:
            lines.append(f"{r.sample_id}\t{r.class_name}\t{r.view}\t{r.split}\t{r.path}\t{r.count}\n")
        path.write_text("".join(lines), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValueError(f"{path}: missing manifest header")
        header = dict(tok.split("=", 1) for tok in lines[0][1:].split() if "=" in tok)
        rows = []
        for line in lines[1:]:
            if not line.strip():
                continue
            sid, cname, view, split, rel, count = line.split("\t")
            rows.append(ManifestRow(sid, cname, int(view), split, rel, int(count)))
        return cls(rows, int(header.get("skipped", 0)), header.get("cfg", ""), int(header.get("seed", 0)))

    def catalog(self) -> ClassCatalog:
        return ClassCatalog.from_names(r.class_name for r in self.rows)

    def validate(self, root) -> None:
        root = Path(root)
        seen = set()
        for r in self.rows:
            if r.path in seen:
                raise ValueError(f"path listed twice: {r.path}")
            seen.add(r.path)
            if r.split != view_split_name(r.view):
                raise ValueError(f"{r.sample_id}: split inconsistent with view parity")
            target = root / r.path
            if not target.exists():
                raise ValueError(f"missing file: {r.path}")
            if len(geomesh.parse_pcb(target.read_bytes())) != r.count:
                raise ValueError(f"{r.path}: point count mismatch")


def _find_meshes(mesh_root: Path) -> list[tuple[str, str, Path]]:
    """(class_name, mesh_stem, path) for a class/split/file.off layout."""
    if not mesh_root.is_dir():
        raise FileNotFoundError(f"mesh root {mesh_root} is not a directory")
    found = []
    for off in sorted(mesh_root.rglob("*.off")):
        rel = off.relative_to(mesh_root)
        class_name = rel.parts[0]
        found.append((class_name, off.stem, off))
    if not found:
        raise FileNotFoundError(f"no .off meshes under {mesh_root}")
    return found


def build_dataset(mesh_root, out_dir, cfg: GenConfig, threads: int = 1,
                  resume: bool = False) -> DatasetManifest:
    """Synthesize every (mesh, view) pair under `mesh_root` into PCB1 files.

    The split comes from view parity, not from the source folder layout.
    Pairs are independent pure tasks, so they can run on a thread pool; the
    manifest is assembled in canonical order afterwards. A resumed build
    skips pairs already present in the existing manifest.
    """
    mesh_root = Path(mesh_root)
    out_dir = Path(out_dir)
    meshes = _find_meshes(mesh_root)
    rig = cfg.rig()
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)

    done: dict[str, ManifestRow] = {}
    manifest_path = out_dir / "manifest.tsv"
    if resume and manifest_path.exists():
        prior = DatasetManifest.read(manifest_path)
        if prior.cfg_hash == cfg.digest():
            done = {r.sample_id: r for r in prior.rows if (out_dir / r.path).exists()}

    tasks = []
    for class_name, stem, path in meshes:
        for view in range(len(rig)):
            sid = f"{class_name}/{stem}/v{view:02d}"
            if sid not in done:
                tasks.append((class_name, stem, path, view, sid))

    def run(task):
        class_name, stem, path, view, sid = task
        mesh = geomesh.parse_off(path.read_bytes())
        pair_seed = derive_seed(cfg.seed, "occlude", class_name, stem, view)
        pc = make_occluded(mesh, rig.extrinsics[view], cfg, seed=pair_seed)
        if pc is None:
            return sid, None
        rel = f"clouds/{class_name}/{stem}_v{view:02d}.pcb"
        target = out_dir / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(geomesh.write_pcb(pc))
        return sid, ManifestRow(sid, class_name, view, view_split_name(view), rel, len(pc))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    skipped = 0
    for sid, row in results:
        if row is None:
            skipped += 1
        else:
            done[sid] = row

    rows = [done[sid] for sid in sorted(done)]
    manifest = DatasetManifest(rows, skipped, cfg.digest(), cfg.seed)
    manifest.write(manifest_path)
    return manifest


def fullscale_band() -> tuple[int, int]:
    lo = int(FULLSCALE_EXPECTED_TOTAL * (1 - FULLSCALE_TOLERANCE))
    hi = int(FULLSCALE_EXPECTED_TOTAL * (1 + FULLSCALE_TOLERANCE))
    return lo, hi


def resolve_threads(requested: Optional[int]) -> int:
    if requested is not None:
        return max(1, requested)
    env = os.environ.get("OCCLUME_THREADS", "")
    return max(1, int(env)) if env.isdigit() and env else 1
