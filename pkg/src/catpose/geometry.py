"""Meshes, point clouds, rigid poses and pinhole cameras.

Conventions used throughout the package:

* Model frame is right-handed with +z up.
* Camera frame follows the pinhole/OpenCV layout: x right, y down, z along the
  optical axis, so visible points have positive camera-space z.
* Pixel centers sit at integer (u, v) coordinates.
* Euler angles are intrinsic roll-pitch-yaw, ``R = Rx(roll) @ Ry(pitch) @ Rz(yaw)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DegenerateMeshError,
    EmptyMeshError,
    InvalidPoseError,
    MalformedFileError,
)

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-9
MM_SCALE_DIAGONAL = 50.0


def _frozen(a, dtype=np.float64, shape=None):
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


def euler_to_matrix(angles):
    """Rotation matrix from intrinsic (roll, pitch, yaw) in radians."""
    r, p, y = (float(a) for a in angles)
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    return rx @ ry @ rz


def matrix_to_euler(rotation):
    """Inverse of :func:`euler_to_matrix`; pitch in [-pi/2, pi/2]."""
    m = np.asarray(rotation, dtype=np.float64)
    pitch = np.arcsin(np.clip(m[0, 2], -1.0, 1.0))
    if abs(m[0, 2]) < 1.0 - 1e-12:
        roll = np.arctan2(-m[1, 2], m[2, 2])
        yaw = np.arctan2(-m[0, 1], m[0, 0])
    else:
        # gimbal lock: fold everything into roll
        yaw = 0.0
        roll = np.arctan2(m[2, 1], m[1, 1])
    return np.array([roll, pitch, yaw])


@dataclass(frozen=True, eq=False)
class RigidPose:
    """``p -> rotation @ p + translation``. Validated on construction."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tr = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3) or tr.shape not in ((3,), (3, 1)):
            raise InvalidPoseError(f"bad pose shapes {rot.shape}, {tr.shape}")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(tr))):
            raise InvalidPoseError("pose contains non-finite values")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > ORTHO_TOL:
            raise InvalidPoseError(f"rotation not orthonormal (max error {err:.3g})")
        det = np.linalg.det(rot)
        if abs(det - 1.0) > ORTHO_TOL:
            raise InvalidPoseError(f"rotation determinant {det:.12f} != 1")
        object.__setattr__(self, "rotation", _frozen(rot))
        object.__setattr__(self, "translation", _frozen(tr, shape=(3,)))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_euler(cls, angles, translation=(0.0, 0.0, 0.0)):
        return cls(euler_to_matrix(angles), translation)

    @property
    def euler(self):
        return matrix_to_euler(self.rotation)

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first."""
        return RigidPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def __eq__(self, other):
        if not isinstance(other, RigidPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh has non-finite vertices")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "triangles", _frozen(t, dtype=np.int64))

    def transformed(self, pose: RigidPose) -> "Mesh":
        return Mesh(pose.apply(self.vertices), self.triangles)

    def scaled(self, factor: float) -> "Mesh":
        return Mesh(self.vertices * float(factor), self.triangles)

    @classmethod
    def concatenate(cls, meshes):
        verts, tris, base = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + base)
            base += len(m.vertices)
        return cls(np.concatenate(verts), np.concatenate(tris))

    def triangle_corners(self):
        return self.vertices[self.triangles]

    def triangle_areas(self):
        c = self.triangle_corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("zero-area framebuffer")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point outside the image")

    @classmethod
    def kinect(cls, width=640, height=480, focal=575.0):
        return cls(focal, focal, width / 2.0, height / 2.0, width, height)

    def project(self, points_cam):
        """Camera-space points -> (u, v, z). Points with z <= 0 yield nan pixels."""
        p = np.asarray(points_cam, dtype=np.float64)
        z = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            safe = np.where(z > 0, z, np.nan)
            u = self.fx * p[..., 0] / safe + self.cx
            v = self.fy * p[..., 1] / safe + self.cy
        return np.stack([u, v, z], axis=-1)

    def backproject(self, uvz):
        q = np.asarray(uvz, dtype=np.float64)
        z = q[..., 2]
        x = (q[..., 0] - self.cx) * z / self.fx
        y = (q[..., 1] - self.cy) * z / self.fy
        return np.stack([x, y, z], axis=-1)

    def to_dict(self):
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


# --------------------------------------------------------------------------
# mesh IO


def _data_lines(path):
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def _parse_off(path):
    lines = _data_lines(path)
    try:
        lineno, first = next(lines)
    except StopIteration:
        raise EmptyMeshError(f"{path}: empty file") from None
    if not first.startswith("OFF"):
        raise MalformedFileError(path, lineno, "missing OFF header")
    rest = first[3:].strip()
    if not rest:
        try:
            lineno, rest = next(lines)
        except StopIteration:
            raise MalformedFileError(path, lineno, "missing counts line") from None
    try:
        counts = [int(x) for x in rest.split()]
        nv, nf = counts[0], counts[1]
    except (ValueError, IndexError):
        raise MalformedFileError(path, lineno, f"bad counts line {rest!r}") from None
    verts, faces = [], []
    for _ in range(nv):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise MalformedFileError(path, lineno, "unexpected end of file in vertices") from None
        try:
            verts.append([float(x) for x in line.split()[:3]])
        except ValueError:
            raise MalformedFileError(path, lineno, f"bad vertex {line!r}") from None
        if len(verts[-1]) != 3:
            raise MalformedFileError(path, lineno, "vertex needs 3 coordinates")
    for _ in range(nf):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise MalformedFileError(path, lineno, "unexpected end of file in faces") from None
        try:
            vals = [int(x) for x in line.split()]
        except ValueError:
            raise MalformedFileError(path, lineno, f"bad face {line!r}") from None
        if not vals or len(vals) < vals[0] + 1 or vals[0] < 3:
            raise MalformedFileError(path, lineno, f"bad face {line!r}")
        idx = vals[1:vals[0] + 1]
        if min(idx) < 0 or max(idx) >= nv:
            raise MalformedFileError(path, lineno, f"vertex index out of range in {line!r}")
        faces.append((lineno, idx))
    return verts, faces


def _parse_obj(path):
    verts, faces = [], []
    for lineno, line in _data_lines(path):
        parts = line.split()
        if parts[0] == "v":
            try:
                verts.append([float(x) for x in parts[1:4]])
            except ValueError:
                raise MalformedFileError(path, lineno, f"bad vertex {line!r}") from None
            if len(verts[-1]) != 3:
                raise MalformedFileError(path, lineno, "vertex needs 3 coordinates")
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                try:
                    i = int(tok.split("/")[0])
                except ValueError:
                    raise MalformedFileError(path, lineno, f"bad face {line!r}") from None
                i = i - 1 if i > 0 else len(verts) + i
                if not 0 <= i < len(verts):
                    raise MalformedFileError(path, lineno, f"vertex index out of range in {line!r}")
                idx.append(i)
            if len(idx) < 3:
                raise MalformedFileError(path, lineno, "face needs at least 3 vertices")
            faces.append((lineno, idx))
    return verts, faces


def load_mesh(path, scale: float = 1.0) -> Mesh:
    """Read an OFF or OBJ file. Polygons are fan-triangulated."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        verts, faces = _parse_obj(path)
    else:
        verts, faces = _parse_off(path)
    tris = [(f[0], f[i], f[i + 1]) for _, f in faces for i in range(1, len(f) - 1)]
    if not verts or not tris:
        raise EmptyMeshError(f"{path}: no geometry")
    mesh = Mesh(np.array(verts) * float(scale), np.array(tris))
    diag = float(np.linalg.norm(np.ptp(mesh.vertices, axis=0)))
    if diag > MM_SCALE_DIAGONAL:
        logger.warning("%s: bounding-box diagonal %.1f looks like millimetres; "
                       "set an explicit scale factor", path, diag)
    return mesh


def save_off(mesh: Mesh, path) -> None:
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.triangles)} 0"]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# scalar geometry


def center_of_mass(mesh: Mesh) -> np.ndarray:
    """Area-weighted centroid of the mesh surface."""
    if len(mesh.triangles) == 0:
        raise DegenerateMeshError("mesh has no triangles")
    corners = mesh.triangle_corners()
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise DegenerateMeshError("all triangles have zero area")
    centroids = corners.mean(axis=1)
    return (centroids * areas[:, None]).sum(axis=0) / total


def model_diameter(cloud) -> float:
    """Largest pairwise distance. Only convex-hull vertices are scanned."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("empty point cloud")
    if len(pts) > 64:
        try:
            from scipy.spatial import ConvexHull

            pts = pts[np.sort(ConvexHull(pts).vertices)]
        except Exception:  # coplanar / collinear input: fall back to the full scan
            pass
    best = 0.0
    chunk = max(1, 2_000_000 // max(len(pts), 1))
    for start in range(0, len(pts), chunk):
        d = pts[start:start + chunk, None, :] - pts[None, :, :]
        best = max(best, float((d * d).sum(axis=-1).max()))
    return float(np.sqrt(best))


def apply_pose(pose: RigidPose, cloud: PointCloud) -> PointCloud:
    if not isinstance(pose, RigidPose):
        raise InvalidPoseError("expected a RigidPose")
    return PointCloud(pose.apply(cloud.points))


def sample_surface(mesh: Mesh, count: int = 4096, seed: int = 0) -> PointCloud:
    """Uniform area-weighted surface samples, deterministic for a given seed."""
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise DegenerateMeshError("cannot sample a zero-area mesh")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    c = mesh.triangle_corners()[tri]
    pts = (1 - r1)[:, None] * c[:, 0] + (r1 * (1 - r2))[:, None] * c[:, 1] + (r1 * r2)[:, None] * c[:, 2]
    return PointCloud(pts)
