"""Viewpoint sampling and z-buffer depth rendering."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, TruncatedFileError, VersionError
from .geometry import CameraIntrinsics, Mesh, RigidPose

BACKGROUND = np.inf
NEAR_PLANE = 1e-4
DEPTH_MAGIC = b"ISAD"
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Metric depth raster (float32, row-major). Background pixels are ``+inf``."""

    depth: np.ndarray

    def __post_init__(self):
        d = np.array(self.depth, dtype=np.float32, copy=True)
        if d.ndim != 2 or d.size == 0:
            raise ConfigError(f"depth image must be a non-empty 2D array, got shape {d.shape}")
        fg = np.isfinite(d)
        if np.any(d[fg] <= 0) or np.any(np.isnan(d)):
            raise ValueError("foreground depth must be positive and finite")
        d[~fg] = BACKGROUND
        d.setflags(write=False)
        object.__setattr__(self, "depth", d)

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def foreground(self):
        return np.isfinite(self.depth)

    @classmethod
    def empty(cls, width, height):
        return cls(np.full((height, width), BACKGROUND, dtype=np.float32))

    def __eq__(self, other):
        if not isinstance(other, DepthImage):
            return NotImplemented
        return np.array_equal(self.depth, other.depth)

    def to_bytes(self) -> bytes:
        header = DEPTH_MAGIC + struct.pack("<III", self.width, self.height, 0)
        return header + self.depth.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DepthImage":
        if len(blob) < 16:
            raise TruncatedFileError("depth file shorter than its header")
        if blob[:4] != DEPTH_MAGIC:
            raise VersionError(f"bad depth magic {blob[:4]!r}")
        w, h, _ = struct.unpack("<III", blob[4:16])
        need = 16 + 4 * w * h
        if len(blob) < need:
            raise TruncatedFileError(f"depth file truncated ({len(blob)} < {need} bytes)")
        arr = np.frombuffer(blob, dtype="<f4", count=w * h, offset=16).reshape(h, w)
        return cls(arr)


def save_depth(image: DepthImage, path) -> None:
    Path(path).write_bytes(image.to_bytes())


def load_depth(path) -> DepthImage:
    """Read an ``.isad`` raster or a 16-bit PNG in millimetres (0 = background)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            mm = np.array(im, dtype=np.float64)
        if mm.ndim != 2:
            raise FormatError(f"{path}: expected a single-channel depth PNG")
        depth = np.where(mm > 0, mm / 1000.0, BACKGROUND)
        return DepthImage(depth)
    return DepthImage.from_bytes(path.read_bytes())


def save_depth_png(image: DepthImage, path) -> None:
    from PIL import Image

    mm = np.where(image.foreground, np.rint(image.depth.astype(np.float64) * 1000.0), 0)
    Image.fromarray(np.clip(mm, 0, 65535).astype(np.uint16)).save(path)


@dataclass(frozen=True)
class Viewpoint:
    """Camera-from-model pose of one rendered view."""

    pose: RigidPose
    index: int = 0

    @property
    def camera_center(self):
        return -self.pose.rotation.T @ self.pose.translation

    @property
    def optical_axis(self):
        """Unit viewing direction in model coordinates."""
        return self.pose.rotation[2].copy()


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> RigidPose:
    """Camera-from-model pose for a camera at ``eye`` looking at ``target`` with zero roll."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        # looking straight along the up axis
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return RigidPose(rot, -rot @ eye)


def sample_viewpoints(count: int, radius: float, hemisphere: bool = True,
                      azimuth_offset: float = 0.0, min_elevation: float = 0.0) -> list[Viewpoint]:
    """Fibonacci-spiral cameras on a sphere (or upper hemisphere) around the origin.

    The first camera always sits at the +z pole. ``azimuth_offset`` rotates the
    whole spiral about z, which gives a disjoint set of views for testing.
    """
    if count < 1:
        raise ConfigError("view count must be >= 1")
    if not radius > 0:
        raise ConfigError("view radius must be positive")
    i = np.arange(count, dtype=np.float64)
    if hemisphere:
        zmin = np.sin(min_elevation)
        z = 1.0 - (i / count) * (1.0 - zmin)
    else:
        z = 1.0 - 2.0 * i / (count - 1) if count > 1 else np.ones(1)
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * GOLDEN_ANGLE + azimuth_offset
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return [Viewpoint(look_at(radius * d), int(k)) for k, d in enumerate(dirs)]


def _top_left(dx, dy):
    return dy < 0 or (dy == 0 and dx > 0)


def render_depth(mesh: Mesh, view: Viewpoint, cam: CameraIntrinsics) -> DepthImage:
    """Rasterize ``mesh`` into a depth image (camera-space z, metres).

    Pixel (col, row) is sampled at its center (u=col, v=row). Coverage uses the
    top-left fill rule; depth is interpolated perspective-correctly, so planar
    facets reproduce exact ray-plane depths. Triangles touching the near plane
    are skipped rather than clipped.
    """
    if cam.width <= 0 or cam.height <= 0:
        raise ConfigError("zero-area framebuffer")
    zbuf = np.full((cam.height, cam.width), BACKGROUND)
    if len(mesh.triangles) == 0:
        return DepthImage(zbuf)
    pc = view.pose.apply(mesh.vertices)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        us = cam.fx * pc[:, 0] / z + cam.cx
        vs = cam.fy * pc[:, 1] / z + cam.cy
    for tri in mesh.triangles:
        zs = z[tri]
        if np.any(zs <= NEAR_PLANE):
            continue
        x0, x1, x2 = us[tri]
        y0, y1, y2 = vs[tri]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0 or not np.isfinite(area):
            continue
        if area < 0:
            x1, x2, y1, y2 = x2, x1, y2, y1
            zs = zs[[0, 2, 1]]
            area = -area
        c0 = max(int(np.ceil(min(x0, x1, x2))), 0)
        c1 = min(int(np.floor(max(x0, x1, x2))), cam.width - 1)
        r0 = max(int(np.ceil(min(y0, y1, y2))), 0)
        r1 = min(int(np.floor(max(y0, y1, y2))), cam.height - 1)
        if c0 > c1 or r0 > r1:
            continue
        px = np.arange(c0, c1 + 1, dtype=np.float64)[None, :]
        py = np.arange(r0, r1 + 1, dtype=np.float64)[:, None]
        inside = np.ones((r1 - r0 + 1, c1 - c0 + 1), dtype=bool)
        bary = []
        for (ax, ay, bx, by) in ((x1, y1, x2, y2), (x2, y2, x0, y0), (x0, y0, x1, y1)):
            dx, dy = bx - ax, by - ay
            e = dx * (py - ay) - dy * (px - ax)
            inside &= (e > 0) | ((e == 0) & _top_left(dx, dy))
            bary.append(e)
        if not inside.any():
            continue
        inv_z = (bary[0] / zs[0] + bary[1] / zs[1] + bary[2] / zs[2]) / area
        depth = 1.0 / inv_z
        sub = zbuf[r0:r1 + 1, c0:c1 + 1]
        closer = inside & (depth < sub)
        sub[closer] = depth[closer]
    return DepthImage(zbuf)
