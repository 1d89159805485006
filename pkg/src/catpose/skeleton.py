"""Skeleton graphs, semantically selected centers, and per-view skeleton features.

The two training-only features derived here are

* the link-angle vector: angle of every projected link with the image x axis,
  one entry per link of the category topology, and
* the node-offset matrix: per part, ``(du px, dv px, dz m)`` from the part
  center to every projected node.

Both carry validity masks because nodes can fall outside the image or be
excluded by a per-category projection mask.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SkeletonSchemaError, TopologyMismatchError
from .geometry import CameraIntrinsics, Mesh, RigidPose, center_of_mass


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    """Nodes indexed by label (dense ``0..s_n-1``), links stored low -> high."""

    positions: np.ndarray
    links: tuple
    project_mask: tuple | None = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        n = len(pos)
        links = []
        for a, b in self.links:
            a, b = int(a), int(b)
            if not (0 <= a < n and 0 <= b < n):
                raise SkeletonSchemaError(f"link ({a}, {b}) references a missing node (s_n={n})")
            if a == b:
                raise SkeletonSchemaError(f"self-link on node {a}")
            links.append((min(a, b), max(a, b)))
        if len(set(links)) != len(links):
            raise SkeletonSchemaError("duplicate links")
        object.__setattr__(self, "links", tuple(links))
        if self.project_mask is not None:
            mask = tuple(sorted(int(x) for x in self.project_mask))
            if any(not 0 <= m < n for m in mask) or len(set(mask)) != len(mask):
                raise SkeletonSchemaError("project_mask references missing or repeated nodes")
            object.__setattr__(self, "project_mask", mask)

    @property
    def node_count(self):
        return len(self.positions)

    def transformed(self, pose: RigidPose) -> "SkeletonGraph":
        return SkeletonGraph(pose.apply(self.positions), self.links, self.project_mask)

    def topology_digest(self):
        blob = json.dumps({"s_n": self.node_count, "links": sorted(self.links)}).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_json(self):
        d = {
            "nodes": [{"label": i, "x": x, "y": y, "z": z}
                      for i, (x, y, z) in enumerate(self.positions.tolist())],
            "links": [list(l) for l in self.links],
        }
        if self.project_mask is not None:
            d["project_mask"] = list(self.project_mask)
        return d

    @classmethod
    def from_json(cls, d):
        try:
            nodes = d["nodes"]
            raw_links = d["links"]
            labels = [int(n["label"]) for n in nodes]
            coords = {int(n["label"]): (float(n["x"]), float(n["y"]), float(n["z"])) for n in nodes}
        except (KeyError, TypeError, ValueError) as exc:
            raise SkeletonSchemaError(f"malformed skeleton: {exc}") from None
        if len(set(labels)) != len(labels):
            raise SkeletonSchemaError("duplicate node labels")
        if sorted(labels) != list(range(len(labels))):
            raise SkeletonSchemaError("node labels must be dense 0..s_n-1")
        try:
            links = [(int(a), int(b)) for a, b in raw_links]
        except (TypeError, ValueError):
            raise SkeletonSchemaError("links must be [a, b] pairs") from None
        pos = [coords[i] for i in range(len(labels))]
        return cls(pos, tuple(links), d.get("project_mask"))


def load_skeleton(path) -> SkeletonGraph:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SkeletonSchemaError(f"{path}: invalid JSON ({exc})") from None
    return SkeletonGraph.from_json(data)


def save_skeleton(graph: SkeletonGraph, path) -> None:
    Path(path).write_text(json.dumps(graph.to_json(), indent=1))


def validate_category_topology(graphs) -> tuple:
    """Check that all graphs share node count and link set; return the shared link order."""
    graphs = list(graphs)
    if not graphs:
        raise TopologyMismatchError("no skeletons given")
    ref = graphs[0]
    ref_links = set(ref.links)
    bad = [i for i, g in enumerate(graphs)
           if g.node_count != ref.node_count or set(g.links) != ref_links]
    if bad:
        desc = ", ".join(f"#{i} (s_n={graphs[i].node_count}, {len(graphs[i].links)} links)" for i in bad)
        raise TopologyMismatchError(
            f"skeleton topology differs from instance #0 (s_n={ref.node_count}, "
            f"{len(ref.links)} links): {desc}", bad)
    return ref.links


# --------------------------------------------------------------------------
# semantically selected centers


@dataclass(frozen=True, eq=False)
class SSCResult:
    """Category center: the node label most often nearest to the instance COMs.

    ``labels`` holds every label tied for the highest count; each instance's
    center is the mean of those nodes (a single node when there is no tie).
    """

    labels: tuple
    points: np.ndarray
    counts: dict = field(default_factory=dict)

    @property
    def label(self):
        return self.labels[0]

    @property
    def frames(self):
        """Per-instance model-from-SSC frames (axes parallel to the model axes)."""
        return [RigidPose(np.eye(3), p) for p in self.points]

    def point_for(self, graph: SkeletonGraph) -> np.ndarray:
        """Apply the selected rule to any skeleton of the same topology."""
        return graph.positions[list(self.labels)].mean(axis=0)

    def to_json(self):
        return {
            "rule": "mode of nearest-to-COM node; mean of tied nodes",
            "label": self.label,
            "labels": list(self.labels),
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
            "points": self.points.tolist(),
        }

    @classmethod
    def from_json(cls, d):
        return cls(tuple(int(x) for x in d["labels"]), np.array(d["points"], dtype=np.float64),
                   {int(k): int(v) for k, v in d.get("counts", {}).items()})


def nearest_node_to_com(mesh: Mesh, graph: SkeletonGraph) -> int:
    com = center_of_mass(mesh)
    dist = np.linalg.norm(graph.positions - com, axis=1)
    return int(np.argmin(dist))


def compute_ssc(instances) -> SSCResult:
    """``instances``: sequence of ``(Mesh, SkeletonGraph)`` pairs of one category."""
    instances = list(instances)
    if not instances:
        raise ValueError("compute_ssc needs at least one instance")
    validate_category_topology([g for _, g in instances])
    nearest = [nearest_node_to_com(m, g) for m, g in instances]
    counts = Counter(nearest)
    top = max(counts.values())
    labels = tuple(sorted(k for k, c in counts.items() if c == top))
    points = np.array([g.positions[list(labels)].mean(axis=0) for _, g in instances])
    return SSCResult(labels, points, dict(counts))


# --------------------------------------------------------------------------
# projection and features


@dataclass(frozen=True, eq=False)
class ProjectedSkeleton:
    """Per-node ``(u, v, z)``; nodes outside the projection mask hold nan."""

    uvz: np.ndarray
    visible: np.ndarray
    projected: np.ndarray
    links: tuple

    @property
    def node_count(self):
        return len(self.uvz)

    @property
    def projected_labels(self):
        return tuple(int(i) for i in np.flatnonzero(self.projected))

    def transformed_2d(self, matrix, offset=(0.0, 0.0)) -> "ProjectedSkeleton":
        """Apply ``p -> matrix @ p + offset`` to the pixel coordinates (z untouched)."""
        uv = self.uvz[:, :2] @ np.asarray(matrix, dtype=np.float64).T + np.asarray(offset)
        return ProjectedSkeleton(np.column_stack([uv, self.uvz[:, 2]]), self.visible,
                                 self.projected, self.links)


def project_skeleton(graph: SkeletonGraph, view, cam: CameraIntrinsics, depth=None,
                     mask=None) -> ProjectedSkeleton:
    """Project every node through the view pose and pinhole camera.

    Visibility is image bounds plus positive depth; no occlusion test is made.
    ``mask`` (default: the graph's ``project_mask``) restricts which nodes are
    projected at all. ``depth`` is only used to check image dimensions.
    """
    if depth is not None and (depth.width, depth.height) != (cam.width, cam.height):
        raise ValueError("depth image does not match the camera intrinsics")
    pose = view.pose if hasattr(view, "pose") else view
    mask = graph.project_mask if mask is None else mask
    projected = np.ones(graph.node_count, dtype=bool)
    if mask is not None:
        projected[:] = False
        projected[list(mask)] = True
    uvz = cam.project(pose.apply(graph.positions))
    uvz[~projected] = np.nan
    with np.errstate(invalid="ignore"):
        visible = (projected & (uvz[:, 2] > 0)
                   & (uvz[:, 0] >= -0.5) & (uvz[:, 0] < cam.width - 0.5)
                   & (uvz[:, 1] >= -0.5) & (uvz[:, 1] < cam.height - 0.5))
    return ProjectedSkeleton(uvz, visible, projected, graph.links)


@dataclass(frozen=True, eq=False)
class LinkAngleVector:
    """One slot per category link; ``valid`` marks links with both ends visible."""

    values: np.ndarray
    valid: np.ndarray
    degenerate: np.ndarray

    @property
    def angles(self):
        return self.values[self.valid]

    def __len__(self):
        return int(self.valid.sum())


def wrap_angle(a):
    """Map to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(w <= -np.pi, w + 2 * np.pi, w)


def link_angles(proj: ProjectedSkeleton) -> LinkAngleVector:
    """Angle of each directed link (low label -> high label) with the +u axis."""
    n_links = len(proj.links)
    values = np.full(n_links, np.nan)
    valid = np.zeros(n_links, dtype=bool)
    degenerate = np.zeros(n_links, dtype=bool)
    for k, (lo, hi) in enumerate(proj.links):
        if not (proj.visible[lo] and proj.visible[hi]):
            continue
        du = proj.uvz[hi, 0] - proj.uvz[lo, 0]
        dv = proj.uvz[hi, 1] - proj.uvz[lo, 1]
        valid[k] = True
        if du == 0 and dv == 0:
            values[k] = 0.0
            degenerate[k] = True
        else:
            ang = np.arctan2(dv, du)
            values[k] = np.pi if ang == -np.pi else ang
    return LinkAngleVector(values, valid, degenerate)


@dataclass(frozen=True, eq=False)
class NodeOffsetMatrix:
    """``s_n x 3`` rows of (du px, dv px, dz m); invalid rows are nan."""

    rows: np.ndarray
    valid: np.ndarray


def node_offsets(part_center, proj: ProjectedSkeleton) -> NodeOffsetMatrix:
    c = np.asarray(part_center, dtype=np.float64)
    rows = proj.uvz - c[None, :]
    rows[~proj.visible] = np.nan
    return NodeOffsetMatrix(rows, proj.visible.copy())


def node_offsets_batch(centers, proj: ProjectedSkeleton) -> np.ndarray:
    """Vectorised :func:`node_offsets` for ``(n, 3)`` centers -> ``(n, s_n, 3)``."""
    rows = proj.uvz[None, :, :] - np.asarray(centers, dtype=np.float64)[:, None, :]
    rows[:, ~proj.visible] = np.nan
    return rows
