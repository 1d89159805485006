"""Procedural furniture categories built from boxes, with exact skeletons.

Every generated instance of a category shares one skeleton topology, so the
graphs can be matched label by label. Meshes are expressed with the origin at
the bounding-box center and +z up.

The table carries a modesty panel between its two back legs and a low
upstand along the back edge of the top. Without them a rectangular table looks
the same from opposite sides, and its rotation could only be recovered up to a
half turn; the upstand keeps that cue visible from above, where the top hides
the panel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import Mesh
from .skeleton import SkeletonGraph

# (lo, hi) ranges, metres
TABLE_RANGES = {
    "width": (0.9, 1.6),
    "depth": (0.6, 1.0),
    "height": (0.65, 0.80),
    "top": (0.03, 0.06),
    "leg": (0.04, 0.08),
    "inset": (0.02, 0.10),
    "panel": (0.12, 0.25),
    "upstand": (0.06, 0.12),
}
TABLE_LINKS = ((0, 1), (0, 2), (0, 3), (0, 4), (1, 5), (2, 6), (3, 7), (4, 8), (3, 9), (4, 9),
               (0, 10))
RAIL_THICKNESS = 0.03

CHAIR_RANGES = {
    "width": (0.40, 0.55),
    "depth": (0.40, 0.55),
    "seat_height": (0.40, 0.50),
    "seat": (0.03, 0.06),
    "back_height": (0.35, 0.55),
    "back": (0.03, 0.05),
    "leg": (0.03, 0.05),
}
CHAIR_LINKS = ((0, 1), (0, 2), (0, 3), (0, 4), (1, 9), (5, 9), (2, 10), (6, 10), (3, 11), (7, 11),
               (4, 12), (8, 12), (0, 17), (0, 18), (15, 18), (15, 16), (13, 16), (14, 16),
               (4, 13), (3, 14))
CHAIR_MASK = (0, 1, 2, 3, 4, 5, 6, 7, 8, 15, 16)

_BOX_TRIS = np.array([
    [0, 2, 1], [1, 2, 3],   # -z
    [4, 5, 6], [5, 7, 6],   # +z
    [0, 1, 4], [1, 5, 4],   # -y
    [2, 6, 3], [3, 6, 7],   # +y
    [0, 4, 2], [2, 4, 6],   # -x
    [1, 3, 5], [3, 7, 5],   # +x
])


def box(center, size) -> Mesh:
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(size, dtype=np.float64) / 2
    corners = np.array([[sx, sy, sz] for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)], dtype=np.float64)
    return Mesh(c + corners * h, _BOX_TRIS)


def _sample(rng, ranges):
    return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in ranges.items()}


def _table_layout(p):
    w, d, h, t, leg, inset = p["width"], p["depth"], p["height"], p["top"], p["leg"], p["inset"]
    lx = w / 2 - inset - leg / 2
    ly = d / 2 - inset - leg / 2
    zc = (h + p["upstand"]) / 2
    return w, d, h, t, leg, lx, ly, zc


def table_nodes(p):
    w, d, h, t, leg, lx, ly, zc = _table_layout(p)
    corners = [(-lx, ly), (lx, ly), (lx, -ly), (-lx, -ly)]
    nodes = [(0.0, 0.0, h - t / 2)]
    nodes += [(x, y, h - t) for x, y in corners]
    nodes += [(x, y, 0.0) for x, y in corners]
    nodes.append((0.0, -ly, h - t - p["panel"] / 2))
    nodes.append((0.0, -d / 2 + RAIL_THICKNESS / 2, h + p["upstand"] / 2))
    arr = np.array(nodes)
    arr[:, 2] -= zc
    return arr


def make_table(p):
    w, d, h, t, leg, lx, ly, zc = _table_layout(p)
    parts = [box((0, 0, h - t / 2 - zc), (w, d, t))]
    for x, y in [(-lx, ly), (lx, ly), (lx, -ly), (-lx, -ly)]:
        parts.append(box((x, y, (h - t) / 2 - zc), (leg, leg, h - t)))
    parts.append(box((0, -ly, h - t - p["panel"] / 2 - zc), (2 * lx - leg, RAIL_THICKNESS, p["panel"])))
    parts.append(box((0, -d / 2 + RAIL_THICKNESS / 2, h + p["upstand"] / 2 - zc),
                     (w, RAIL_THICKNESS, p["upstand"])))
    mesh = Mesh.concatenate(parts)
    return mesh, SkeletonGraph(table_nodes(p), TABLE_LINKS)


def chair_nodes(p):
    w, d, hs, t = p["width"], p["depth"], p["seat_height"], p["seat"]
    hb, bt, leg = p["back_height"], p["back"], p["leg"]
    zc = (hs + hb) / 2
    lx, ly = w / 2 - leg / 2, d / 2 - leg / 2
    yb = -d / 2 + bt / 2
    corners = [(-lx, ly), (lx, ly), (lx, -ly), (-lx, -ly)]
    nodes = [(0.0, 0.0, hs - t / 2)]
    nodes += [(x, y, hs - t) for x, y in corners]
    nodes += [(x, y, 0.0) for x, y in corners]
    nodes += [(x, y, (hs - t) / 2) for x, y in corners]
    nodes += [(-lx, yb, hs + hb), (lx, yb, hs + hb), (0.0, yb, hs + hb / 2), (0.0, yb, hs + hb),
              (0.0, d / 2, hs - t / 2), (0.0, -d / 2, hs - t / 2)]
    arr = np.array(nodes)
    arr[:, 2] -= zc
    return arr


def make_chair(p):
    w, d, hs, t = p["width"], p["depth"], p["seat_height"], p["seat"]
    hb, bt, leg = p["back_height"], p["back"], p["leg"]
    zc = (hs + hb) / 2
    lx, ly = w / 2 - leg / 2, d / 2 - leg / 2
    parts = [box((0, 0, hs - t / 2 - zc), (w, d, t))]
    for x, y in [(-lx, ly), (lx, ly), (lx, -ly), (-lx, -ly)]:
        parts.append(box((x, y, (hs - t) / 2 - zc), (leg, leg, hs - t)))
    parts.append(box((0, -d / 2 + bt / 2, hs + hb / 2 - zc), (w, bt, hb)))
    return Mesh.concatenate(parts), SkeletonGraph(chair_nodes(p), CHAIR_LINKS, CHAIR_MASK)


CATEGORIES = {
    "table": (TABLE_RANGES, make_table),
    "chair": (CHAIR_RANGES, make_chair),
}


@dataclass
class Instance:
    name: str
    mesh: Mesh
    skeleton: SkeletonGraph
    split: str
    params: dict = field(default_factory=dict)


def generate_category(kind: str, count: int, seed: int, n_train: int | None = None) -> list[Instance]:
    """``count`` instances with seeded proportions; the first ``n_train`` are training instances."""
    if kind not in CATEGORIES:
        raise ConfigError(f"unknown category spec {kind!r}; choose from {sorted(CATEGORIES)}")
    if count < 1:
        raise ConfigError("instance count must be >= 1")
    if n_train is None:
        n_train = count - count // 3
    if not 1 <= n_train <= count:
        raise ConfigError("need at least one training instance")
    ranges, build = CATEGORIES[kind]
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        params = _sample(rng, ranges)
        mesh, skel = build(params)
        out.append(Instance(f"{kind}_{i:03d}", mesh, skel, "train" if i < n_train else "test", params))
    return out


@dataclass
class CategoryManifest:
    category: str
    instances: list  # dicts: name, mesh, skeleton, split, params

    def split(self, which):
        return [e for e in self.instances if e["split"] == which]

    def to_json(self):
        return {"category": self.category, "instances": self.instances}

    @classmethod
    def from_json(cls, d):
        inst = d.get("instances", [])
        if not any(e.get("split") == "train" for e in inst):
            raise ConfigError("manifest needs at least one train instance")
        return cls(d["category"], inst)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))
