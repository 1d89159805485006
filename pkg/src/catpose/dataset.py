"""Part extraction and the training-set container.

A part is a ``k x k`` depth crop around a grid pixel. Training parts also carry
the pose targets (offset to the projected center, view rotation) and the
privileged skeleton features; test parts carry only their center and patch.

Parts are stored column-wise in :class:`PartSet` for speed; indexing a
``PartSet`` yields single :class:`Part` records.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import PartConfig
from .errors import DigestMismatchError, FormatError, TruncatedFileError, VersionError
from .geometry import CameraIntrinsics
from .render import DepthImage, Viewpoint
from .skeleton import ProjectedSkeleton, link_angles, node_offsets_batch

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"ISAS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIQd")


@dataclass(frozen=True, eq=False)
class Part:
    c: np.ndarray                  # (u px, v px, z m)
    patch: np.ndarray              # k x k, metres, inf = background
    dx: np.ndarray | None = None   # (px, px, m) to the projected center
    theta: np.ndarray | None = None
    a: np.ndarray | None = None    # per-link angles, nan = not visible
    s: np.ndarray | None = None    # s_n x 3 node offsets, nan rows = not visible

    @property
    def privileged(self):
        return self.a is not None


@dataclass(eq=False)
class PartSet:
    centers: np.ndarray
    patches: np.ndarray | None
    offsets: np.ndarray | None = None
    rotations: np.ndarray | None = None
    angles: np.ndarray | None = None
    nodes: np.ndarray | None = None
    instance: np.ndarray | None = None
    view: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.centers)
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(n, 3)
        if self.patches is not None:
            self.patches = np.asarray(self.patches, dtype=np.float32)
        for name in ("offsets", "rotations"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=np.float64).reshape(n, 3))
        if self.angles is not None:
            a = np.asarray(self.angles, dtype=np.float64)
            self.angles = a if a.ndim == 2 else a.reshape(n, -1)
        if self.nodes is not None:
            s = np.asarray(self.nodes, dtype=np.float64)
            self.nodes = s if s.ndim == 3 else s.reshape(n, -1, 3)
        self.instance = (np.zeros(n, np.int32) if self.instance is None
                         else np.asarray(self.instance, dtype=np.int32))
        self.view = np.zeros(n, np.int32) if self.view is None else np.asarray(self.view, dtype=np.int32)

    def __len__(self):
        return len(self.centers)

    @property
    def privileged(self):
        return self.angles is not None and self.nodes is not None

    @property
    def patch_size(self):
        return None if self.patches is None else self.patches.shape[-1]

    def __getitem__(self, i):
        if not isinstance(i, (int, np.integer)):
            return self.subset(i)
        opt = lambda a: None if a is None else a[i]  # noqa: E731
        return Part(self.centers[i], None if self.patches is None else self.patches[i],
                    opt(self.offsets), opt(self.rotations), opt(self.angles), opt(self.nodes))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "PartSet":
        take = lambda a: None if a is None else a[idx]  # noqa: E731
        return PartSet(self.centers[idx], take(self.patches), take(self.offsets), take(self.rotations),
                       take(self.angles), take(self.nodes), self.instance[idx], self.view[idx])

    def appearance_only(self) -> "PartSet":
        return PartSet(self.centers, self.patches, instance=self.instance, view=self.view)

    @classmethod
    def concatenate(cls, sets) -> "PartSet":
        sets = [s for s in sets]
        if not sets:
            raise ValueError("nothing to concatenate")

        def cat(name):
            vals = [getattr(s, name) for s in sets]
            if any(v is None for v in vals):
                return None
            return np.concatenate(vals)

        return cls(*(cat(n) for n in ("centers", "patches", "offsets", "rotations", "angles",
                                      "nodes", "instance", "view")))

    @classmethod
    def from_parts(cls, parts) -> "PartSet":
        parts = list(parts)
        stack = lambda vals: None if any(v is None for v in vals) else np.stack(vals)  # noqa: E731
        return cls(np.array([p.c for p in parts]).reshape(-1, 3), stack([p.patch for p in parts]),
                   stack([p.dx for p in parts]), stack([p.theta for p in parts]),
                   stack([p.a for p in parts]), stack([p.s for p in parts]))


# --------------------------------------------------------------------------
# extraction


def grid_centers(depth: DepthImage, cfg: PartConfig):
    """Row/col of every stride-grid pixel whose patch qualifies as a part.

    The grid covers centers whose full patch lies inside the image. A center
    qualifies when its own pixel is foreground and at least ``min_foreground``
    of its patch is foreground. Order is row-major.
    """
    k, stride = cfg.patch_size, cfg.stride
    h = k // 2
    H, W = depth.height, depth.width
    if H < k or W < k:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    rows = np.arange(h, H - k + h + 1, stride)
    cols = np.arange(h, W - k + h + 1, stride)
    fg = depth.foreground
    # patch foreground counts through a summed-area table
    sat = np.zeros((H + 1, W + 1), dtype=np.int64)
    sat[1:, 1:] = np.cumsum(np.cumsum(fg, axis=0), axis=1)
    r0 = rows - h
    c0 = cols - h
    cnt = (sat[r0[:, None] + k, c0[None, :] + k] - sat[r0[:, None], c0[None, :] + k]
           - sat[r0[:, None] + k, c0[None, :]] + sat[r0[:, None], c0[None, :]])
    ok = fg[np.ix_(rows, cols)] & (cnt >= cfg.min_foreground * k * k)
    rr, cc = np.nonzero(ok)
    return rows[rr], cols[cc]


def crop_patches(depth: DepthImage, rows, cols, k):
    h = k // 2
    windows = sliding_window_view(depth.depth, (k, k))
    return np.ascontiguousarray(windows[rows - h, cols - h])


def extract_parts(depth: DepthImage, cfg: PartConfig) -> PartSet:
    """Appearance-only parts on the stride grid (the shared extraction path)."""
    rows, cols = grid_centers(depth, cfg)
    centers = np.column_stack([cols, rows, depth.depth[rows, cols]]).astype(np.float64)
    return PartSet(centers, crop_patches(depth, rows, cols, cfg.patch_size))


def extract_training_parts(depth: DepthImage, view: Viewpoint, ssc_point, proj: ProjectedSkeleton,
                           cam: CameraIntrinsics, cfg: PartConfig, instance: int = 0) -> PartSet:
    """Annotated parts for one rendered view.

    ``ssc_point`` is the instance's center in model coordinates; its projection
    gives the per-part offset target.
    """
    base = extract_parts(depth, cfg)
    n = len(base)
    if n == 0:
        logger.warning("view %d: no foreground parts", view.index)
    ssc_uvz = cam.project(view.pose.apply(np.asarray(ssc_point, dtype=np.float64)))
    angles = link_angles(proj).values
    return PartSet(
        base.centers, base.patches,
        offsets=ssc_uvz[None, :] - base.centers,
        rotations=np.tile(view.pose.euler, (n, 1)),
        angles=np.tile(angles, (n, 1)),
        nodes=node_offsets_batch(base.centers, proj),
        instance=np.full(n, instance, np.int32),
        view=np.full(n, view.index, np.int32),
    )


# --------------------------------------------------------------------------
# training set


@dataclass(eq=False)
class TrainingSet:
    category: str
    instance_names: list
    parts: PartSet
    part_config: PartConfig
    links: tuple
    node_count: int
    ssc_labels: tuple
    config_digest: str = ""

    @property
    def instance_count(self):
        return len(self.instance_names)

    @property
    def topology_digest(self):
        blob = json.dumps({"s_n": self.node_count, "links": sorted(map(list, self.links))}).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def instance_parts(self, i) -> PartSet:
        return self.parts.subset(np.flatnonzero(self.parts.instance == i))

    def __len__(self):
        return len(self.parts)

    def _record_dtype(self):
        k = self.part_config.patch_size
        return np.dtype([
            ("instance", "<u4"), ("view", "<u4"), ("c", "<f8", 3), ("dx", "<f8", 3),
            ("theta", "<f8", 3), ("a", "<f8", (len(self.links),)), ("s", "<f8", (self.node_count, 3)),
            ("patch", "<f4", (k, k)),
        ])

    def field_checksums(self):
        p = self.parts
        fields = {"c": p.centers, "dx": p.offsets, "theta": p.rotations, "a": p.angles,
                  "s": p.nodes, "patch": p.patches, "instance": p.instance, "view": p.view}
        return {k: hashlib.sha256(np.ascontiguousarray(v).tobytes()).hexdigest() for k, v in fields.items()}

    def to_bytes(self) -> bytes:
        p = self.parts
        if not p.privileged:
            raise ValueError("training sets need privileged parts")
        meta = json.dumps({
            "category": self.category, "instances": list(self.instance_names),
            "links": [list(l) for l in self.links], "ssc_labels": list(self.ssc_labels),
            "topology_digest": self.topology_digest, "config_digest": self.config_digest,
        }, sort_keys=True).encode()
        cfg = self.part_config
        head = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, self.instance_count, cfg.patch_size,
                            cfg.stride, self.node_count, len(self.links), len(p), cfg.min_foreground)
        rec = np.zeros(len(p), dtype=self._record_dtype())
        rec["instance"], rec["view"] = p.instance, p.view
        rec["c"], rec["dx"], rec["theta"] = p.centers, p.offsets, p.rotations
        rec["a"], rec["s"], rec["patch"] = p.angles, p.nodes, p.patches
        body = head + struct.pack("<I", len(meta)) + meta + rec.tobytes()
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TrainingSet":
        if len(blob) < 4 or blob[:4] != DATASET_MAGIC:
            raise VersionError(f"not a dataset file (magic {blob[:4]!r})")
        if len(blob) < _HEADER.size + 4:
            raise TruncatedFileError("dataset header truncated")
        _, version, c_s, k, stride, s_n, n_links, n, min_fg = _HEADER.unpack_from(blob)
        if version != DATASET_VERSION:
            raise VersionError(f"dataset version {version}, expected {DATASET_VERSION}")
        off = _HEADER.size
        (mlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        cfg = PartConfig(k, stride, min_fg)
        tmp = cls("", [], PartSet(np.zeros((0, 3)), None), cfg, ((0, 0),) * n_links, s_n, ())
        dt = tmp._record_dtype()
        need = off + mlen + n * dt.itemsize + 32
        if len(blob) < need:
            raise TruncatedFileError(f"dataset truncated ({len(blob)} < {need} bytes)")
        if len(blob) > need:
            raise FormatError("trailing bytes after dataset checksum")
        if hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
            raise FormatError("dataset checksum mismatch (corrupted file)")
        meta = json.loads(blob[off:off + mlen])
        off += mlen
        rec = np.frombuffer(blob, dtype=dt, count=n, offset=off)
        parts = PartSet(rec["c"].copy(), rec["patch"].copy(), rec["dx"].copy(), rec["theta"].copy(),
                        rec["a"].copy(), rec["s"].copy(), rec["instance"].astype(np.int32),
                        rec["view"].astype(np.int32))
        out = cls(meta["category"], list(meta["instances"]), parts, cfg,
                  tuple(tuple(l) for l in meta["links"]), s_n, tuple(meta["ssc_labels"]),
                  meta.get("config_digest", ""))
        if len(out.instance_names) != c_s:
            raise FormatError("instance count mismatch between header and metadata")
        if out.topology_digest != meta["topology_digest"]:
            raise DigestMismatchError("dataset topology digest does not match its link table")
        return out


def save_dataset(ts: TrainingSet, path) -> None:
    Path(path).write_bytes(ts.to_bytes())


def load_dataset(path) -> TrainingSet:
    return TrainingSet.from_bytes(Path(path).read_bytes())
