"""Privileged one-class Hough forest.

Split nodes test a depth-normalised two-pixel difference on the part patch.
Candidate splits are ranked by the masked quality sum from :mod:`.quality`,
which is the only place the link angles and node offsets are read: trained
trees store probe offsets, thresholds and leaf votes, nothing else.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ForestConfig
from .dataset import PartSet
from .errors import FormatError, InvalidPartError, TruncatedFileError, VersionError
from .quality import NodeScorer, QualityBreakdown

logger = logging.getLogger(__name__)

FOREST_MAGIC = b"ISAF"
FOREST_VERSION = 1
_TREE_HEADER = struct.Struct("<IIQ")


# --------------------------------------------------------------------------
# split feature


def probe_difference(patches, center_depth, u, v, background):
    """Vectorised two-pixel test.

    ``patches`` (n, k, k); ``center_depth`` (n,); ``u``/``v`` broadcastable to
    (..., n, 2) as (col, row) offsets in px*m. Probes that leave the patch or
    land on background read ``background``.
    """
    k = patches.shape[-1]
    h = k // 2
    idx = np.arange(len(patches))

    def read(off):
        col = h + np.rint(off[..., 0] / center_depth)
        row = h + np.rint(off[..., 1] / center_depth)
        inside = (col >= 0) & (col < k) & (row >= 0) & (row < k)
        vals = patches[idx, np.clip(row, 0, k - 1).astype(np.intp), np.clip(col, 0, k - 1).astype(np.intp)]
        return np.where(inside & np.isfinite(vals), vals.astype(np.float64), background)

    return read(np.asarray(u, dtype=np.float64)) - read(np.asarray(v, dtype=np.float64))


def split_feature(psi, patch, w=None, background=10.0):
    """Depth difference between the probes ``w + u/D(w)`` and ``w + v/D(w)``.

    ``psi = (u, v)`` with (col, row) offsets. ``w`` defaults to the patch center,
    the only pixel the forest ever evaluates at.
    """
    patch = np.asarray(patch, dtype=np.float64)
    k = patch.shape[0]
    if w is not None and tuple(w) != (k // 2, k // 2):
        # re-center so that w becomes the middle pixel
        big = np.full((2 * k + 1, 2 * k + 1), np.inf)
        r, c = int(w[1]), int(w[0])
        big[k - r:2 * k - r, k - c:2 * k - c] = patch
        patch = big
        k = patch.shape[0]
        w = None
    d = patch[k // 2, k // 2]
    if not (np.isfinite(d) and d > 0):
        raise InvalidPartError("part center pixel is background")
    u, v = (np.asarray(x, dtype=np.float64)[None, :] for x in psi)
    return float(probe_difference(patch[None], np.array([d]), u, v, background)[0])


@dataclass(frozen=True)
class SplitCandidate:
    u: tuple
    v: tuple
    tau: float


def partition(values, tau):
    """Boolean masks ``(left, right)`` for feature values against ``tau``."""
    values = np.asarray(values, dtype=np.float64)
    left = values < tau
    return left, ~left


def sample_offsets(rng, count, radius):
    """``count`` x 2 offsets uniform in a disc."""
    r = radius * np.sqrt(rng.random(count))
    a = rng.random(count) * 2 * np.pi
    return np.column_stack([r * np.cos(a), r * np.sin(a)])


def best_split(parts, features, taus, weights, eps=1e-6, min_child=1, score_idx=None):
    """Pick the candidate with the highest masked quality.

    ``features`` is (C, n) feature values of every candidate on every part,
    ``taus`` (C,) thresholds. A candidate is valid when both children have at
    least ``min_child`` parts. Scores are computed on ``score_idx`` (all parts
    when None). Ties go to the lowest candidate index. Returns
    ``(index, QualityBreakdown, scores)`` or ``(None, None, scores)`` when no
    candidate is valid.
    """
    features = np.atleast_2d(features)
    taus = np.asarray(taus, dtype=np.float64)
    left = features < taus[:, None]
    n_left = left.sum(axis=1)
    valid = (n_left >= min_child) & (left.shape[1] - n_left >= min_child)
    scores = np.full(len(taus), -np.inf)
    if not valid.any():
        return None, None, scores
    sub = parts if score_idx is None else parts.subset(score_idx)
    sub_left = left[valid] if score_idx is None else left[valid][:, score_idx]
    q, terms = NodeScorer(sub, weights, eps).score(sub_left)
    scores[valid] = q
    best = int(np.argmax(scores))
    if not np.isfinite(scores[best]):
        return None, None, scores
    t = terms[np.flatnonzero(valid) == best][0]
    return best, QualityBreakdown(float(t[0]), float(t[1]), float(t[2]), float(scores[best])), scores


# --------------------------------------------------------------------------
# trees


@dataclass(eq=False)
class Tree:
    probes: np.ndarray       # (n_nodes, 4): u_col, u_row, v_col, v_row
    thresholds: np.ndarray   # (n_nodes,)
    left: np.ndarray         # (n_nodes,) child id or -1
    right: np.ndarray
    leaf: np.ndarray         # (n_nodes,) leaf id or -1
    samples: np.ndarray      # (n_nodes,) training parts reaching the node
    gains: np.ndarray        # (n_nodes,) quality of the chosen split, 0 at leaves
    depth: np.ndarray        # (n_nodes,)
    vote_start: np.ndarray   # (n_leaves + 1,)
    leaf_count: np.ndarray   # (n_leaves,) training parts in the leaf
    votes_dx: np.ndarray     # (n_votes, 3)
    votes_theta: np.ndarray  # (n_votes, 3)

    @property
    def node_count(self):
        return len(self.thresholds)

    @property
    def leaf_total(self):
        return len(self.leaf_count)

    def leaf_votes(self, leaf_id):
        s, e = self.vote_start[leaf_id], self.vote_start[leaf_id + 1]
        return self.votes_dx[s:e], self.votes_theta[s:e]

    def growth_log(self):
        rows = []
        internal = self.left >= 0
        for lvl in range(int(self.depth.max()) + 1):
            at = self.depth == lvl
            g = self.gains[at & internal]
            rows.append({"depth": lvl, "nodes": int(at.sum()), "splits": int(len(g)),
                         "mean_gain": float(g.mean()) if len(g) else 0.0})
        return rows

    def to_bytes(self) -> bytes:
        out = [_TREE_HEADER.pack(self.node_count, self.leaf_total, len(self.votes_dx))]
        for arr, dt in ((self.probes, "<f8"), (self.thresholds, "<f8"), (self.left, "<i4"),
                        (self.right, "<i4"), (self.leaf, "<i4"), (self.samples, "<i4"),
                        (self.gains, "<f8"), (self.depth, "<i4"), (self.vote_start, "<i8"),
                        (self.leaf_count, "<i4"), (self.votes_dx, "<f8"), (self.votes_theta, "<f8")):
            out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
        return b"".join(out)

    @classmethod
    def from_buffer(cls, blob, off):
        if len(blob) < off + _TREE_HEADER.size:
            raise TruncatedFileError("tree header truncated")
        n, nl, nv = _TREE_HEADER.unpack_from(blob, off)
        off += _TREE_HEADER.size
        arrays = []
        for dt, shape in (("<f8", (n, 4)), ("<f8", (n,)), ("<i4", (n,)), ("<i4", (n,)), ("<i4", (n,)),
                          ("<i4", (n,)), ("<f8", (n,)), ("<i4", (n,)), ("<i8", (nl + 1,)),
                          ("<i4", (nl,)), ("<f8", (nv, 3)), ("<f8", (nv, 3))):
            count = int(np.prod(shape))
            size = count * np.dtype(dt).itemsize
            if len(blob) < off + size:
                raise TruncatedFileError("tree arrays truncated")
            arrays.append(np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(shape).copy())
            off += size
        return cls(*arrays), off


def _leaf_votes(parts, idx, rng, cap):
    if len(idx) > cap:
        idx = np.sort(rng.choice(idx, size=cap, replace=False))
    return parts.offsets[idx], parts.rotations[idx]


def train_tree(parts, cfg: ForestConfig, seed=0) -> Tree:
    """Grow one tree depth-first on ``parts`` (a privileged PartSet)."""
    if len(parts) == 0:
        raise ValueError("cannot train a tree on zero parts")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights = cfg.term_weights()
    k = parts.patch_size
    center_depth = parts.patches[:, k // 2, k // 2].astype(np.float64)
    if not np.all(np.isfinite(center_depth) & (center_depth > 0)):
        raise InvalidPartError("training part with background center pixel")

    # targets only; the scorer never needs the patches
    targets = PartSet(parts.centers, None, parts.offsets, parts.rotations, parts.angles, parts.nodes)
    probes, thresholds, left, right, leaf, samples, gains, depth = ([] for _ in range(8))
    vote_dx, vote_theta, leaf_count = [], [], []

    def new_node(d, n):
        probes.append((0.0, 0.0, 0.0, 0.0))
        thresholds.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf.append(-1)
        samples.append(n)
        gains.append(0.0)
        depth.append(d)
        return len(thresholds) - 1

    def make_leaf(node, idx):
        leaf[node] = len(leaf_count)
        dx, th = _leaf_votes(parts, idx, rng, cfg.leaf_votes)
        vote_dx.append(dx)
        vote_theta.append(th)
        leaf_count.append(len(idx))

    root = new_node(0, len(parts))
    stack = [(root, np.arange(len(parts)))]
    while stack:
        node, idx = stack.pop()
        d = depth[node]
        n = len(idx)
        if d >= cfg.max_depth or n < 2 * cfg.min_samples or n < 2:
            make_leaf(node, idx)
            continue
        off = sample_offsets(rng, 2 * cfg.n_candidates, cfg.offset_radius)
        u, v = off[:cfg.n_candidates], off[cfg.n_candidates:]
        feats = probe_difference(parts.patches[idx], center_depth[idx], u[:, None, :], v[:, None, :],
                                 cfg.background_depth)
        lo, hi = feats.min(axis=1), feats.max(axis=1)
        taus = lo + rng.random(cfg.n_candidates) * (hi - lo)
        score_idx = None
        if cfg.split_sample_cap is not None and n > cfg.split_sample_cap:
            score_idx = np.sort(rng.choice(n, size=cfg.split_sample_cap, replace=False))
        best, qual, _ = best_split(targets.subset(idx), feats, taus, weights, cfg.epsilon,
                                   min_child=cfg.min_samples, score_idx=score_idx)
        if best is None or not qual.q > cfg.gain_floor:
            make_leaf(node, idx)
            continue
        go_left = feats[best] < taus[best]
        probes[node] = (*u[best], *v[best])
        thresholds[node] = taus[best]
        gains[node] = qual.q
        l_id = new_node(d + 1, int(go_left.sum()))
        r_id = new_node(d + 1, int((~go_left).sum()))
        left[node], right[node] = l_id, r_id
        # right pushed first so the left subtree is grown first
        stack.append((r_id, idx[~go_left]))
        stack.append((l_id, idx[go_left]))

    counts = np.array([len(v) for v in vote_dx], dtype=np.int64)
    return Tree(
        probes=np.array(probes, dtype=np.float64).reshape(-1, 4),
        thresholds=np.array(thresholds, dtype=np.float64),
        left=np.array(left, dtype=np.int32), right=np.array(right, dtype=np.int32),
        leaf=np.array(leaf, dtype=np.int32), samples=np.array(samples, dtype=np.int32),
        gains=np.array(gains, dtype=np.float64), depth=np.array(depth, dtype=np.int32),
        vote_start=np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
        leaf_count=np.array(leaf_count, dtype=np.int32),
        votes_dx=np.concatenate(vote_dx).reshape(-1, 3),
        votes_theta=np.concatenate(vote_theta).reshape(-1, 3),
    )


def traverse_batch(tree: Tree, patches, background=10.0):
    """Leaf id reached by every patch."""
    patches = np.asarray(patches, dtype=np.float32)
    n = len(patches)
    k = patches.shape[-1]
    center = patches[:, k // 2, k // 2].astype(np.float64)
    node = np.zeros(n, dtype=np.intp)
    active = np.flatnonzero(tree.left[node] >= 0)
    while len(active):
        nd = node[active]
        pr = tree.probes[nd]
        f = probe_difference(patches[active], center[active], pr[:, 0:2], pr[:, 2:4], background)
        node[active] = np.where(f < tree.thresholds[nd], tree.left[nd], tree.right[nd])
        active = active[tree.left[node[active]] >= 0]
    return tree.leaf[node]


def traverse(tree: Tree, part, background=10.0) -> int:
    patch = part.patch if hasattr(part, "patch") else part
    return int(traverse_batch(tree, np.asarray(patch)[None], background)[0])


# --------------------------------------------------------------------------
# forests


@dataclass(eq=False)
class Forest:
    trees: list
    config: ForestConfig
    metadata: dict = field(default_factory=dict)

    def growth_rows(self):
        return [{"tree": t, **row} for t, tree in enumerate(self.trees) for row in tree.growth_log()]

    def to_bytes(self) -> bytes:
        meta = json.dumps({"config": asdict(self.config), "metadata": self.metadata},
                          sort_keys=True).encode()
        body = [FOREST_MAGIC, struct.pack("<II", FOREST_VERSION, len(meta)), meta,
                struct.pack("<I", len(self.trees))]
        body += [t.to_bytes() for t in self.trees]
        blob = b"".join(body)
        return blob + hashlib.sha256(blob).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Forest":
        if len(blob) < 4 or blob[:4] != FOREST_MAGIC:
            raise VersionError(f"not a forest file (magic {blob[:4]!r})")
        if len(blob) < 12:
            raise TruncatedFileError("forest header truncated")
        version, mlen = struct.unpack_from("<II", blob, 4)
        if version != FOREST_VERSION:
            raise VersionError(f"forest version {version}, expected {FOREST_VERSION}")
        if len(blob) < 12 + mlen + 4 + 32:
            raise TruncatedFileError("forest file truncated")
        if hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
            raise TruncatedFileError("forest checksum mismatch (truncated or corrupted file)")
        meta = json.loads(blob[12:12 + mlen])
        off = 12 + mlen
        (n_trees,) = struct.unpack_from("<I", blob, off)
        off += 4
        trees = []
        for _ in range(n_trees):
            t, off = Tree.from_buffer(blob, off)
            trees.append(t)
        if off != len(blob) - 32:
            raise FormatError("unexpected bytes after the last tree")
        cfg = meta["config"]
        cfg["quality"] = tuple(cfg["quality"])
        cfg["weights"] = tuple(cfg["weights"])
        return cls(trees, ForestConfig(**cfg), meta["metadata"])


def save_forest(forest: Forest, path) -> None:
    Path(path).write_bytes(forest.to_bytes())


def load_forest(path) -> Forest:
    return Forest.from_bytes(Path(path).read_bytes())


def _train_one(args):
    parts, cfg, seq = args
    rng = np.random.default_rng(seq)
    subset = np.sort(rng.choice(len(parts), size=max(1, int(round(cfg.subset_fraction * len(parts)))),
                                replace=False))
    return train_tree(parts.subset(subset), cfg, rng)


def train_forest(training_set, cfg: ForestConfig, jobs: int = 1, metadata=None) -> Forest:
    """Train ``cfg.n_trees`` trees, each on its own seeded random subset of the parts.

    Results do not depend on ``jobs``: each tree owns a child seed sequence.
    """
    parts = training_set.parts if hasattr(training_set, "parts") else training_set
    if len(parts) == 0:
        raise ValueError("empty training set")
    if not parts.privileged:
        raise ValueError("training parts must carry link angles and node offsets")
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)
    work = [(parts, cfg, s) for s in seqs]
    if jobs > 1 and cfg.n_trees > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            trees = list(ex.map(_train_one, work))
    else:
        trees = [_train_one(w) for w in work]
    meta = dict(metadata or {})
    meta.setdefault("patch_size", int(parts.patch_size))
    meta.setdefault("node_count", int(parts.nodes.shape[1]))
    meta.setdefault("link_count", int(parts.angles.shape[1]))
    if hasattr(training_set, "config_digest"):
        meta.setdefault("category", training_set.category)
        meta.setdefault("dataset_digest", training_set.config_digest)
        meta.setdefault("topology_digest", training_set.topology_digest)
        meta.setdefault("ssc_labels", list(training_set.ssc_labels))
    logger.info("trained %d trees, %d nodes", len(trees), sum(t.node_count for t in trees))
    return Forest(trees, cfg, meta)
