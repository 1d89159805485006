"""Test-time voting: parts -> leaves -> Hough accumulator -> pose hypotheses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter

from .config import InferenceConfig, PartConfig
from .dataset import PartSet, extract_parts
from .errors import ConfigError, GridMismatchError
from .forest import Forest, Tree, traverse_batch
from .geometry import CameraIntrinsics, RigidPose
from .render import DepthImage
from .skeleton import wrap_angle


def extract_test_parts(depth: DepthImage, cfg: PartConfig) -> PartSet:
    """Appearance-only parts; same grid and patch rule as training extraction."""
    return extract_parts(depth, cfg)


@dataclass(eq=False)
class VoteAccumulator:
    """Weights over (u px, v px, z m) bins plus the raw votes that filled them."""

    shape: tuple
    origin: tuple
    bin_size: tuple
    weights: np.ndarray = None
    vote_bin: list = field(default_factory=list)
    vote_pos: list = field(default_factory=list)
    vote_theta: list = field(default_factory=list)
    vote_weight: list = field(default_factory=list)
    cast_weight: float = 0.0
    dropped: int = 0
    dropped_weight: float = 0.0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.origin = tuple(float(o) for o in self.origin)
        self.bin_size = tuple(float(b) for b in self.bin_size)
        if self.weights is None:
            self.weights = np.zeros(self.shape)

    @classmethod
    def for_image(cls, width, height, cfg: InferenceConfig):
        bu, bv, bz = cfg.bin_size
        z0, z1 = cfg.z_range
        shape = (int(np.ceil(width / bu)), int(np.ceil(height / bv)), int(np.ceil((z1 - z0) / bz)))
        return cls(shape, (-0.5, -0.5, z0), (bu, bv, bz))

    def empty_like(self):
        return VoteAccumulator(self.shape, self.origin, self.bin_size)

    def same_grid(self, other):
        return (self.shape, self.origin, self.bin_size) == (other.shape, other.origin, other.bin_size)

    def bin_index(self, positions):
        """Integer bin coordinates (m, 3) and an in-grid mask."""
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        b = np.floor((p - np.array(self.origin)) / np.array(self.bin_size))
        ok = np.all(np.isfinite(b), axis=1) & np.all((b >= 0) & (b < np.array(self.shape)), axis=1)
        return np.where(ok[:, None], b, 0).astype(np.intp), ok

    def bin_center(self, index):
        return np.array(self.origin) + (np.asarray(index, dtype=np.float64) + 0.5) * np.array(self.bin_size)

    def add(self, positions, thetas, weights):
        """Deposit votes; out-of-grid votes are dropped and counted."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        thetas = np.asarray(thetas, dtype=np.float64).reshape(-1, 3)
        weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), (len(positions),))
        b, ok = self.bin_index(positions)
        self.cast_weight += float(weights.sum())
        self.dropped += int((~ok).sum())
        self.dropped_weight += float(weights[~ok].sum())
        flat = np.ravel_multi_index(b[ok].T, self.shape)
        self.weights += np.bincount(flat, weights=weights[ok], minlength=self.weights.size).reshape(self.shape)
        self.vote_bin.append(flat)
        self.vote_pos.append(positions[ok])
        self.vote_theta.append(thetas[ok])
        self.vote_weight.append(weights[ok])

    def votes(self):
        cat = lambda xs, w: np.concatenate(xs) if xs else np.zeros((0, w) if w else 0)  # noqa: E731
        return (cat(self.vote_bin, 0).astype(np.intp), cat(self.vote_pos, 3),
                cat(self.vote_theta, 3), cat(self.vote_weight, 0))

    @property
    def total_weight(self):
        return float(self.weights.sum())


def cast_votes(part, leaf_votes, accumulator: VoteAccumulator, weight=1.0):
    """One part's leaf votes: center candidate ``c + dx`` with weight ``weight / n_votes``."""
    dx, theta = leaf_votes
    if len(dx) == 0:
        raise ValueError("leaf holds no votes")
    c = np.asarray(part.c if hasattr(part, "c") else part, dtype=np.float64)
    accumulator.add(c[None, :] + dx, theta, weight / len(dx))


def cast_votes_batch(centers, leaves, tree: Tree, accumulator: VoteAccumulator, weight=1.0):
    """All parts of an image through one tree."""
    centers = np.asarray(centers, dtype=np.float64)
    if len(centers) == 0:
        return
    start = tree.vote_start[leaves]
    count = tree.vote_start[leaves + 1] - start
    owner = np.repeat(np.arange(len(leaves)), count)
    within = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
    vid = start[owner] + within
    pos = centers[owner] + tree.votes_dx[vid]
    accumulator.add(pos, tree.votes_theta[vid], weight / count[owner])


def aggregate(accumulators, n_trees=None) -> VoteAccumulator:
    """Average per-tree accumulators bin by bin."""
    accs = list(accumulators)
    if not accs:
        raise ValueError("nothing to aggregate")
    n = len(accs) if n_trees is None else int(n_trees)
    ref = accs[0]
    if any(not ref.same_grid(a) for a in accs[1:]):
        raise GridMismatchError("accumulators use different grids")
    out = ref.empty_like()
    total = np.zeros(ref.shape)
    for a in accs:
        total += a.weights
    out.weights = total / n
    for a in accs:
        vb, vp, vt, vw = a.votes()
        out.vote_bin.append(vb)
        out.vote_pos.append(vp)
        out.vote_theta.append(vt)
        out.vote_weight.append(vw / n)
        out.cast_weight += a.cast_weight / n
        out.dropped += a.dropped
        out.dropped_weight += a.dropped_weight / n
    return out


@dataclass
class PoseHypothesis:
    center: np.ndarray   # camera-space metres
    theta: np.ndarray    # roll, pitch, yaw
    score: float
    uvz: np.ndarray = None

    @property
    def pose(self) -> RigidPose:
        return RigidPose.from_euler(self.theta, self.center)

    def to_json(self):
        return {"center_m": [float(x) for x in self.center], "euler_rad": [float(x) for x in self.theta],
                "score": float(self.score)}


def circular_mean(angles, weights=None):
    a = np.asarray(angles, dtype=np.float64)
    w = np.ones(len(a)) if weights is None else np.asarray(weights, dtype=np.float64)
    return wrap_angle(np.arctan2((w[:, None] * np.sin(a)).sum(0), (w[:, None] * np.cos(a)).sum(0)))


def dominant_rotation(thetas, weights, radius, max_seeds=1024):
    """Circular mean of the densest cluster of rotation votes.

    Every vote (or an evenly strided subset when there are many) seeds a
    window of half-width ``radius`` on each angle; the window holding the most
    weight wins and its votes are averaged per angle.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if len(thetas) == 0:
        return np.zeros(3)
    seeds = np.arange(0, len(thetas), max(1, int(np.ceil(len(thetas) / max_seeds))))
    support = np.empty(len(seeds))
    for s0 in range(0, len(seeds), 128):
        sd = seeds[s0:s0 + 128]
        diff = np.abs(wrap_angle(thetas[sd, None, :] - thetas[None, :, :])).max(axis=2)
        support[s0:s0 + 128] = ((diff <= radius) * weights[None, :]).sum(axis=1)
    best = seeds[int(np.argmax(support))]
    member = np.abs(wrap_angle(thetas - thetas[best])).max(axis=1) <= radius
    return circular_mean(thetas[member], weights[member])


def find_modes(acc: VoteAccumulator, cfg: InferenceConfig):
    """Smoothed weights and the top-K local maxima as (flat index, score) pairs."""
    smooth = gaussian_filter(acc.weights, cfg.smoothing_sigma, mode="constant") \
        if cfg.smoothing_sigma > 0 else acc.weights.copy()
    peaks = (maximum_filter(smooth, size=cfg.nms_size, mode="constant") == smooth) & (smooth > 0)
    flat = np.flatnonzero(peaks)
    vals = smooth.ravel()[flat]
    order = np.lexsort((flat, -vals))
    r = cfg.nms_size // 2
    chosen = []
    for i in order:
        idx = np.array(np.unravel_index(flat[i], acc.shape))
        if any(np.abs(idx - np.array(np.unravel_index(f, acc.shape))).max() <= r for f, _ in chosen):
            continue
        chosen.append((int(flat[i]), float(vals[i])))
        if len(chosen) == cfg.top_k:
            break
    return smooth, chosen


def estimate_pose(depth: DepthImage, forest: Forest, cam: CameraIntrinsics, cfg: InferenceConfig,
                  part_cfg: PartConfig) -> list[PoseHypothesis]:
    """Top-K pose hypotheses for one depth image, best first."""
    if "patch_size" in forest.metadata and forest.metadata["patch_size"] != part_cfg.patch_size:
        raise ConfigError("part patch size differs from the one the forest was trained with")
    parts = extract_test_parts(depth, part_cfg)
    if len(parts) == 0:
        return []
    proto = VoteAccumulator.for_image(depth.width, depth.height, cfg)
    bg = forest.config.background_depth
    accs = []
    for tree in forest.trees:
        acc = proto.empty_like()
        cast_votes_batch(parts.centers, traverse_batch(tree, parts.patches, bg), tree, acc)
        accs.append(acc)
    merged = aggregate(accs)
    _, modes = find_modes(merged, cfg)
    vb, vp, vt, vw = merged.votes()
    vidx = np.array(np.unravel_index(vb, merged.shape)).T if len(vb) else np.zeros((0, 3), np.intp)
    r = cfg.nms_size // 2
    out = []
    for flat, score in modes:
        m = np.array(np.unravel_index(flat, merged.shape))
        near = np.abs(vidx - m).max(axis=1) <= r
        w = vw[near]
        if not w.sum() > 0:
            # smoothing can peak where no raw vote landed
            out.append(PoseHypothesis(cam.backproject(merged.bin_center(m)), np.zeros(3), score,
                                      merged.bin_center(m)))
            continue
        uvz = (vp[near] * w[:, None]).sum(axis=0) / w.sum()
        if cfg.rotation_cluster:
            theta = dominant_rotation(vt[near], w, cfg.rotation_cluster)
        else:
            theta = circular_mean(vt[near], w)
        out.append(PoseHypothesis(cam.backproject(uvz), theta, score, uvz))
    return out
