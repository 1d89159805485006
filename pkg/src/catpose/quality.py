"""Split quality: pose, link-angle and node-offset information gains.

Each term has the form

    Q = log m(parent) - sum_{child} (n_child / n) * log m(child)

where ``m`` is a covariance determinant (for the pose term, the sum of the
offset and rotation determinants) and ``n = n_left + n_right``. Covariances are
population covariances plus ``eps * I``; a set with fewer than two samples has
covariance ``eps * I``. Angles enter through their (cos, sin) embedding.

The link-angle and node-offset terms use only the links / nodes that are
visible in every sample of the parent set, and the same columns are used for
both children.

:class:`NodeScorer` evaluates many candidate partitions of one node at once
from per-candidate sums; the functions ``q1``/``q2``/``q3`` are the direct
reference implementations and work from singular values, which is slower but
accurate to a few ulps even when ``eps`` dominates the covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 1e-6


def embed_angles(x):
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(len(x), -1)
    return np.concatenate([np.cos(x), np.sin(x)], axis=1)


def covariance(x, eps=DEFAULT_EPS):
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    if len(x) < 2:
        return eps * np.eye(d)
    xc = x - x.mean(axis=0)
    return xc.T @ xc / len(x) + eps * np.eye(d)


def log_det(cov):
    if cov.shape[-1] == 0:
        return 0.0
    sign, val = np.linalg.slogdet(cov)
    return float(val) if sign > 0 else -np.inf


def data_log_det(x, eps=DEFAULT_EPS):
    """``log det(covariance(x, eps))`` from the singular values of the centered data.

    Equal to ``log_det(covariance(x, eps))`` but keeps full relative accuracy in
    the directions where ``eps`` dominates.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if d == 0:
        return 0.0
    if n < 2:
        return d * float(np.log(eps))
    sv = np.linalg.svd((x - x.mean(axis=0)) / np.sqrt(n), compute_uv=False)
    return float(np.sum(np.log1p(sv * sv / eps)) + d * np.log(eps))


def weighted_gain(log_parent, log_left, log_right, n_left, n_right):
    n = n_left + n_right
    return (n_left / n) * (log_parent - log_left) + (n_right / n) * (log_parent - log_right)


def valid_columns(values, axis_reduce):
    """Columns (links or nodes) that hold finite values in every sample."""
    fin = np.isfinite(values)
    return fin.all(axis=axis_reduce) if len(values) else np.zeros(values.shape[1], bool)


def _angle_features(parts, cols):
    return embed_angles(parts.angles[:, cols])


def _node_features(parts, cols):
    return parts.nodes[:, cols, :].reshape(len(parts), -1)


def _pose_log(parts, eps):
    a = data_log_det(parts.offsets, eps)
    b = data_log_det(embed_angles(parts.rotations), eps)
    return float(np.logaddexp(a, b))


def q1(parent, left, right, eps=DEFAULT_EPS):
    """6D pose term: offset and rotation determinants, summed inside the log."""
    return weighted_gain(_pose_log(parent, eps), _pose_log(left, eps), _pose_log(right, eps),
                         len(left), len(right))


def q2(parent, left, right, eps=DEFAULT_EPS):
    """Link-angle term."""
    cols = valid_columns(parent.angles, 0)
    if not cols.any():
        return 0.0
    lg = lambda p: data_log_det(_angle_features(p, cols), eps)  # noqa: E731
    return weighted_gain(lg(parent), lg(left), lg(right), len(left), len(right))


def q3(parent, left, right, eps=DEFAULT_EPS):
    """Node-offset term."""
    cols = valid_columns(parent.nodes, (0, 2))
    if not cols.any():
        return 0.0
    lg = lambda p: data_log_det(_node_features(p, cols), eps)  # noqa: E731
    return weighted_gain(lg(parent), lg(left), lg(right), len(left), len(right))


@dataclass
class QualityBreakdown:
    q1: float
    q2: float
    q3: float
    q: float


TERMS = {"q1": q1, "q2": q2, "q3": q3}


def quality(parent, left, right, weights, eps=DEFAULT_EPS) -> QualityBreakdown:
    """Masked weighted sum; ``weights`` maps enabled term names to weights."""
    vals = {name: (fn(parent, left, right, eps) if name in weights else 0.0) for name, fn in TERMS.items()}
    total = sum(weights[n] * vals[n] for n in weights)
    return QualityBreakdown(vals["q1"], vals["q2"], vals["q3"], total)


# --------------------------------------------------------------------------
# batched scoring


class _Block:
    """One covariance block evaluated for every candidate partition."""

    def __init__(self, y, eps):
        self.eps = eps
        self.n, self.d = y.shape
        self.y = y - y.mean(axis=0)
        self.yy = (self.y[:, :, None] * self.y[:, None, :]).reshape(self.n, -1)
        self.tot1 = self.y.sum(axis=0)
        self.tot2 = self.yy.sum(axis=0)
        self.parent = data_log_det(y, eps)

    def _logdets(self, s1, s2, cnt):
        c = len(cnt)
        eye = self.eps * np.eye(self.d)
        safe = np.maximum(cnt, 1.0)[:, None]
        mean = s1 / safe
        cov = (s2 / safe - (mean[:, :, None] * mean[:, None, :]).reshape(c, -1)).reshape(c, self.d, self.d)
        cov = cov + eye
        cov[cnt < 2] = eye
        sign, val = np.linalg.slogdet(cov)
        return np.where(sign > 0, val, -np.inf)

    def children(self, masks, n_left):
        s1 = masks @ self.y
        s2 = masks @ self.yy
        left = self._logdets(s1, s2, n_left)
        right = self._logdets(self.tot1 - s1, self.tot2 - s2, self.n - n_left)
        return left, right


class NodeScorer:
    """Scores candidate left/right partitions of one node's samples."""

    def __init__(self, parts, weights, eps=DEFAULT_EPS):
        self.weights = dict(weights)
        self.n = len(parts)
        self.blocks = {}
        if "q1" in self.weights:
            self.blocks["dx"] = _Block(parts.offsets, eps)
            self.blocks["theta"] = _Block(embed_angles(parts.rotations), eps)
        if "q2" in self.weights:
            cols = valid_columns(parts.angles, 0)
            if cols.any():
                self.blocks["a"] = _Block(_angle_features(parts, cols), eps)
        if "q3" in self.weights:
            cols = valid_columns(parts.nodes, (0, 2))
            if cols.any():
                self.blocks["s"] = _Block(_node_features(parts, cols), eps)

    def score(self, left_masks):
        """``left_masks``: (C, n) bool. Returns total Q (C,) and per-term gains (C, 3)."""
        m = np.asarray(left_masks, dtype=np.float64)
        n_left = m.sum(axis=1)
        n_right = self.n - n_left
        terms = np.zeros((len(m), 3))
        logs = {name: blk.children(m, n_left) for name, blk in self.blocks.items()}
        with np.errstate(invalid="ignore"):
            if "dx" in logs:
                (dl, dr), (tl, tr) = logs["dx"], logs["theta"]
                parent = np.logaddexp(self.blocks["dx"].parent, self.blocks["theta"].parent)
                terms[:, 0] = weighted_gain(parent, np.logaddexp(dl, tl), np.logaddexp(dr, tr),
                                            n_left, n_right)
            for col, name in ((1, "a"), (2, "s")):
                if name in logs:
                    l, r = logs[name]
                    terms[:, col] = weighted_gain(self.blocks[name].parent, l, r, n_left, n_right)
        w = np.array([self.weights.get(q, 0.0) for q in ("q1", "q2", "q3")])
        return terms @ w, terms
