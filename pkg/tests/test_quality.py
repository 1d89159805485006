import math
from fractions import Fraction

import numpy as np
import pytest

from catpose.dataset import PartSet
from catpose.quality import NodeScorer, embed_angles, q1, q2, q3, quality

EPS = 1e-6


def make_parts(rng, n, n_links=3, n_nodes=4, hidden=0.0):
    angles = rng.uniform(-np.pi, np.pi, (n, n_links))
    nodes = rng.normal(0, 20, (n, n_nodes, 3))
    nodes[..., 2] *= 0.01
    if hidden:
        angles[rng.random(angles.shape) < hidden] = np.nan
        nodes[rng.random((n, n_nodes)) < hidden] = np.nan
    return PartSet(centers=rng.normal(size=(n, 3)), patches=None, offsets=rng.normal(0, [5, 5, 0.05], (n, 3)),
                   rotations=rng.uniform(-np.pi, np.pi, (n, 3)), angles=angles, nodes=nodes)


def brute_logdet(rows):
    """Population covariance + eps I and its determinant in exact rational arithmetic."""
    rows = [[Fraction(float(x)) for x in r] for r in rows]
    d = len(rows[0]) if rows else 0
    n = len(rows)
    eps = Fraction(EPS)
    cov = [[eps if i == j else Fraction(0) for j in range(d)] for i in range(d)]
    if n >= 2:
        mean = [sum(r[i] for r in rows) / n for i in range(d)]
        for i in range(d):
            for j in range(i, d):
                c = sum((r[i] - mean[i]) * (r[j] - mean[j]) for r in rows) / n
                cov[i][j] += c
                if i != j:
                    cov[j][i] += c
    # exact elimination; the pivots stay positive for a positive definite matrix
    det = Fraction(1)
    a = cov
    for c in range(d):
        det *= a[c][c]
        for r in range(c + 1, d):
            f = a[r][c] / a[c][c]
            for k in range(c, d):
                a[r][k] -= f * a[c][k]
    return math.log(det)


def cs(vals):
    vals = np.asarray(vals, dtype=np.float64)
    return list(np.cos(vals)) + list(np.sin(vals))


def brute_terms(parts, left):
    idx = list(range(len(parts)))
    groups = {"P": idx, "L": [i for i in idx if left[i]], "R": [i for i in idx if not left[i]]}
    link_ok = [all(math.isfinite(parts.angles[i, k]) for i in idx) for k in range(parts.angles.shape[1])]
    node_ok = [all(math.isfinite(parts.nodes[i, k, 0]) for i in idx) for k in range(parts.nodes.shape[1])]

    def pose(g):
        a = brute_logdet([parts.offsets[i] for i in g])
        b = brute_logdet([cs(parts.rotations[i]) for i in g])
        return max(a, b) + math.log1p(math.exp(-abs(a - b)))

    def ang(g):
        return brute_logdet([cs([parts.angles[i, k] for k in range(len(link_ok)) if link_ok[k]]) for i in g])

    def nod(g):
        return brute_logdet([[x for k in range(len(node_ok)) if node_ok[k] for x in parts.nodes[i, k]] for i in g])

    n = len(idx)
    out = []
    for fn, ok in ((pose, True), (ang, any(link_ok)), (nod, any(node_ok))):
        if not ok:
            out.append(0.0)
            continue
        lp = fn(groups["P"])
        out.append(sum(len(groups[s]) / n * (lp - fn(groups[s])) for s in "LR"))
    return out


def test_brute_force_oracle_100_fixtures():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(2, 11))
        parts = make_parts(rng, n, hidden=0.15)
        left = rng.random(n) < 0.5
        left[0], left[-1] = True, False
        L, R = parts.subset(np.flatnonzero(left)), parts.subset(np.flatnonzero(~left))
        ref = brute_terms(parts, left)
        got = [q1(parts, L, R), q2(parts, L, R), q3(parts, L, R)]
        np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-9)
        _, terms = NodeScorer(parts, {"q1": 1, "q2": 1, "q3": 1}).score(left[None])
        np.testing.assert_allclose(terms[0], ref, rtol=1e-7, atol=1e-7)


def test_identical_children_zero_gain():
    rng = np.random.default_rng(0)
    p = make_parts(rng, 6)
    doubled = PartSet.concatenate([p, p])
    left = np.r_[np.ones(6, bool), np.zeros(6, bool)]
    L, R = doubled.subset(np.flatnonzero(left)), doubled.subset(np.flatnonzero(~left))
    for fn in (q1, q2, q3):
        assert abs(fn(doubled, L, R)) < 1e-12


def view_parts(rng, n, angle_row, shift=0.0):
    """Parts of one rendered view: shared angles, node offsets follow the part center."""
    centers = np.column_stack([rng.uniform(0, 100, n), rng.uniform(0, 100, n), np.full(n, 2.0)])
    skel = np.array([[50, 50, 2.0], [70, 40, 2.1], [30, 60, 1.9]]) + [shift, 0, 0]
    return PartSet(centers=centers, patches=None, offsets=rng.normal(size=(n, 3)), rotations=np.zeros((n, 3)),
                   angles=np.tile(angle_row, (n, 1)), nodes=skel[None] - centers[:, None])


def test_q2_zero_within_one_view_positive_across_views():
    rng = np.random.default_rng(1)
    a = view_parts(rng, 8, [0.1, 1.0])
    b = view_parts(rng, 8, [2.0, -1.5])
    half = np.arange(4)
    assert abs(q2(a, a.subset(half), a.subset(half + 4))) < 1e-9
    both = PartSet.concatenate([a, b])
    assert q2(both, a, b) > 1.0


def test_q3_separates_location_when_angles_are_equal():
    rng = np.random.default_rng(2)
    p = view_parts(rng, 20, [0.3, 0.9])
    # same location: s is identical within the split, so children match the parent
    left_pos = p.centers[:, 0] < 50
    L, R = p.subset(np.flatnonzero(left_pos)), p.subset(np.flatnonzero(~left_pos))
    assert q3(p, L, R) > 1.0
    assert abs(q2(p, L, R)) < 1e-9
    same = PartSet.concatenate([p.subset([0])] * 6)
    assert abs(q3(same, same.subset([0, 1, 2]), same.subset([3, 4, 5]))) < 1e-9


def test_mask_selects_terms():
    rng = np.random.default_rng(3)
    p = make_parts(rng, 10)
    L, R = p.subset(range(5)), p.subset(range(5, 10))
    full = quality(p, L, R, {"q1": 1.0, "q2": 1.0, "q3": 1.0})
    only = quality(p, L, R, {"q1": 1.0})
    assert only.q == pytest.approx(full.q1) and only.q2 == 0 and only.q3 == 0
    assert full.q == pytest.approx(full.q1 + full.q2 + full.q3)
    weighted = quality(p, L, R, {"q1": 2.0, "q3": 0.5})
    assert weighted.q == pytest.approx(2 * full.q1 + 0.5 * full.q3)


def test_scorer_matches_reference_many_masks():
    rng = np.random.default_rng(4)
    p = make_parts(rng, 40, hidden=0.02)
    masks = rng.random((25, 40)) < 0.4
    total, terms = NodeScorer(p, {"q1": 1.0, "q2": 0.5, "q3": 2.0}).score(masks)
    for m, t, tt in zip(masks, total, terms):
        L, R = p.subset(np.flatnonzero(m)), p.subset(np.flatnonzero(~m))
        ref = quality(p, L, R, {"q1": 1.0, "q2": 0.5, "q3": 2.0})
        np.testing.assert_allclose(tt, [ref.q1, ref.q2, ref.q3], rtol=1e-6, atol=1e-7)
        assert t == pytest.approx(ref.q, rel=1e-6, abs=1e-7)


def test_relabel_invariance():
    rng = np.random.default_rng(5)
    p = make_parts(rng, 12)
    m = np.arange(12) < 5
    perm = rng.permutation(12)
    a = NodeScorer(p, {"q1": 1, "q2": 1, "q3": 1}).score(m[None])[1]
    b = NodeScorer(p.subset(perm), {"q1": 1, "q2": 1, "q3": 1}).score(m[perm][None])[1]
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)
    swapped = NodeScorer(p, {"q1": 1, "q2": 1, "q3": 1}).score((~m)[None])[1]
    np.testing.assert_allclose(a, swapped, rtol=1e-9, atol=1e-9)


def test_embed_angles_wrap():
    x = np.array([[np.pi, -np.pi + 1e-15]])
    e = embed_angles(x)
    assert np.allclose(e[0, :2], -1) and np.allclose(e[0, 2:], 0, atol=1e-14)
