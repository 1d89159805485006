"""Acceptance criteria 1-8, one PASS/FAIL line each.

The lines are printed as they are decided and repeated in the pytest
terminal summary. Criteria 6 and 7 share one five-seed pipeline run
(about five minutes on a single core).
"""

import dataclasses
import json
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from catpose import pipeline
from catpose.config import PipelineConfig
from catpose.dataset import extract_training_parts
from catpose.evaluate import EvalCase, average_distance, is_correct
from catpose.forest import load_forest, save_forest, train_forest
from catpose.generate import box, generate_category
from catpose.geometry import CameraIntrinsics, Mesh, PointCloud, RigidPose, model_diameter
from catpose.infer import estimate_pose
from catpose.quality import NodeScorer, q1, q2, q3
from catpose.render import Viewpoint, render_depth, sample_viewpoints
from catpose.skeleton import SkeletonGraph, compute_ssc, link_angles, project_skeleton, wrap_angle

import conftest
from conftest import TINY_FOREST, build_training_set, random_rotation
from test_quality import brute_terms, make_parts
from test_render import raycast

ACCEPTANCE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "acceptance.json"
SEEDS = range(5)


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------- 1. metric suite

def test_criterion_1_metric_suite():
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        cloud = PointCloud(rng.normal(0, 0.3, (100, 3)))
        gt = RigidPose(random_rotation(rng), rng.normal(0, 2, 3))
        est = RigidPose(random_rotation(rng), rng.normal(0, 2, 3))
        g = RigidPose(random_rotation(rng), rng.normal(0, 5, 3))
        phi, z = float(rng.uniform(0.2, 3)), float(rng.uniform(0.05, 1))
        t = rng.normal(0, 0.5, 3)
        ident = average_distance(EvalCase(cloud, gt, gt, phi))
        trans = average_distance(EvalCase(cloud, gt, RigidPose(gt.rotation, gt.translation + t), phi))
        w = average_distance(EvalCase(cloud, gt, est, phi))
        wg = average_distance(EvalCase(cloud, g.compose(gt), g.compose(est), phi))
        worst = max(worst, ident, abs(trans - np.linalg.norm(t)), abs(w - wg))
        assert is_correct(z * phi, z, phi) and not is_correct(z * phi + 1e-9, z, phi)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 5.0
    assert report(1, ok, f"1000 cases, max deviation {worst:.2e} (tol 1e-9), boundary inclusive, {elapsed:.2f} s (< 5 s)")


# ---------------------------------------------------------------- 2. entropy oracle

def test_criterion_2_entropy_oracle():
    rng = np.random.default_rng(22)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 11))
        parts = make_parts(rng, n, hidden=0.15)
        left = rng.random(n) < 0.5
        left[0], left[-1] = True, False
        L, R = parts.subset(np.flatnonzero(left)), parts.subset(np.flatnonzero(~left))
        ref = np.array(brute_terms(parts, left))
        got = np.array([q1(parts, L, R), q2(parts, L, R), q3(parts, L, R)])
        rel = np.abs(got - ref) / np.maximum(np.abs(ref), 1e-300)
        rel[(ref == 0) & (got == 0)] = 0
        worst = max(worst, float(rel.max()))
    zero = 0.0
    for _ in range(20):
        p = make_parts(rng, 6)
        from catpose.dataset import PartSet
        d = PartSet.concatenate([p, p])
        L, R = d.subset(range(6)), d.subset(range(6, 12))
        zero = max(zero, *(abs(fn(d, L, R)) for fn in (q1, q2, q3)))
    # the batched scorer used during training agrees with the reference terms
    p = make_parts(rng, 30)
    m = rng.random((10, 30)) < 0.5
    _, terms = NodeScorer(p, {"q1": 1, "q2": 1, "q3": 1}).score(m)
    ref = np.array([[q1(p, p.subset(np.flatnonzero(r)), p.subset(np.flatnonzero(~r))),
                     q2(p, p.subset(np.flatnonzero(r)), p.subset(np.flatnonzero(~r))),
                     q3(p, p.subset(np.flatnonzero(r)), p.subset(np.flatnonzero(~r)))] for r in m])
    scorer_dev = float(np.abs(terms - ref).max())
    ok = worst <= 1e-9 and zero <= 1e-12 and scorer_dev <= 1e-6
    assert report(2, ok, f"100 fixtures, max rel error {worst:.2e} (tol 1e-9); zero-gain residual {zero:.1e} "
                          f"(float rounding of log det); batched scorer max abs dev {scorer_dev:.1e}")


# ---------------------------------------------------------------- 3. renderer oracle

def test_criterion_3_renderer_oracle():
    cube = box((0, 0, 0), (1, 1, 1))
    cam = CameraIntrinsics.kinect(64, 64, 60.0)
    t0 = time.perf_counter()
    views = sample_viewpoints(6, 3.0) + [Viewpoint(RigidPose.from_euler((0.4, -0.3, 0.7), (0.1, 0, 3)))]
    total = agree_n = ambiguous = 0
    for v in views:
        d = render_depth(cube, v, cam).depth.astype(np.float64)
        ref = raycast(cube, v.pose, cam)
        # pixel centers lying exactly on a silhouette edge: coverage is a fill-rule convention
        edge = np.isfinite(ref) != np.isfinite(raycast(cube, v.pose, cam, tol=-1e-9))
        fg = (np.isfinite(ref) | np.isfinite(d)) & ~edge
        with np.errstate(invalid="ignore"):
            agree = fg & (np.abs(d - ref) <= 1e-6)
        total += int(fg.sum())
        agree_n += int(agree.sum())
        ambiguous += int(edge.sum())
    elapsed = time.perf_counter() - t0
    frac = agree_n / total
    ok = frac >= 0.99 and elapsed < 10
    assert report(3, ok, f"cube 64x64, {len(views)} views: {100 * frac:.2f}% of {total} foreground px within 1e-6 m "
                          f"({ambiguous} on-edge px excluded), {elapsed:.2f} s (< 10 s)")


# ---------------------------------------------------------------- 4. determinism and persistence

def test_criterion_4_determinism(tmp_path):
    ts = build_training_set(2, 8)
    a = train_forest(ts, TINY_FOREST)
    b = train_forest(ts, TINY_FOREST, jobs=2)
    save_forest(a, tmp_path / "a.isaf")
    save_forest(b, tmp_path / "b.isaf")
    same_train = (tmp_path / "a.isaf").read_bytes() == (tmp_path / "b.isaf").read_bytes()
    loaded = load_forest(tmp_path / "a.isaf")
    save_forest(loaded, tmp_path / "c.isaf")
    round_trip = (tmp_path / "c.isaf").read_bytes() == (tmp_path / "a.isaf").read_bytes()
    inst = generate_category("table", 1, 0)[0]
    cam = CameraIntrinsics.kinect(96, 72, 86.0)
    v = sample_viewpoints(8, 2 * model_diameter(PointCloud(inst.mesh.vertices)))[3]
    img = render_depth(inst.mesh, v, cam)
    icfg = PipelineConfig().inference
    ja = json.dumps([h.to_json() for h in estimate_pose(img, a, cam, icfg, ts.part_config)])
    jb = json.dumps([h.to_json() for h in estimate_pose(img, loaded, cam, icfg, ts.part_config)])
    ok = same_train and round_trip and ja == jb and ja != "[]"
    assert report(4, ok, f"forest bytes identical across runs/jobs: {same_train}; save/load/save identical: "
                          f"{round_trip}; inference JSON replay identical: {ja == jb}")


# ---------------------------------------------------------------- 5. feature invariants

def test_criterion_5_feature_invariants():
    rng = np.random.default_rng(55)
    inst = generate_category("table", 1, 0)[0]
    g = inst.skeleton
    cam = CameraIntrinsics.kinect(320, 240, 300.0)
    # instance and distance scaled together: the projection is unchanged up to rounding
    scale_dev = rot_dev = 0.0
    for _ in range(20):
        pose = RigidPose(random_rotation(rng), [0, 0, 4.0])
        s = float(rng.uniform(0.3, 3))
        a = link_angles(project_skeleton(g, pose, cam))
        scaled = SkeletonGraph(g.positions * s, g.links, g.project_mask)
        c = link_angles(project_skeleton(scaled, RigidPose(pose.rotation, s * pose.translation), cam))
        assert np.array_equal(a.valid, c.valid)
        scale_dev = max(scale_dev, float(np.abs(wrap_angle(a.angles - c.angles)).max(initial=0)))
        # in-plane rotation of the image by phi shifts every angle by phi
        phi = float(rng.uniform(-np.pi, np.pi))
        proj = project_skeleton(g, pose, cam)
        rmat = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
        r = link_angles(proj.transformed_2d(rmat))
        rot_dev = max(rot_dev, float(np.abs(wrap_angle(r.angles - a.angles - phi)).max(initial=0)))
    # a shared by all parts of a view; equal a with differing s
    ssc = compute_ssc([(inst.mesh, g)])
    views = sample_viewpoints(4, 2 * model_diameter(PointCloud(inst.mesh.vertices)))
    small = CameraIntrinsics.kinect(96, 72, 86.0)
    shared = True
    s_gap = 0.0
    for v in views:
        parts = extract_training_parts(render_depth(inst.mesh, v, small), v, ssc.points[0],
                                       project_skeleton(g, v, small), small, conftest.TINY_PARTS)
        if not len(parts):
            continue
        same = (parts.angles == parts.angles[0]) | (np.isnan(parts.angles) & np.isnan(parts.angles[0]))
        shared &= bool(same.all())
        valid = np.isfinite(parts.nodes[0, :, 0]) & np.isfinite(parts.nodes[-1, :, 0])
        s_gap = max(s_gap, float(np.abs(parts.nodes[0, valid, :2] - parts.nodes[-1, valid, :2]).max()))
    ok = scale_dev <= 1e-12 and rot_dev <= 1e-12 and shared and s_gap > 1.0
    assert report(5, ok, f"scale invariance dev {scale_dev:.1e}, rotation equivariance dev {rot_dev:.1e} "
                          f"(tol 1e-12); a identical within each view: {shared}; equal-a parts differ in s by "
                          f"{s_gap:.1f} px")


# ---------------------------------------------------------------- 6 and 7. desk-scale runs

@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """Recall per seed for the full and the q1-only forests."""
    root = tmp_path_factory.mktemp("desk")
    base = PipelineConfig.load(ACCEPTANCE_CONFIG)
    results = {"q1-q2-q3": [], "q1": []}
    t0 = time.perf_counter()
    for seed in SEEDS:
        cfg = dataclasses.replace(base, seed=seed)
        out = root / f"seed{seed}"
        summaries = pipeline.run_all(cfg, out)
        results["q1-q2-q3"].append(summaries[-1]["average"])
        for run in (pipeline.run_train, pipeline.run_infer):
            run(cfg, out, ("q1",))
        results["q1"].append(pipeline.run_eval(cfg, out, ("q1",))["average"])
        print(f"seed {seed}: q1-q2-q3 {results['q1-q2-q3'][-1]:.1f}%  q1 {results['q1'][-1]:.1f}%")
    results["seconds"] = time.perf_counter() - t0
    return results


def test_criterion_6_desk_scale_recall(desk_runs):
    full = desk_runs["q1-q2-q3"]
    med = statistics.median(full)
    minutes = desk_runs["seconds"] / 60
    ok = med >= 60.0 and minutes <= 10.0
    assert report(6, ok, f"unseen-table top-1 recall at z=0.3 per seed {[round(x, 1) for x in full]}, median "
                          f"{med:.1f}% (>= 60%); five seeds incl. both forests {minutes:.1f} min on "
                          f"one core (<= 10 min)")


def test_criterion_7_ablation_trend(desk_runs):
    full, only = desk_runs["q1-q2-q3"], desk_runs["q1"]
    mf, mq = statistics.mean(full), statistics.mean(only)
    assert report(7, mf >= mq, f"mean recall Q1&Q2&Q3 {mf:.2f}% vs Q1 {mq:.2f}% "
                               f"(per seed {[round(x, 1) for x in full]} vs {[round(x, 1) for x in only]})")


# ---------------------------------------------------------------- 8. SSC

def test_criterion_8_ssc():
    # unit cubes centred at the origin, so every COM is (0, 0, 0); node distances are read off directly
    cube = box((0, 0, 0), (1, 1, 1))
    links = [(0, 1), (1, 2)]
    graphs = [
        SkeletonGraph([[0.9, 0, 0], [0, 0.2, 0], [0, 0, 0.5]], links),   # distances .9 .2 .5 -> node 1
        SkeletonGraph([[0.3, 0, 0], [0, 0.1, 0], [0, 0, 0.4]], links),   # .3 .1 .4 -> node 1
        SkeletonGraph([[0.5, 0, 0], [0, 0.6, 0], [0, 0, 0.2]], links),   # .5 .6 .2 -> node 2
    ]
    res = compute_ssc([(cube, g) for g in graphs])
    picked = res.labels == (1,) and np.allclose(res.points, [g.positions[1] for g in graphs])
    tie = compute_ssc([(cube, graphs[0]), (cube, graphs[2])])
    mids = [(g.positions[1] + g.positions[2]) / 2 for g in (graphs[0], graphs[2])]
    tie_ok = tie.labels == (1, 2) and np.allclose(tie.points, mids, atol=0)
    assert report(8, picked and tie_ok, f"3-instance fixture selects node {res.labels} (hand-computed 1, "
                                         f"counts {res.counts}); tie fixture labels {tie.labels} -> midpoint: {tie_ok}")
