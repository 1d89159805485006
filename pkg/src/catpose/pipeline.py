"""Directory-based pipeline stages.

Layout under the output directory::

    manifest.json                   generate
    meshes/<name>.off, skeletons/<name>.json
    renders/<name>/view_NNN.isad    render (+ renders/index.json)
    ssc.json                        ssc
    dataset.isas                    extract
    forests/<tag>.isaf              train (+ forests/<tag>.growth.csv)
    hypotheses/<tag>.json           infer
    reports/<tag>.csv, .json        eval

Each stage records a digest built from the config sections it uses and the
digests of its inputs. A stage recomputes the digest it expects from the
current config and refuses to run on inputs that disagree, so artifacts made
under different settings never get mixed. Every stage returns a flat summary
dict that the CLI prints as one JSON line.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import PipelineConfig, digest_of
from .dataset import PartSet, TrainingSet, extract_training_parts, load_dataset, save_dataset
from .errors import DigestMismatchError, InputError
from .evaluate import EvalCase, recall
from .forest import load_forest, save_forest, train_forest
from .generate import CategoryManifest, generate_category
from .geometry import PointCloud, RigidPose, load_mesh, model_diameter, sample_surface, save_off
from .infer import estimate_pose
from .render import Viewpoint, load_depth, render_depth, sample_viewpoints, save_depth
from .skeleton import (SSCResult, compute_ssc, load_skeleton, project_skeleton, save_skeleton,
                       validate_category_topology)


def _read_json(path, what):
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing {what}: {path} (run the earlier stage first)")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _check(found, expected, what, rerun):
    if found != expected:
        raise DigestMismatchError(
            f"{what} digest {found!r} does not match the current config ({expected!r}); rerun `{rerun}`")


def quality_tag(quality) -> str:
    return "-".join(sorted(quality))


# digests the current config expects for each stage


def generate_digest(cfg: PipelineConfig):
    return digest_of("generate", cfg.digest("generate"), cfg.seed)


def render_digest(cfg: PipelineConfig):
    return digest_of("render", generate_digest(cfg), cfg.digest("camera", "views"))


def ssc_digest(cfg: PipelineConfig):
    return digest_of("ssc", generate_digest(cfg))


def extract_digest(cfg: PipelineConfig):
    return digest_of("extract", render_digest(cfg), ssc_digest(cfg), cfg.digest("parts"))


def forest_config(cfg: PipelineConfig, quality=None):
    """The forest section with the pipeline seed and an optional quality override."""
    fc = dataclasses.replace(cfg.forest, seed=cfg.seed)
    if quality is not None:
        fc = dataclasses.replace(fc, quality=tuple(quality))
    return fc


def train_digest(cfg: PipelineConfig, quality=None):
    fc = forest_config(cfg, quality)
    return digest_of("train", extract_digest(cfg), dataclasses.asdict(fc))


def infer_digest(cfg: PipelineConfig, quality=None):
    return digest_of("infer", train_digest(cfg, quality), cfg.digest("inference"))


def eval_digest(cfg: PipelineConfig, quality=None):
    return digest_of("eval", infer_digest(cfg, quality), cfg.digest("eval"))


# stages


def load_manifest(out: Path, cfg: PipelineConfig) -> tuple[CategoryManifest, dict]:
    raw = _read_json(out / "manifest.json", "manifest")
    _check(raw.get("digest"), generate_digest(cfg), "manifest", "generate")
    try:
        return CategoryManifest.from_json(raw), raw
    except KeyError as exc:
        raise InputError(f"manifest lacks field {exc}") from None


def _instance_assets(out: Path, entry):
    return load_mesh(out / entry["mesh"]), load_skeleton(out / entry["skeleton"])


def run_generate(cfg: PipelineConfig, out: Path) -> dict:
    g = cfg.generate
    insts = generate_category(g.category, g.count, cfg.seed, g.n_train)
    validate_category_topology([i.skeleton for i in insts])
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    (out / "skeletons").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in insts:
        mesh_rel, skel_rel = f"meshes/{i.name}.off", f"skeletons/{i.name}.json"
        save_off(i.mesh, out / mesh_rel)
        save_skeleton(i.skeleton, out / skel_rel)
        entries.append({"name": i.name, "mesh": mesh_rel, "skeleton": skel_rel, "split": i.split,
                        "params": i.params})
    man = CategoryManifest(g.category, entries)
    _write_json(out / "manifest.json", {**man.to_json(), "digest": generate_digest(cfg), "seed": cfg.seed})
    return {"stage": "generate", "category": g.category, "instances": len(entries),
            "train": len(man.split("train")), "test": len(man.split("test")), "digest": generate_digest(cfg)}


def test_azimuth(cfg: PipelineConfig, k: int) -> float:
    """Azimuth offset of instance ``k``'s test spiral; seeded when not fixed in the config."""
    if cfg.views.test_azimuth_offset is not None:
        return float(cfg.views.test_azimuth_offset)
    return float(np.random.default_rng([cfg.seed, 7, k]).uniform(0.0, 2.0 * np.pi))


def run_render(cfg: PipelineConfig, out: Path) -> dict:
    man, _ = load_manifest(out, cfg)
    cam = cfg.camera.intrinsics()
    vc = cfg.views
    digest = render_digest(cfg)
    index = {"digest": digest, "camera": cam.to_dict(), "instances": {}}
    total = empty = 0
    for k, entry in enumerate(man.instances):
        mesh, _ = _instance_assets(out, entry)
        diam = model_diameter(PointCloud(mesh.vertices))
        if entry["split"] == "train":
            views = sample_viewpoints(vc.count, vc.radius_factor * diam, vc.hemisphere,
                                      min_elevation=vc.min_elevation)
            az = 0.0
        else:
            az = test_azimuth(cfg, k)
            views = sample_viewpoints(vc.test_count, vc.radius_factor * diam, vc.hemisphere,
                                      azimuth_offset=az, min_elevation=vc.min_elevation)
        folder = out / "renders" / entry["name"]
        folder.mkdir(parents=True, exist_ok=True)
        rows = []
        for v in views:
            depth = render_depth(mesh, v, cam)
            rel = f"renders/{entry['name']}/view_{v.index:03d}.isad"
            save_depth(depth, out / rel)
            rows.append({"index": v.index, "file": rel, "pose": v.pose.to_dict(),
                         "foreground": int(depth.foreground.sum())})
            empty += not depth.foreground.any()
        total += len(rows)
        index["instances"][entry["name"]] = {"split": entry["split"], "diameter": diam,
                                            "radius": vc.radius_factor * diam, "azimuth_offset": az,
                                            "views": rows}
    _write_json(out / "renders" / "index.json", index)
    return {"stage": "render", "images": total, "empty_images": int(empty), "digest": digest}


def load_render_index(out: Path, cfg: PipelineConfig) -> dict:
    idx = _read_json(out / "renders" / "index.json", "render index")
    _check(idx.get("digest"), render_digest(cfg), "render index", "render")
    return idx


def run_ssc(cfg: PipelineConfig, out: Path) -> dict:
    man, _ = load_manifest(out, cfg)
    train = man.split("train")
    assets = [_instance_assets(out, e) for e in train]
    res = compute_ssc(assets)
    per = {}
    for e in man.instances:
        _, skel = _instance_assets(out, e)
        per[e["name"]] = [float(x) for x in res.point_for(skel)]
    _write_json(out / "ssc.json", {**res.to_json(), "instances": [e["name"] for e in train],
                                   "per_instance": per, "digest": ssc_digest(cfg)})
    return {"stage": "ssc", "label": res.label, "labels": list(res.labels), "digest": ssc_digest(cfg)}


def load_ssc(out: Path, cfg: PipelineConfig):
    raw = _read_json(out / "ssc.json", "SSC file")
    _check(raw.get("digest"), ssc_digest(cfg), "SSC", "ssc")
    return SSCResult.from_json(raw), raw["per_instance"]


def run_extract(cfg: PipelineConfig, out: Path) -> dict:
    man, _ = load_manifest(out, cfg)
    idx = load_render_index(out, cfg)
    ssc, per = load_ssc(out, cfg)
    cam = cfg.camera.intrinsics()
    train = man.split("train")
    sets = []
    links = None
    node_count = 0
    for k, entry in enumerate(train):
        _, skel = _instance_assets(out, entry)
        links, node_count = skel.links, skel.node_count
        point = np.array(per[entry["name"]])
        for row in idx["instances"][entry["name"]]["views"]:
            view = Viewpoint(RigidPose.from_dict(row["pose"]), row["index"])
            depth = load_depth(out / row["file"])
            proj = project_skeleton(skel, view, cam)
            sets.append(extract_training_parts(depth, view, point, proj, cam, cfg.parts, k))
    parts = PartSet.concatenate(sets)
    if len(parts) == 0:
        raise InputError("no training parts extracted; check patch size and render resolution")
    ts = TrainingSet(man.category, [e["name"] for e in train], parts, cfg.parts, links, node_count,
                     ssc.labels, extract_digest(cfg))
    save_dataset(ts, out / "dataset.isas")
    return {"stage": "extract", "parts": len(parts), "instances": len(train), "digest": ts.config_digest}


def run_train(cfg: PipelineConfig, out: Path, quality=None, jobs: int = 1) -> dict:
    path = out / "dataset.isas"
    if not path.exists():
        raise InputError(f"missing dataset: {path} (run `extract` first)")
    ts = load_dataset(path)
    _check(ts.config_digest, extract_digest(cfg), "dataset", "extract")
    fc = forest_config(cfg, quality)
    tag = quality_tag(fc.quality)
    digest = train_digest(cfg, fc.quality)
    meta = {"digest": digest, "render_digest": render_digest(cfg), "tag": tag}
    forest = train_forest(ts, fc, jobs=jobs, metadata=meta)
    (out / "forests").mkdir(parents=True, exist_ok=True)
    save_forest(forest, out / "forests" / f"{tag}.isaf")
    rows = forest.growth_rows()
    with open(out / "forests" / f"{tag}.growth.csv", "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return {"stage": "train", "quality": tag, "trees": len(forest.trees),
            "nodes": int(sum(t.node_count for t in forest.trees)), "parts": len(ts), "digest": digest}


def load_tagged_forest(out: Path, cfg: PipelineConfig, quality=None):
    tag = quality_tag(forest_config(cfg, quality).quality)
    path = out / "forests" / f"{tag}.isaf"
    if not path.exists():
        raise InputError(f"missing forest: {path} (run `train --quality {tag.replace('-', ',')}` first)")
    forest = load_forest(path)
    _check(forest.metadata.get("digest"), train_digest(cfg, quality), "forest", "train")
    return forest, tag


def _infer_one(args):
    path, forest, cam, icfg, pcfg = args
    return [h.to_json() for h in estimate_pose(load_depth(path), forest, cam, icfg, pcfg)]


def infer_images(paths, forest, cfg: PipelineConfig, jobs: int = 1):
    """Hypothesis dicts for each depth file, in input order."""
    cam = cfg.camera.intrinsics()
    work = [(p, forest, cam, cfg.inference, cfg.parts) for p in paths]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_infer_one, work))
    return [_infer_one(w) for w in work]


def run_infer(cfg: PipelineConfig, out: Path, quality=None, jobs: int = 1, images=None,
              output=None, overlay_dir=None) -> dict:
    forest, tag = load_tagged_forest(out, cfg, quality)
    if images:
        rows = [{"file": str(p)} for p in images]
        paths = [Path(p) for p in images]
        digest = digest_of("infer-files", forest.metadata["digest"], cfg.digest("inference"),
                           [str(p) for p in images])
    else:
        idx = load_render_index(out, cfg)
        rows, paths = [], []
        for name, inst in sorted(idx["instances"].items()):
            if inst["split"] != "test":
                continue
            for v in inst["views"]:
                rows.append({"instance": name, "view": v["index"], "file": v["file"]})
                paths.append(out / v["file"])
        digest = infer_digest(cfg, quality)
    if not rows:
        raise InputError("no test images to run inference on")
    hyps = infer_images(paths, forest, cfg, jobs)
    for r, h in zip(rows, hyps):
        r["hypotheses"] = h
    doc = {"digest": digest, "forest_digest": forest.metadata["digest"], "quality": tag,
           "inference": cfg.to_dict()["inference"], "images": rows}
    target = Path(output) if output else out / "hypotheses" / f"{tag}.json"
    _write_json(target, doc)
    if overlay_dir:
        cam = cfg.camera.intrinsics()
        Path(overlay_dir).mkdir(parents=True, exist_ok=True)
        for k, (p, h) in enumerate(zip(paths, hyps)):
            write_overlay(load_depth(p), h, cam, Path(overlay_dir) / f"overlay_{k:04d}.png")
    return {"stage": "infer", "quality": tag, "images": len(rows),
            "with_hypothesis": sum(bool(h) for h in hyps), "output": str(target), "digest": digest}


def write_overlay(depth, hypotheses, cam, path):
    """Grey depth rendering with the top hypothesis center marked in red."""
    from PIL import Image, ImageDraw

    d = depth.depth.astype(np.float64)
    fg = depth.foreground
    grey = np.zeros(d.shape, np.uint8)
    if fg.any():
        lo, hi = d[fg].min(), d[fg].max()
        grey[fg] = (255 - 200 * (d[fg] - lo) / max(hi - lo, 1e-9)).astype(np.uint8)
    img = Image.fromarray(grey).convert("RGB")
    draw = ImageDraw.Draw(img)
    for rank, h in enumerate(hypotheses[:3]):
        u, v, _ = cam.project(np.array(h["center_m"])[None])[0]
        if not np.isfinite(u):
            continue
        r = 6 if rank == 0 else 3
        color = (255, 0, 0) if rank == 0 else (255, 160, 0)
        draw.line([(u - r, v), (u + r, v)], fill=color)
        draw.line([(u, v - r), (u, v + r)], fill=color)
    img.save(path)


def eval_cases(cfg: PipelineConfig, out: Path, hyp_doc: dict, man: CategoryManifest):
    idx = load_render_index(out, cfg)
    _, per = load_ssc(out, cfg)
    ec = cfg.eval
    entries = {e["name"]: e for e in man.instances}
    clouds = {}
    cases = []
    for row in hyp_doc["images"]:
        name = row["instance"]
        if name not in clouds:
            mesh, _ = _instance_assets(out, entries[name])
            sp = np.array(per[name])
            cloud = sample_surface(mesh, ec.sample_count, ec.sample_seed)
            clouds[name] = (PointCloud(cloud.points - sp), model_diameter(PointCloud(mesh.vertices)), sp)
        X, diam, sp = clouds[name]
        view = next(v for v in idx["instances"][name]["views"] if v["index"] == row["view"])
        vpose = RigidPose.from_dict(view["pose"])
        gt = RigidPose(vpose.rotation, vpose.apply(sp))
        h = row["hypotheses"]
        est = RigidPose.from_euler(h[0]["euler_rad"], h[0]["center_m"]) if h else None
        cases.append(EvalCase(X, gt, est, diam, ec.z, man.category, name, f"view_{row['view']:03d}"))
    return cases


def run_eval(cfg: PipelineConfig, out: Path, quality=None) -> dict:
    man, _ = load_manifest(out, cfg)
    tag = quality_tag(forest_config(cfg, quality).quality)
    doc = _read_json(out / "hypotheses" / f"{tag}.json", "hypotheses")
    _check(doc.get("digest"), infer_digest(cfg, quality), "hypotheses", "infer")
    cases = eval_cases(cfg, out, doc, man)
    digest = eval_digest(cfg, quality)
    report = recall(cases, {"z": cfg.eval.z, "quality": tag, "digest": digest, "top_k_scored": 1,
                            "sample_count": cfg.eval.sample_count})
    (out / "reports").mkdir(parents=True, exist_ok=True)
    report.write(out / "reports" / f"{tag}.csv", out / "reports" / f"{tag}.json")
    return {"stage": "eval", "quality": tag, "cases": len(report.rows), "recall": report.recall_by_category,
            "average": report.average, "z": cfg.eval.z, "digest": digest}


STAGES = ("generate", "render", "ssc", "extract", "train", "infer", "eval")


def run_all(cfg: PipelineConfig, out: Path, quality=None, jobs: int = 1) -> list[dict]:
    out.mkdir(parents=True, exist_ok=True)
    return [run_generate(cfg, out), run_render(cfg, out), run_ssc(cfg, out), run_extract(cfg, out),
            run_train(cfg, out, quality, jobs), run_infer(cfg, out, quality, jobs),
            run_eval(cfg, out, quality)]
