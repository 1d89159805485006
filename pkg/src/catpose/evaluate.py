"""Average-distance pose error about the category center, and recall reports."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, RigidPose

CSV_COLUMNS = ("category", "instance", "image", "omega", "threshold", "correct",
               "gt_center_x", "gt_center_y", "gt_center_z", "est_center_x", "est_center_y", "est_center_z")


@dataclass(eq=False)
class EvalCase:
    """``cloud`` is expressed in the instance's center frame."""

    cloud: PointCloud
    gt: RigidPose
    estimate: RigidPose | None
    diameter: float
    z: float = 0.3
    category: str = ""
    instance: str = ""
    image: str = ""

    def __post_init__(self):
        if not self.diameter > 0:
            raise ValueError("diameter must be positive")
        if not self.z > 0:
            raise ValueError("coarseness z must be positive")
        if len(self.cloud) == 0:
            raise ValueError("empty evaluation cloud")


def average_distance(case: EvalCase) -> float:
    """Mean distance between the cloud under the true and the estimated pose."""
    if case.estimate is None:
        return float("inf")
    a = case.gt.apply(case.cloud.points)
    b = case.estimate.apply(case.cloud.points)
    return float(np.linalg.norm(a - b, axis=1).mean())


def is_correct(omega: float, z: float, diameter: float) -> bool:
    if not diameter > 0:
        raise ValueError("diameter must be positive")
    return bool(omega <= z * diameter)


@dataclass
class EvalReport:
    rows: list
    recall_by_category: dict
    average: float
    config: dict = field(default_factory=dict)

    def to_json(self):
        return {"recall": self.recall_by_category, "average": self.average,
                "cases": len(self.rows), "correct": sum(r["correct"] for r in self.rows),
                "config": self.config}

    def write(self, csv_path, json_path):
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)
        Path(json_path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))


def score_case(case: EvalCase) -> dict:
    omega = average_distance(case)
    thr = case.z * case.diameter
    est = case.estimate.translation if case.estimate is not None else np.full(3, np.nan)
    return {"category": case.category, "instance": case.instance, "image": case.image,
            "omega": omega, "threshold": thr, "correct": int(is_correct(omega, case.z, case.diameter)),
            **{f"gt_center_{a}": float(v) for a, v in zip("xyz", case.gt.translation)},
            **{f"est_center_{a}": float(v) for a, v in zip("xyz", est)}}


def recall_from_rows(rows, config=None) -> EvalReport:
    if not rows:
        raise ValueError("no cases to score")
    rows = sorted(rows, key=lambda r: (r["category"], r["instance"], r["image"]))
    per = defaultdict(list)
    for r in rows:
        per[r["category"]].append(r["correct"])
    recalls = {c: 100.0 * sum(v) / len(v) for c, v in sorted(per.items())}
    return EvalReport(rows, recalls, category_average(recalls.values()), dict(config or {}))


def recall(cases, config=None) -> EvalReport:
    """Percent of cases whose top-1 estimate is correct, per category plus the category mean."""
    return recall_from_rows([score_case(c) for c in cases], config)


def category_average(recalls) -> float:
    vals = list(recalls)
    return float(sum(vals) / len(vals))
