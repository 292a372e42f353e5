"""Pose-error metrics, recall tables per device pair, and the overall score.

Translation error compares camera centers (C = -R^T t); recall thresholds
are inclusive; queries without an estimate count as failures in the
denominator. The overall score averages matrices cell-wise over scenes,
then takes the unweighted mean over cells, as a percentage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from crossloc.geometry import Pose, rotation_angle_deg


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    query_id: str
    query_device: str
    map_device: str
    estimated: Pose | None
    ground_truth: Pose


@dataclass(frozen=True)
class RecallMatrix:
    devices: tuple[str, ...]
    cells: dict[tuple[str, str], float | None]  # (query_device, map_device) -> recall
    counts: dict[tuple[str, str], int]

    def cell(self, query_device: str, map_device: str) -> float | None:
        return self.cells[(query_device, map_device)]

    def to_json(self) -> dict:
        return {
            "devices": list(self.devices),
            "cells": [
                {
                    "query_device": q,
                    "map_device": m,
                    "recall": self.cells[(q, m)],
                    "count": self.counts[(q, m)],
                }
                for q in self.devices
                for m in self.devices
            ],
        }

    def to_text(self) -> str:
        width = max(8, max((len(d) for d in self.devices), default=0) + 2)
        header = "query\\map".ljust(width) + "".join(d.rjust(width) for d in self.devices)
        lines = [header]
        for q in self.devices:
            row = q.ljust(width)
            for m in self.devices:
                c = self.cells[(q, m)]
                row += ("   -".rjust(width) if c is None else f"{100 * c:.2f}%".rjust(width))
            lines.append(row)
        return "\n".join(lines)


def pose_error(est: Pose, gt: Pose) -> tuple[float, float]:
    """(translation error in meters between camera centers, rotation error in degrees)."""
    trans = float(np.linalg.norm(est.camera_center() - gt.camera_center()))
    rot = rotation_angle_deg(est.rotation, gt.rotation)
    return trans, rot


def recall_at(
    records: list[EvalRecord], t_thresh: float = 0.5, r_thresh: float = 5.0
) -> float | None:
    """Fraction localized within both thresholds (inclusive); None when empty."""
    if not records:
        return None
    hits = 0
    for r in records:
        if r.estimated is None:
            continue
        t, rot = pose_error(r.estimated, r.ground_truth)
        if t <= t_thresh and rot <= r_thresh:
            hits += 1
    return hits / len(records)


def device_pair_matrix(
    records: list[EvalRecord], t_thresh: float = 0.5, r_thresh: float = 5.0
) -> RecallMatrix:
    """One recall cell per (query_device, map_device), first-seen device order."""
    devices: list[str] = []
    for r in records:
        for d in (r.query_device, r.map_device):
            if d not in devices:
                devices.append(d)
    groups: dict[tuple[str, str], list[EvalRecord]] = {}
    for r in records:
        groups.setdefault((r.query_device, r.map_device), []).append(r)
    cells = {}
    counts = {}
    for q in devices:
        for m in devices:
            recs = groups.get((q, m), [])
            cells[(q, m)] = recall_at(recs, t_thresh, r_thresh)
            counts[(q, m)] = len(recs)
    return RecallMatrix(tuple(devices), cells, counts)


def mean_matrix(per_scene: list[RecallMatrix]) -> RecallMatrix:
    """Cell-wise unweighted mean over scenes; device sets must agree."""
    if not per_scene:
        raise EvalError("no matrices to average")
    device_set = set(per_scene[0].devices)
    for m in per_scene[1:]:
        if set(m.devices) != device_set:
            raise EvalError("matrices cover different device sets")
    devices = per_scene[0].devices
    cells: dict[tuple[str, str], float | None] = {}
    counts: dict[tuple[str, str], int] = {}
    for q in devices:
        for mdev in devices:
            vals = [m.cells[(q, mdev)] for m in per_scene if m.cells[(q, mdev)] is not None]
            cells[(q, mdev)] = float(np.mean(vals)) if vals else None
            counts[(q, mdev)] = sum(m.counts[(q, mdev)] for m in per_scene)
    return RecallMatrix(devices, cells, counts)


def overall_score(per_scene: list[RecallMatrix]) -> float:
    """Unweighted cell mean of the scene-averaged matrix, as a percentage."""
    avg = mean_matrix(per_scene)
    vals = [v for v in avg.cells.values() if v is not None]
    if not vals:
        raise EvalError("no populated cells")
    return 100.0 * float(np.mean(vals))


def records_from_report(
    report_path, gt: dict[str, tuple[str, Pose]]
) -> list[EvalRecord]:
    """Join a localization report (JSON lines) against ground-truth poses.

    gt maps query_id -> (query_device, Pose). Every ground-truth query is
    scored; queries missing from the report count as failures.
    """
    from crossloc.mapstore import _pose_from_json

    estimates: dict[str, tuple[str, Pose | None]] = {}
    with open(report_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            pose = _pose_from_json(rec["final_pose"]) if rec.get("final_pose") else None
            estimates[rec["query_id"]] = (rec.get("map_device", "all"), pose)
    records = []
    for qid in sorted(gt):
        qdev, gt_pose = gt[qid]
        map_device, est = estimates.get(qid, ("all", None))
        records.append(EvalRecord(qid, qdev, map_device, est, gt_pose))
    return records
