"""Joint-axis, part-motion and Chamfer metrics against ground truth."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .field import PRISMATIC, REVOLUTE, FieldError, JointModel, SceneBundle, StateSnapshot

CHAMFER_NOTE = "chamfer = 1e3 * 0.5 * (mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2), Gaussian centers"


class MetricsError(ValueError):
    pass


def _check_kind(pred: JointModel, gt: JointModel):
    if pred.kind != gt.kind:
        raise MetricsError(f"joint kind mismatch: predicted {pred.kind}, truth {gt.kind}")


def axis_angle_error(pred: JointModel, gt: JointModel) -> float:
    """Angle between axis directions in degrees, ignoring sign (range [0, 90])."""
    _check_kind(pred, gt)
    # atan2 keeps precision for nearly parallel axes, where acos does not
    s = float(np.linalg.norm(np.cross(pred.axis, gt.axis)))
    return math.degrees(math.atan2(s, abs(float(pred.axis @ gt.axis))))


def line_distance(p1, a1, p2, a2) -> float:
    """Minimum distance between the infinite lines ``p1 + s a1`` and ``p2 + t a2``."""
    p1, a1, p2, a2 = (np.asarray(v, dtype=float) for v in (p1, a1, p2, a2))
    a1 = a1 / np.linalg.norm(a1)
    a2 = a2 / np.linalg.norm(a2)
    n = np.cross(a1, a2)
    nn = np.linalg.norm(n)
    w = p2 - p1
    if nn < 1e-12:
        return float(np.linalg.norm(np.cross(w, a1)))
    return float(abs(w @ n) / nn)


def axis_position_error(pred: JointModel, gt: JointModel) -> Optional[float]:
    """Distance between axis lines; ``None`` (not applicable) for prismatic joints."""
    if pred.kind == PRISMATIC or gt.kind == PRISMATIC:
        return None
    return line_distance(pred.pivot, pred.axis, gt.pivot, gt.axis)


def part_motion_error(pred: JointModel, gt: JointModel) -> float:
    """Degrees for revolute joints, scene units for prismatic ones."""
    _check_kind(pred, gt)
    diff = abs(pred.magnitude - gt.magnitude)
    return math.degrees(diff) if pred.kind == REVOLUTE else diff


def _nonempty(A, B):
    A = np.asarray(A, dtype=float).reshape(-1, 3)
    B = np.asarray(B, dtype=float).reshape(-1, 3)
    if not len(A) or not len(B):
        raise MetricsError("chamfer distance of an empty point set")
    return A, B


def chamfer(A, B) -> float:
    A, B = _nonempty(A, B)
    dab, _ = cKDTree(B).query(A)
    dba, _ = cKDTree(A).query(B)
    return 1e3 * 0.5 * (float(np.mean(dab ** 2)) + float(np.mean(dba ** 2)))


def chamfer_brute(A, B) -> float:
    A, B = _nonempty(A, B)
    d2 = np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=2)
    return 1e3 * 0.5 * (float(d2.min(axis=1).mean()) + float(d2.min(axis=0).mean()))


def match_labels(pred_labels, true_labels) -> Dict[int, int]:
    """Hungarian matching of non-zero labels by overlap count; 0 always maps to 0."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    P = sorted(int(v) for v in np.unique(pred_labels) if v > 0)
    T = sorted(int(v) for v in np.unique(true_labels) if v > 0)
    mapping = {0: 0}
    if P and T:
        overlap = np.array([[np.sum((pred_labels == p) & (true_labels == t)) for t in T] for p in P])
        rows, cols = linear_sum_assignment(-overlap)
        mapping.update({P[r]: T[c] for r, c in zip(rows, cols)})
    return mapping


def label_accuracy(pred_labels, true_labels, mapping=None) -> float:
    pred_labels = np.asarray(pred_labels)
    mapping = match_labels(pred_labels, true_labels) if mapping is None else mapping
    mapped = np.array([mapping.get(int(v), -1) for v in pred_labels])
    return float(np.mean(mapped == np.asarray(true_labels))) if len(mapped) else 1.0


def segment_label_accuracy(field: StateSnapshot, bundle: SceneBundle, mapping=None,
                           samples: int = 9) -> float:
    """Fraction of each primitive's major-axis segment whose nearest ground-truth part
    matches the primitive's label, averaged over primitives."""
    from . import quaternion as quat

    gt = bundle.ground_truth
    R = quat.to_matrix(field.q)
    major = np.argmax(field.s, axis=1)
    e = R[np.arange(len(field)), :, major]
    half = 0.5 * field.s[np.arange(len(field)), major]
    ts = np.linspace(-1.0, 1.0, samples)
    pts = field.mu[:, None, :] + (ts[None, :, None] * half[:, None, None]) * e[:, None, :]
    truth = gt.geometric_labels(pts.reshape(-1, 3)).reshape(len(field), samples)
    if mapping is None:
        mapping = match_labels(field.label, truth[:, samples // 2])
    mapped = np.array([mapping.get(int(v), -1) for v in field.label])
    return float(np.mean(truth == mapped[:, None]))


def true_labels_for(field: StateSnapshot, bundle: SceneBundle, source=None) -> np.ndarray:
    """Ground-truth label of every primitive of a (possibly refined) canonical field.

    Children inherit the recorded label of their source, since they move with it,
    except children of planted straddlers, which take the label of the nearest
    ground-truth part geometry.
    """
    gt = bundle.ground_truth
    if source is None:
        if len(field) != bundle.N:
            raise MetricsError("refined field needs its source indices")
        return gt.labels.copy()
    source = np.asarray(source)
    counts = np.bincount(source, minlength=bundle.N)
    truth = gt.labels[source].copy()
    split = (counts[source] > 1) & np.isin(source, gt.straddlers)
    if np.any(split):
        truth[split] = gt.geometric_labels(field.mu[split])
    return truth


@dataclass
class MetricsReport:
    parts: List[Dict] = field(default_factory=list)
    cd_s: Optional[float] = None
    cd_w: Optional[float] = None
    label_accuracy: Optional[float] = None
    unmatched_pred: List[int] = field(default_factory=list)
    unmatched_gt: List[int] = field(default_factory=list)
    state_pair: Tuple[int, int] = (0, 1)

    def mean(self, key) -> Optional[float]:
        vals = [p[key] for p in self.parts if p.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def kinds_correct(self) -> bool:
        return not self.unmatched_gt and all(p["kind_match"] for p in self.parts)

    def to_dict(self):
        return {"note": CHAMFER_NOTE, "state_pair": list(self.state_pair),
                "parts": self.parts,
                "summary": {"axis_ang": self.mean("axis_ang"), "axis_pos": self.mean("axis_pos"),
                            "part_motion_revolute_deg": self.mean("part_motion_deg"),
                            "part_motion_prismatic": self.mean("part_motion_units"),
                            "cd_s": self.cd_s, "cd_m": self.mean("cd_m"), "cd_w": self.cd_w,
                            "label_accuracy": self.label_accuracy,
                            "kinds_correct": self.kinds_correct},
                "unmatched_pred": self.unmatched_pred, "unmatched_gt": self.unmatched_gt}

    def to_csv(self) -> str:
        cols = ["pred_label", "gt_label", "kind_pred", "kind_gt", "kind_match", "axis_ang",
                "axis_pos", "part_motion_deg", "part_motion_units", "cd_m"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols + ["cd_s", "cd_w", "label_accuracy"])
        for p in self.parts:
            w.writerow([p.get(c) for c in cols] + [self.cd_s, self.cd_w, self.label_accuracy])
        return buf.getvalue()

    def write(self, json_path, csv_path=None):
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            Path(csv_path).write_text(self.to_csv())


def evaluate(bundle: SceneBundle, field: StateSnapshot, joints: Dict[int, JointModel],
             state_pair: Tuple[int, int] = (0, None), source=None) -> MetricsReport:
    """Score a labeled canonical field and per-part joints against ground truth.

    Predicted parts are matched to ground-truth parts by Hungarian assignment on the
    Chamfer distance between their canonical center sets.
    """
    gt = bundle.ground_truth
    if gt is None:
        raise MetricsError("scene has no ground_truth block")
    a, b = state_pair
    b = bundle.K - 1 if b is None else b
    keep = np.ones(bundle.N, dtype=bool)
    keep[gt.straddlers] = False
    gt_mu, gt_lab = bundle.canonical.mu[keep], gt.labels[keep]
    pred_mu, pred_lab = field.mu, field.label

    P = sorted(int(v) for v in np.unique(pred_lab) if v > 0)
    T = gt.movable_labels
    mapping = {0: 0}
    if P and T:
        cost = np.array([[chamfer(pred_mu[pred_lab == p], gt_mu[gt_lab == t]) for t in T]
                         for p in P])
        rows, cols = linear_sum_assignment(cost)
        mapping.update({P[r]: T[c] for r, c in zip(rows, cols)})
    report = MetricsReport(state_pair=(a, b))
    report.unmatched_pred = [p for p in P if p not in mapping]
    report.unmatched_gt = [t for t in T if t not in mapping.values()]

    for p in P:
        if p not in mapping:
            continue
        t = mapping[p]
        truth = gt.part(t).joint_between(a, b)
        row = {"pred_label": p, "gt_label": t, "kind_gt": truth.kind, "kind_pred": None,
               "kind_match": False, "axis_ang": None, "axis_pos": None,
               "part_motion_deg": None, "part_motion_units": None,
               "cd_m": chamfer(pred_mu[pred_lab == p], gt_mu[gt_lab == t])}
        pred = joints.get(p)
        if pred is not None:
            row["kind_pred"] = pred.kind
            row["kind_match"] = pred.kind == truth.kind
            if row["kind_match"]:
                row["axis_ang"] = axis_angle_error(pred, truth)
                row["axis_pos"] = axis_position_error(pred, truth)
                key = "part_motion_deg" if truth.kind == REVOLUTE else "part_motion_units"
                row[key] = part_motion_error(pred, truth)
        report.parts.append(row)

    if np.any(pred_lab == 0) and np.any(gt_lab == 0):
        report.cd_s = chamfer(pred_mu[pred_lab == 0], gt_mu[gt_lab == 0])
    if len(pred_mu) and len(gt_mu):
        report.cd_w = chamfer(pred_mu, gt_mu)
    truth_labels = true_labels_for(field, bundle, source)
    report.label_accuracy = label_accuracy(pred_lab, truth_labels, mapping)
    return report
