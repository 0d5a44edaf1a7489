"""Joint typing and parameter fitting from two-state point correspondences."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from scipy.spatial import cKDTree

from .field import PRISMATIC, REVOLUTE, JointModel, SceneBundle


class KinematicsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RigidAlignment:
    rotation: np.ndarray
    translation: np.ndarray
    rmsd: float

    @property
    def angle(self) -> float:
        return rotation_angle(self.rotation)


@dataclass(frozen=True, eq=False)
class ResidualSpectrum:
    sigma: np.ndarray  # descending
    ratio: float


def _as_pair(P, Q):
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise KinematicsError(f"point count mismatch: {P.shape} vs {Q.shape}")
    if len(P) < 3:
        raise KinematicsError("insufficient support: need at least 3 points")
    return P, Q


def rotation_angle(R) -> float:
    return math.acos(min(1.0, max(-1.0, (np.trace(R) - 1.0) / 2.0)))


def kabsch_align(P, Q) -> RigidAlignment:
    """Least-squares ``(R, t)`` with ``Q ≈ R P + t``, reflection-corrected."""
    P, Q = _as_pair(P, Q)
    pbar, qbar = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - pbar, Q - qbar
    sv = np.linalg.svd(Pc, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise KinematicsError("degenerate point set (collinear or coincident)")
    U, _, Vt = np.linalg.svd(Pc.T @ Qc)
    d = 1.0 if np.linalg.det(Vt.T @ U.T) >= 0 else -1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = qbar - R @ pbar
    res = Q - (P @ R.T + t)
    return RigidAlignment(R, t, float(np.sqrt(np.mean(np.sum(res ** 2, axis=1)))))


def residual_spectrum(P, Q) -> ResidualSpectrum:
    """Singular values of the raw displacement matrix ``[q_i - p_i]`` and
    ``r = (s2 + s3) / s1``."""
    P, Q = _as_pair(P, Q)
    sigma = np.linalg.svd((Q - P).T, compute_uv=False)
    sigma = np.pad(sigma, (0, 3 - len(sigma)))
    ratio = float((sigma[1] + sigma[2]) / sigma[0]) if sigma[0] > 0 else 0.0
    return ResidualSpectrum(sigma, ratio)


@dataclass
class JointClassification:
    kind: str
    spectrum: ResidualSpectrum
    alignment: RigidAlignment
    angle: float
    rank_kind: str
    disagreement: bool


def classify_joint(P, Q, tau_rank: float = 0.05, theta_min: float = math.radians(1.0)):
    """Revolute vs prismatic.

    The rank test labels rank-1 displacement fields prismatic. A rotation whose
    points all lie in a plane containing the hinge (a door panel) is also rank-1,
    so the Kabsch angle has the final word whenever the two tests disagree; the
    disagreement is reported.
    """
    P, Q = _as_pair(P, Q)
    spec = residual_spectrum(P, Q)
    if spec.sigma[0] < 1e-9:
        raise KinematicsError("no motion between the two states")
    align = kabsch_align(P, Q)
    theta = align.angle
    rank_kind = PRISMATIC if spec.ratio < tau_rank else REVOLUTE
    kind = PRISMATIC if theta < theta_min else REVOLUTE
    return JointClassification(kind, spec, align, theta, rank_kind, rank_kind != kind)


def rotation_axis(R) -> np.ndarray:
    """Unit eigenvector of ``R`` for eigenvalue 1, signed so the rotation is
    counter-clockwise (positive angle) about it."""
    w, V = np.linalg.eig(R)
    u = np.real(V[:, np.argmin(np.abs(w - 1.0))])
    u /= np.linalg.norm(u)
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if skew @ u < 0:
        u = -u
    return u


def pivot_from_static(static_points, part_points, fraction: float = 0.1) -> np.ndarray:
    """Mean of the static centroids nearest the moving part (the hinge-adjacent ones).

    Keeps the ``fraction`` of part-count static points (at least 3) closest to any
    point of the part.
    """
    S = np.asarray(static_points, dtype=float)
    d, _ = cKDTree(np.asarray(part_points, dtype=float)).query(S)
    n = min(len(S), max(3, int(fraction * len(part_points))))
    return S[np.argsort(d, kind="stable")[:n]].mean(axis=0)


def fit_revolute(P, Q, theta_min: float = math.radians(1.0), static_points=None):
    """Axis, angle and pivot of the rotation taking ``P`` to ``Q``.

    Returns ``(joint, diagnostics)``. The pivot solves ``(I - R) x = t`` in the
    least-squares sense and is then slid along the axis to the point nearest the
    centroid of ``P``; with ``static_points`` the axis line instead passes through the
    mean of the static centroids adjacent to the part.
    """
    P, Q = _as_pair(P, Q)
    align = kabsch_align(P, Q)
    R, t = align.rotation, align.translation
    theta = rotation_angle(R)
    if theta < theta_min:
        raise KinematicsError(f"rotation angle {math.degrees(theta):.3g} deg below threshold")
    u = rotation_axis(R)
    diag = {"theta": theta, "rmsd": align.rmsd, "axis_ambiguous": False}
    if math.pi - theta < 1e-6:
        diag["axis_ambiguous"] = True
        diag["alternate_axis"] = (-u).tolist()
    if static_points is not None:
        x = pivot_from_static(static_points, P)
    else:
        x, *_ = np.linalg.lstsq(np.eye(3) - R, t, rcond=1e-10)
    c = P.mean(axis=0)
    pivot = x + u * ((c - x) @ u)
    return JointModel(REVOLUTE, u, theta, pivot), diag


def fit_prismatic(P, Q) -> JointModel:
    P, Q = _as_pair(P, Q)
    t = Q.mean(axis=0) - P.mean(axis=0)
    d = float(np.linalg.norm(t))
    if d <= 1e-9:
        raise KinematicsError("zero translation")
    return JointModel(PRISMATIC, t / d, d)


@dataclass
class PartEstimate:
    label: int
    joint: Optional[JointModel] = None
    error: Optional[str] = None
    diagnostics: Dict = field(default_factory=dict)

    def to_dict(self):
        d = {"label": self.label}
        if self.joint is not None:
            d.update(self.joint.to_dict())
        if self.error is not None:
            d["error"] = self.error
        d["diagnostics"] = self.diagnostics
        return d


def analyze_parts(bundle: SceneBundle, labels, state_a: int = 0, state_b: Optional[int] = None,
                  tau_rank: float = 0.05, theta_min: float = math.radians(1.0),
                  pivot_method: str = "kabsch") -> Dict[int, PartEstimate]:
    """Classify and fit a joint for every non-static label. Labels < 0 are ignored."""
    if state_b is None:
        state_b = bundle.K - 1
    labels = np.asarray(labels)
    A = bundle.states[state_a].mu
    B = bundle.states[state_b].mu
    static_pts = A[labels == 0]
    out = {}
    for lab in sorted(int(v) for v in np.unique(labels) if v > 0):
        sel = labels == lab
        est = PartEstimate(lab)
        try:
            if sel.sum() < 3:
                raise KinematicsError(f"insufficient support: {int(sel.sum())} primitives")
            if state_a == state_b:
                raise KinematicsError("no motion between the two states")
            P, Q = A[sel], B[sel]
            cls = classify_joint(P, Q, tau_rank, theta_min)
            est.diagnostics = {"r": cls.spectrum.ratio, "sigma": cls.spectrum.sigma.tolist(),
                               "theta": cls.angle, "rmsd": cls.alignment.rmsd,
                               "rank_kind": cls.rank_kind, "disagreement": cls.disagreement,
                               "support": int(sel.sum())}
            if cls.kind == REVOLUTE:
                static = static_pts if pivot_method == "static" and len(static_pts) else None
                est.joint, extra = fit_revolute(P, Q, theta_min, static)
                est.diagnostics.update(extra)
            else:
                est.joint = fit_prismatic(P, Q)
        except KinematicsError as exc:
            est.error = str(exc)
        out[lab] = est
    return out


def write_joint_report(estimates: Dict[int, PartEstimate], path, state_pair=None) -> None:
    doc = {"state_pair": list(state_pair) if state_pair else None,
           "parts": [estimates[k].to_dict() for k in sorted(estimates)]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_joint_report(path) -> Dict[int, JointModel]:
    doc = json.loads(Path(path).read_text())
    return {int(p["label"]): JointModel.from_dict(p) for p in doc["parts"] if "kind" in p}
