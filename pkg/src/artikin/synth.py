"""Procedural articulated scenes with exact ground truth.

Gaussians are sampled on the surfaces of oriented boxes (one static body plus
movable parts), each movable part follows a joint with a per-state magnitude
schedule, and cameras sit on a ring looking at the object. Everything is a
deterministic function of the scene spec and its seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import quaternion as quat
from .field import (Box, CameraModel, FieldError, GroundTruth, JointModel, PartTruth,
                    PRISMATIC, REVOLUTE, SceneBundle, StateSnapshot, look_at)
from .splat import SplatConfig, render_view


@dataclass(frozen=True)
class PartSpec:
    box: Box
    joint: JointModel  # magnitude unused; the schedule drives each state
    schedule: Tuple[float, ...]
    color: Tuple[float, float, float] = (0.8, 0.3, 0.2)


@dataclass(frozen=True)
class StraddlerSpec:
    """An elongated primitive deliberately laid across a part seam."""

    center: Tuple[float, float, float]
    direction: Tuple[float, float, float]
    length: float
    moves_with: int
    thickness: float = 0.01


@dataclass(frozen=True)
class CameraRing:
    count: int = 20
    radius: float = 3.0
    elevation_deg: Tuple[float, float] = (30.0, 60.0)
    width: int = 128
    height: int = 128
    fov_deg: float = 45.0
    target: Tuple[float, float, float] = (0.0, -0.1, 0.5)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    K: int = 4
    static: Optional[Box] = None
    parts: Tuple[PartSpec, ...] = ()
    total_gaussians: int = 2000
    gaussians_per_part: Optional[int] = None  # overrides area-proportional allocation
    static_color: Tuple[float, float, float] = (0.55, 0.55, 0.6)
    opacity: float = 0.95
    cameras: CameraRing = CameraRing()
    straddlers: Tuple[StraddlerSpec, ...] = ()

    def validate(self):
        if self.K < 2:
            raise FieldError("a scene needs at least two states")
        for j, p in enumerate(self.parts):
            if len(p.schedule) != self.K:
                raise FieldError(f"part {j + 1}: schedule has {len(p.schedule)} entries, K={self.K}")
            if p.joint.kind == REVOLUTE and any(not -math.pi < m <= math.pi for m in p.schedule):
                raise FieldError(f"part {j + 1}: revolute magnitude outside (-pi, pi]")
        boxes = ([self.static] if self.static is not None else []) + [p.box for p in self.parts]
        for a in range(len(boxes)):
            for b in range(a + 1, len(boxes)):
                if boxes_overlap(boxes[a], boxes[b]):
                    raise FieldError("parts overlap at state 0")


def boxes_overlap(a: Box, b: Box, tol: float = 1e-12) -> bool:
    """Separating-axis test; touching boxes do not overlap."""
    axes = [a.rotation[:, i] for i in range(3)] + [b.rotation[:, i] for i in range(3)]
    axes += [np.cross(a.rotation[:, i], b.rotation[:, j]) for i in range(3) for j in range(3)]
    d = b.center - a.center
    for ax in axes:
        n = np.linalg.norm(ax)
        if n < 1e-12:
            continue
        ax = ax / n
        ra = np.sum(0.5 * a.extents * np.abs(ax @ a.rotation))
        rb = np.sum(0.5 * b.extents * np.abs(ax @ b.rotation))
        if abs(d @ ax) >= ra + rb - tol:
            return False
    return True


def _box_surface_area(box: Box) -> float:
    a, b, c = box.extents
    return 2 * (a * b + b * c + a * c)


def sample_box_surface(box: Box, n: int, rng: np.random.Generator, color, opacity):
    """``n`` surface-aligned Gaussians on a box: flat discs sized by local spacing."""
    e = box.extents
    faces = []  # (normal axis, sign, area)
    for ax in range(3):
        area = e[(ax + 1) % 3] * e[(ax + 2) % 3]
        faces += [(ax, -1.0, area), (ax, 1.0, area)]
    areas = np.array([f[2] for f in faces])
    choice = rng.choice(len(faces), size=n, p=areas / areas.sum())
    spacing = math.sqrt(areas.sum() / max(n, 1))
    mu = np.empty((n, 3))
    q = np.empty((n, 4))
    s = np.empty((n, 3))
    for i, f in enumerate(choice):
        ax, sign, _ = faces[f]
        t1, t2 = (ax + 1) % 3, (ax + 2) % 3
        local = np.zeros(3)
        local[ax] = sign * 0.5 * e[ax]
        local[t1] = rng.uniform(-0.5, 0.5) * e[t1]
        local[t2] = rng.uniform(-0.5, 0.5) * e[t2]
        # face frame: columns (tangent1, tangent2, normal), right-handed
        frame = np.zeros((3, 3))
        frame[t1, 0] = 1.0
        frame[t2, 1] = 1.0
        frame[ax, 2] = 1.0
        if np.linalg.det(frame) < 0:
            frame[:, 1] *= -1
        phi = rng.uniform(0, math.pi)
        spin = quat.to_matrix(quat.from_axis_angle([0, 0, 1], phi))
        R = box.rotation @ frame @ spin
        mu[i] = box.center + box.rotation @ local
        q[i] = quat.from_matrix(R)
        s[i] = spacing * np.array([rng.uniform(1.0, 1.4), rng.uniform(0.7, 1.0), 0.15])
    rgb = np.clip(np.asarray(color) + rng.normal(0, 0.03, size=(n, 3)), 0, 1)
    return mu, q, s, rgb, np.full(n, opacity)


def _allocate(spec: SceneSpec, boxes: Sequence[Box]) -> List[int]:
    if spec.gaussians_per_part is not None:
        return [spec.gaussians_per_part] * len(boxes)
    areas = np.array([_box_surface_area(b) for b in boxes])
    raw = spec.total_gaussians * areas / areas.sum()
    counts = np.floor(raw).astype(int)
    counts[np.argsort(-(raw - counts), kind="stable")[: spec.total_gaussians - counts.sum()]] += 1
    return counts.tolist()


def ring_cameras(ring: CameraRing, rng: np.random.Generator) -> List[CameraModel]:
    f = 0.5 * ring.width / math.tan(math.radians(ring.fov_deg) / 2)
    lo, hi = np.radians(ring.elevation_deg)
    target = np.asarray(ring.target, dtype=float)
    cams = []
    for v in range(ring.count):
        az = 2 * math.pi * (v + rng.uniform(0, 1)) / ring.count
        el = rng.uniform(lo, hi)
        eye = target + ring.radius * np.array([math.cos(el) * math.cos(az),
                                               math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(look_at(eye, target, f, f, ring.width, ring.height))
    return cams


def generate_scene(spec: SceneSpec) -> SceneBundle:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    boxes, colors, labels = [], [], []
    if spec.static is not None:
        boxes.append(spec.static)
        colors.append(spec.static_color)
        labels.append(0)
    for j, p in enumerate(spec.parts):
        boxes.append(p.box)
        colors.append(p.color)
        labels.append(j + 1)
    chunks = [sample_box_surface(b, n, rng, c, spec.opacity)
              for b, n, c in zip(boxes, _allocate(spec, boxes), colors)]
    mu = np.concatenate([c[0] for c in chunks]) if chunks else np.zeros((0, 3))
    q = np.concatenate([c[1] for c in chunks]) if chunks else np.zeros((0, 4))
    s = np.concatenate([c[2] for c in chunks]) if chunks else np.zeros((0, 3))
    rgb = np.concatenate([c[3] for c in chunks]) if chunks else np.zeros((0, 3))
    opacity = np.concatenate([c[4] for c in chunks]) if chunks else np.zeros(0)
    gt_labels = np.concatenate([np.full(len(c[0]), lab) for c, lab in zip(chunks, labels)]
                               ).astype(np.int64) if chunks else np.zeros(0, np.int64)

    straddler_idx = []
    for st in spec.straddlers:
        d = np.asarray(st.direction, float)
        d /= np.linalg.norm(d)
        helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        b = np.cross(d, helper)
        b /= np.linalg.norm(b)
        R = np.stack([d, b, np.cross(d, b)], axis=1)
        straddler_idx.append(len(opacity))
        mu = np.vstack([mu, st.center])
        q = np.vstack([q, quat.from_matrix(R)])
        s = np.vstack([s, [st.length, st.thickness, st.thickness]])
        base = spec.parts[st.moves_with - 1].color if st.moves_with > 0 else spec.static_color
        rgb = np.vstack([rgb, base])
        opacity = np.append(opacity, spec.opacity)
        gt_labels = np.append(gt_labels, st.moves_with)

    zeros = np.zeros(len(opacity), dtype=np.int64)
    states = []
    for k in range(spec.K):
        mu_k, q_k = mu.copy(), q.copy()
        for j, p in enumerate(spec.parts):
            sel = gt_labels == j + 1
            R, t = replace(p.joint, magnitude=p.schedule[k]).transform()
            mu_k[sel] = mu[sel] @ R.T + t
            q_k[sel] = quat.normalize(quat.multiply(quat.from_matrix(R), q[sel]))
        states.append(StateSnapshot(mu_k, q_k, s, rgb, opacity, zeros, k))
    canonical = states[0]

    cameras = [ring_cameras(spec.cameras, rng) for _ in range(spec.K)]
    parts = [PartTruth(j + 1, p.joint.kind, p.joint.axis, np.array(p.schedule, float),
                       p.joint.pivot, p.box) for j, p in enumerate(spec.parts)]
    gt = GroundTruth(gt_labels, parts, spec.static, straddler_idx)
    return SceneBundle(canonical, states, cameras, gt).validate()


def ground_truth_masks(bundle: SceneBundle, view: int, state: int = 0,
                       cfg: SplatConfig = SplatConfig(), threshold: float = 0.5):
    """Per-part silhouettes: pixels where the part's composited weight exceeds ``threshold``.

    Planted straddlers are reconstruction artifacts, not object geometry, so they
    are left out of the ground-truth render.
    """
    from .refine import PartMask

    gt = bundle.ground_truth
    if gt is None:
        raise FieldError("scene has no ground truth")
    keep = np.ones(bundle.N, dtype=bool)
    keep[gt.straddlers] = False
    snap = bundle.states[state].subset(np.flatnonzero(keep))
    cam = bundle.cameras[state][view]
    out = render_view(snap, cam, cfg, labels=gt.labels[keep])
    masks = []
    for lab in [0] + gt.movable_labels:
        w = out.weight_maps.get(lab)
        mask = np.zeros((cam.height, cam.width), bool) if w is None else w > threshold
        masks.append(PartMask(view, lab, mask))
    return masks


# --- presets -------------------------------------------------------------------------

def _box(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return Box(0.5 * (lo + hi), hi - lo)


def _deg(*vals):
    return tuple(math.radians(v) for v in vals)


BODY = _box((-0.5, -0.3, 0.0), (0.5, 0.3, 1.0))
DOOR = PartSpec(_box((-0.45, -0.35, 0.52), (-0.03, -0.33, 0.96)),
                JointModel(REVOLUTE, (0, 0, -1), 0.0, (-0.5, -0.34, 0.74)),
                _deg(0, 30, 60, 90), (0.85, 0.25, 0.2))
DRAWER = PartSpec(_box((-0.45, -0.36, 0.06), (0.45, -0.32, 0.46)),
                  JointModel(PRISMATIC, (0, -1, 0), 0.0),
                  (0.0, 0.1, 0.2, 0.3), (0.2, 0.45, 0.85))
SIDE_DRAWER = PartSpec(_box((0.52, -0.25, 0.1), (0.56, 0.25, 0.9)),
                       JointModel(PRISMATIC, (1, 0, 0), 0.0),
                       (0.0, 0.08, 0.16, 0.24), (0.25, 0.75, 0.3))


def preset(name: str, seed: int = 0, **overrides) -> SceneSpec:
    """Named scenes: ``static``, ``drawer``, ``storage2``, ``storage3``, ``box``,
    ``eyeglasses2r`` and ``slider2`` (two coplanar parts with planted seam straddlers)."""
    if name == "static":
        spec = SceneSpec(seed=seed, static=BODY, total_gaussians=500)
    elif name == "drawer":
        spec = SceneSpec(seed=seed, static=BODY, parts=(DRAWER,), total_gaussians=600)
    elif name == "storage2":
        spec = SceneSpec(seed=seed, static=BODY, parts=(DOOR, DRAWER))
    elif name == "storage3":
        spec = SceneSpec(seed=seed, static=BODY, parts=(DOOR, DRAWER, SIDE_DRAWER))
    elif name == "box":
        body = _box((-0.4, -0.3, 0.0), (0.4, 0.3, 0.5))
        lid = PartSpec(_box((-0.4, -0.3, 0.52), (0.4, 0.3, 0.56)),
                       JointModel(REVOLUTE, (-1, 0, 0), 0.0, (0.0, 0.35, 0.54)),
                       _deg(0, 25, 50, 75), (0.8, 0.6, 0.2))
        spec = SceneSpec(seed=seed, static=body, parts=(lid,), total_gaussians=1200,
                         cameras=CameraRing(target=(0.0, 0.0, 0.35)))
    elif name == "eyeglasses2r":
        frame = _box((-0.5, -0.02, 0.4), (0.5, 0.02, 0.6))
        left = PartSpec(_box((-0.55, 0.05, 0.47), (-0.52, 0.65, 0.53)),
                        JointModel(REVOLUTE, (0, 0, -1), 0.0, (-0.535, 0.0, 0.5)),
                        _deg(0, 30, 60, 85), (0.2, 0.2, 0.8))
        right = PartSpec(_box((0.52, 0.05, 0.47), (0.55, 0.65, 0.53)),
                         JointModel(REVOLUTE, (0, 0, 1), 0.0, (0.535, 0.0, 0.5)),
                         _deg(0, 20, 45, 70), (0.8, 0.2, 0.6))
        spec = SceneSpec(seed=seed, static=frame, parts=(left, right), total_gaussians=1200,
                         cameras=CameraRing(target=(0.0, 0.3, 0.5)))
    elif name == "slider2":
        body = _box((-0.5, -0.3, 0.0), (0.5, 0.3, 0.8))
        slider = PartSpec(_box((0.52, -0.3, 0.0), (0.92, 0.3, 0.4)),
                          JointModel(PRISMATIC, (0, -1, 0), 0.0),
                          (0.0, 0.1, 0.2, 0.3), (0.2, 0.45, 0.85))
        straddlers = tuple(StraddlerSpec((0.51, -0.305, z), (1, 0, 0), 0.12, 1)
                           for z in (0.08, 0.16, 0.24, 0.32))
        spec = SceneSpec(seed=seed, static=body, parts=(slider,), total_gaussians=1200,
                         straddlers=straddlers,
                         cameras=CameraRing(target=(0.2, -0.1, 0.4)))
    else:
        raise KeyError(f"unknown preset {name!r}")
    return replace(spec, **overrides) if overrides else spec


PRESETS = ("static", "drawer", "storage2", "storage3", "box", "eyeglasses2r", "slider2")
