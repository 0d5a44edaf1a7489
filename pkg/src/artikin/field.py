"""Core data types for multi-state Gaussian fields and their JSON manifest.

A field is stored struct-of-arrays (``StateSnapshot``) because every
algorithm in the package is vectorized over primitives; ``GaussianPrimitive``
is the single-primitive view used by per-primitive operations such as
splitting and offset application.

Scale semantics: ``s`` holds *full* ellipsoid axis lengths, so the standard
deviation along each principal axis is ``s / 2``.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import quaternion as quat

SCENE_FORMAT = "artikin-scene/1"
QUAT_TOL = 1e-9
ROT_TOL = 1e-9


class FieldError(ValueError):
    """Raised for malformed scenes, manifests and invariant violations."""


@dataclass(frozen=True)
class GaussianPrimitive:
    mu: np.ndarray
    q: np.ndarray
    s: np.ndarray
    rgb: np.ndarray
    opacity: float
    label: int = 0

    def __post_init__(self):
        for name, size in (("mu", 3), ("q", 4), ("s", 3), ("rgb", 3)):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(size)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "label", int(self.label))
        if not np.all(np.isfinite(np.concatenate([self.mu, self.q, self.s, self.rgb]))):
            raise FieldError("non-finite primitive attribute")
        if abs(np.linalg.norm(self.q) - 1.0) > QUAT_TOL:
            raise FieldError("orientation quaternion is not unit length")
        if np.any(self.s <= 0):
            raise FieldError("scale components must be strictly positive")
        if not 0.0 <= self.opacity <= 1.0 or np.any(self.rgb < 0) or np.any(self.rgb > 1):
            raise FieldError("color and opacity must lie in [0, 1]")
        if self.label < 0:
            raise FieldError("labels are non-negative integers")


def covariance_of(p: GaussianPrimitive) -> np.ndarray:
    """``R(q) diag((s/2)^2) R(q)^T``."""
    R = quat.to_matrix(p.q)
    cov = (R * (0.5 * p.s) ** 2) @ R.T
    return 0.5 * (cov + cov.T)


def covariances(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Batched covariance for arrays ``q`` (N, 4) and ``s`` (N, 3)."""
    R = quat.to_matrix(q)
    cov = np.einsum("nij,nj,nkj->nik", R, (0.5 * np.asarray(s)) ** 2, R)
    return 0.5 * (cov + np.swapaxes(cov, 1, 2))


def _frozen(arr, shape, dtype=float):
    out = np.array(arr, dtype=dtype).reshape(shape)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class StateSnapshot:
    """One state of the field. Index ``i`` names the same primitive in every state."""

    mu: np.ndarray
    q: np.ndarray
    s: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray
    label: np.ndarray
    state_index: int = 0

    def __post_init__(self):
        n = len(np.asarray(self.opacity).reshape(-1))
        object.__setattr__(self, "mu", _frozen(self.mu, (n, 3)))
        object.__setattr__(self, "q", _frozen(self.q, (n, 4)))
        object.__setattr__(self, "s", _frozen(self.s, (n, 3)))
        object.__setattr__(self, "rgb", _frozen(self.rgb, (n, 3)))
        object.__setattr__(self, "opacity", _frozen(self.opacity, (n,)))
        object.__setattr__(self, "label", _frozen(self.label, (n,), dtype=np.int64))
        object.__setattr__(self, "state_index", int(self.state_index))

    def __len__(self):
        return len(self.opacity)

    def __getitem__(self, i) -> GaussianPrimitive:
        return GaussianPrimitive(self.mu[i], self.q[i], self.s[i], self.rgb[i],
                                 self.opacity[i], self.label[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, StateSnapshot):
            return NotImplemented
        return self.state_index == other.state_index and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("mu", "q", "s", "rgb", "opacity", "label"))

    @classmethod
    def empty(cls, state_index=0):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64), state_index)

    @classmethod
    def from_primitives(cls, prims: Sequence[GaussianPrimitive], state_index=0):
        if not prims:
            return cls.empty(state_index)
        return cls(np.stack([p.mu for p in prims]), np.stack([p.q for p in prims]),
                   np.stack([p.s for p in prims]), np.stack([p.rgb for p in prims]),
                   np.array([p.opacity for p in prims]),
                   np.array([p.label for p in prims]), state_index)

    def with_labels(self, labels) -> "StateSnapshot":
        return replace(self, label=np.asarray(labels, dtype=np.int64))

    def with_geometry(self, mu=None, q=None, s=None, state_index=None) -> "StateSnapshot":
        return replace(self,
                       mu=self.mu if mu is None else mu,
                       q=self.q if q is None else q,
                       s=self.s if s is None else s,
                       state_index=self.state_index if state_index is None else state_index)

    def subset(self, index) -> "StateSnapshot":
        index = np.asarray(index)
        return StateSnapshot(self.mu[index], self.q[index], self.s[index], self.rgb[index],
                             self.opacity[index], self.label[index], self.state_index)

    def validate(self):
        arrays = (self.mu, self.q, self.s, self.rgb, self.opacity)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise FieldError(f"state {self.state_index}: non-finite primitive attribute")
        bad = np.abs(np.linalg.norm(self.q, axis=1) - 1.0) > QUAT_TOL
        if np.any(bad):
            raise FieldError(f"state {self.state_index}: non-unit quaternion at primitive "
                             f"{int(np.argmax(bad))}")
        if np.any(self.s <= 0):
            raise FieldError(f"state {self.state_index}: non-positive scale")
        if np.any((self.opacity < 0) | (self.opacity > 1)) or np.any((self.rgb < 0) | (self.rgb > 1)):
            raise FieldError(f"state {self.state_index}: color/opacity outside [0, 1]")
        if np.any(self.label < 0):
            raise FieldError(f"state {self.state_index}: negative label")


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera; pixel ``(col, row)`` coordinates are pixel centers."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        for k in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, k, float(getattr(self, k)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height) == (
            other.fx, other.fy, other.cx, other.cy, other.width, other.height) and \
            np.array_equal(self.rotation, other.rotation) and \
            np.array_equal(self.translation, other.translation)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def project(self, points) -> np.ndarray:
        pc = self.to_camera(points)
        z = pc[..., 2]
        return np.stack([self.fx * pc[..., 0] / z + self.cx,
                         self.fy * pc[..., 1] / z + self.cy], axis=-1)

    def validate(self):
        R = self.rotation
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(self.translation)):
            raise FieldError("camera pose is not finite")
        if np.max(np.abs(R @ R.T - np.eye(3))) > ROT_TOL or abs(np.linalg.det(R) - 1) > ROT_TOL:
            raise FieldError("camera rotation is not a proper orthonormal matrix")
        if not (self.fx > 0 and self.fy > 0):
            raise FieldError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise FieldError("image size must be positive")


def look_at(eye, target, fx, fy, width, height, up=(0.0, 0.0, 1.0)) -> CameraModel:
    """Camera at ``eye`` looking at ``target``; OpenCV axes (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return CameraModel(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, R, -R @ eye, width, height)


REVOLUTE = "revolute"
PRISMATIC = "prismatic"


@dataclass(frozen=True, eq=False)
class JointModel:
    kind: str
    axis: np.ndarray
    magnitude: float
    pivot: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in (REVOLUTE, PRISMATIC):
            raise FieldError(f"unknown joint kind {self.kind!r}")
        object.__setattr__(self, "axis", _frozen(self.axis, (3,)))
        object.__setattr__(self, "magnitude", float(self.magnitude))
        if self.kind == REVOLUTE:
            if self.pivot is None:
                raise FieldError("revolute joint needs a pivot")
            object.__setattr__(self, "pivot", _frozen(self.pivot, (3,)))
        else:
            object.__setattr__(self, "pivot", None)
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise FieldError("joint axis must be unit length")

    def __eq__(self, other):
        if not isinstance(other, JointModel):
            return NotImplemented
        return (self.kind == other.kind and self.magnitude == other.magnitude
                and np.array_equal(self.axis, other.axis)
                and (self.pivot is None) == (other.pivot is None)
                and (self.pivot is None or np.array_equal(self.pivot, other.pivot)))

    def canonical(self) -> "JointModel":
        """Same motion with non-negative magnitude (flips the axis if needed)."""
        if self.magnitude >= 0:
            return self
        return replace(self, axis=-self.axis, magnitude=-self.magnitude)

    def transform(self):
        """Rigid transform ``(R, t)`` mapping points ``x -> R x + t``."""
        if self.kind == PRISMATIC:
            return np.eye(3), self.magnitude * self.axis
        R = quat.to_matrix(quat.from_axis_angle(self.axis, self.magnitude))
        return R, self.pivot - R @ self.pivot

    def to_dict(self):
        d = {"kind": self.kind, "axis": self.axis.tolist(), "magnitude": self.magnitude}
        if self.pivot is not None:
            d["pivot"] = self.pivot.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d["axis"], d["magnitude"], d.get("pivot"))


@dataclass(frozen=True, eq=False)
class Box:
    """Oriented box used by the synthetic oracle as exact part geometry."""

    center: np.ndarray
    extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center, (3,)))
        object.__setattr__(self, "extents", _frozen(self.extents, (3,)))
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))

    def __eq__(self, other):
        return isinstance(other, Box) and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("center", "extents", "rotation"))

    def distance(self, points) -> np.ndarray:
        """Euclidean distance from points to the solid box (0 inside)."""
        local = (np.asarray(points, dtype=float) - self.center) @ self.rotation
        excess = np.maximum(np.abs(local) - 0.5 * self.extents, 0.0)
        return np.linalg.norm(excess, axis=-1)

    def corners(self) -> np.ndarray:
        signs = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], float)
        return self.center + (signs * 0.5 * self.extents) @ self.rotation.T

    def to_dict(self):
        return {"center": self.center.tolist(), "extents": self.extents.tolist(),
                "rotation": self.rotation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["center"], d["extents"], d.get("rotation", np.eye(3)))


@dataclass(frozen=True, eq=False)
class PartTruth:
    """Exact kinematics of one movable part: joint frame plus per-state magnitude."""

    label: int
    kind: str
    axis: np.ndarray
    magnitudes: np.ndarray
    pivot: Optional[np.ndarray] = None
    box: Optional[Box] = None

    def __post_init__(self):
        object.__setattr__(self, "axis", _frozen(self.axis, (3,)))
        object.__setattr__(self, "magnitudes", _frozen(self.magnitudes, (-1,)))
        if self.pivot is not None:
            object.__setattr__(self, "pivot", _frozen(self.pivot, (3,)))

    def __eq__(self, other):
        return isinstance(other, PartTruth) and self.to_dict() == other.to_dict()

    def joint_at(self, k) -> JointModel:
        return JointModel(self.kind, self.axis, self.magnitudes[k], self.pivot)

    def joint_between(self, a, b) -> JointModel:
        """Joint taking the part from state ``a`` to state ``b``, magnitude >= 0."""
        m = self.magnitudes[b] - self.magnitudes[a]
        if self.kind == REVOLUTE:
            m = math.remainder(m, 2 * math.pi)
        return JointModel(self.kind, self.axis, m, self.pivot).canonical()

    def to_dict(self):
        d = {"label": self.label, "kind": self.kind, "axis": self.axis.tolist(),
             "magnitudes": self.magnitudes.tolist()}
        if self.pivot is not None:
            d["pivot"] = self.pivot.tolist()
        if self.box is not None:
            d["box"] = self.box.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        box = Box.from_dict(d["box"]) if d.get("box") is not None else None
        return cls(int(d["label"]), d["kind"], d["axis"], d["magnitudes"], d.get("pivot"), box)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    labels: np.ndarray
    parts: tuple = ()
    static_box: Optional[Box] = None
    straddlers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        object.__setattr__(self, "labels", _frozen(self.labels, (-1,), dtype=np.int64))
        object.__setattr__(self, "parts", tuple(self.parts))
        object.__setattr__(self, "straddlers", _frozen(self.straddlers, (-1,), dtype=np.int64))

    def __eq__(self, other):
        return isinstance(other, GroundTruth) and self.to_dict() == other.to_dict()

    def part(self, label) -> PartTruth:
        for p in self.parts:
            if p.label == label:
                return p
        raise KeyError(label)

    @property
    def movable_labels(self):
        return [p.label for p in self.parts]

    def geometric_labels(self, points) -> np.ndarray:
        """Label of the nearest part box (0 for the static body) at the canonical state."""
        boxes = [(0, self.static_box)] + [(p.label, p.box) for p in self.parts]
        boxes = [(lab, b) for lab, b in boxes if b is not None]
        if not boxes:
            raise FieldError("ground truth carries no part geometry")
        d = np.stack([b.distance(points) for _, b in boxes], axis=-1)
        return np.array([lab for lab, _ in boxes])[np.argmin(d, axis=-1)]

    def to_dict(self):
        d = {"labels": self.labels.tolist(), "parts": [p.to_dict() for p in self.parts]}
        if self.static_box is not None:
            d["static_box"] = self.static_box.to_dict()
        if len(self.straddlers):
            d["straddlers"] = self.straddlers.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        sb = Box.from_dict(d["static_box"]) if d.get("static_box") is not None else None
        return cls(d["labels"], [PartTruth.from_dict(p) for p in d.get("parts", [])], sb,
                   d.get("straddlers", []))


@dataclass(frozen=True, eq=False)
class SceneBundle:
    canonical: StateSnapshot
    states: tuple
    cameras: tuple
    ground_truth: Optional[GroundTruth] = None

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "cameras", tuple(tuple(c) for c in self.cameras))

    @property
    def K(self) -> int:
        return len(self.states)

    @property
    def N(self) -> int:
        return len(self.canonical)

    def __eq__(self, other):
        return (isinstance(other, SceneBundle) and self.canonical == other.canonical
                and self.states == other.states and self.cameras == other.cameras
                and self.ground_truth == other.ground_truth)

    def centers(self) -> np.ndarray:
        """Centers stacked as (K, N, 3)."""
        return np.stack([st.mu for st in self.states])

    def validate(self):
        if self.K < 2:
            raise FieldError("a scene needs at least two states")
        if len(self.cameras) != self.K:
            raise FieldError(f"expected camera lists for {self.K} states, got {len(self.cameras)}")
        self.canonical.validate()
        for k, st in enumerate(self.states):
            if len(st) != self.N:
                raise FieldError(f"primitive count mismatch: state {k} has {len(st)}, "
                                 f"canonical has {self.N}")
            st.validate()
            if not (np.array_equal(st.rgb, self.canonical.rgb)
                    and np.array_equal(st.opacity, self.canonical.opacity)):
                raise FieldError(f"state {k}: appearance differs from canonical")
        for k, cams in enumerate(self.cameras):
            if not cams:
                raise FieldError(f"state {k} has no cameras")
            for cam in cams:
                cam.validate()
        gt = self.ground_truth
        if gt is not None:
            if len(gt.labels) != self.N:
                raise FieldError("ground-truth label count does not match primitive count")
            for p in gt.parts:
                if len(p.magnitudes) != self.K:
                    raise FieldError(f"part {p.label}: schedule length != number of states")
        return self


# --- serialization -----------------------------------------------------------------

def _snapshot_to_dict(st: StateSnapshot):
    prims = [{"mu": st.mu[i].tolist(), "q": st.q[i].tolist(), "s": st.s[i].tolist(),
              "rgb": st.rgb[i].tolist(), "opacity": float(st.opacity[i]),
              "label": int(st.label[i])} for i in range(len(st))]
    return {"state_index": st.state_index, "primitives": prims}


def _snapshot_from_dict(d, where) -> StateSnapshot:
    try:
        prims = d["primitives"]
        if not prims:
            return StateSnapshot.empty(d.get("state_index", 0))
        return StateSnapshot(
            [p["mu"] for p in prims], [p["q"] for p in prims], [p["s"] for p in prims],
            [p["rgb"] for p in prims], [p["opacity"] for p in prims],
            [p.get("label", 0) for p in prims], d.get("state_index", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise FieldError(f"malformed record in {where}: {exc}") from exc


def camera_to_dict(cam: CameraModel):
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "R": cam.rotation.tolist(), "t": cam.translation.tolist()}


def camera_from_dict(d) -> CameraModel:
    try:
        return CameraModel(d["fx"], d["fy"], d["cx"], d["cy"], d["R"], d["t"],
                           d["width"], d["height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FieldError(f"malformed camera record: {exc}") from exc


def bundle_to_dict(bundle: SceneBundle):
    doc = {"format": SCENE_FORMAT,
           "canonical": _snapshot_to_dict(bundle.canonical),
           "states": [_snapshot_to_dict(s) for s in bundle.states],
           "cameras": [[camera_to_dict(c) for c in cams] for cams in bundle.cameras]}
    if bundle.ground_truth is not None:
        doc["ground_truth"] = bundle.ground_truth.to_dict()
    return doc


def bundle_from_dict(doc) -> SceneBundle:
    try:
        canonical = _snapshot_from_dict(doc["canonical"], "canonical")
        states = [_snapshot_from_dict(s, f"state {k}") for k, s in enumerate(doc["states"])]
        cameras = [[camera_from_dict(c) for c in cams] for cams in doc["cameras"]]
        gt = GroundTruth.from_dict(doc["ground_truth"]) if doc.get("ground_truth") else None
    except KeyError as exc:
        raise FieldError(f"malformed manifest: missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, FieldError):
            raise
        raise FieldError(f"malformed manifest: {exc}") from exc
    return SceneBundle(canonical, states, cameras, gt).validate()


def resolve_manifest(path) -> Path:
    """A scene may be named by its manifest file or by a directory holding ``scene.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    return path


def load_scene(path) -> SceneBundle:
    path = resolve_manifest(path)
    if not path.exists():
        raise FieldError(f"scene manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FieldError(f"{path}: not valid JSON ({exc})") from exc
    return bundle_from_dict(doc)


def save_field(bundle: SceneBundle, path) -> None:
    """Write ``bundle`` as a JSON manifest; floats round-trip exactly (repr)."""
    bundle.validate()
    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    text = json.dumps(bundle_to_dict(bundle), allow_nan=False)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise FieldError(f"cannot write {path}: {exc}") from exc


def save_snapshot(st: StateSnapshot, path, extra=None) -> None:
    st.validate()
    doc = {"format": SCENE_FORMAT, **_snapshot_to_dict(st)}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, allow_nan=False))


def load_snapshot(path) -> StateSnapshot:
    doc = json.loads(Path(path).read_text())
    st = _snapshot_from_dict(doc, str(path))
    st.validate()
    return st
