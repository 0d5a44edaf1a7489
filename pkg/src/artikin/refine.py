"""Mask-guided label refinement: pixel assignment, prompts, masks and boundary splits."""
from __future__ import annotations

import base64
import heapq
import json
import logging
import math
import os
import urllib.request
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from . import quaternion as quat
from .field import CameraModel, GaussianPrimitive, SceneBundle, StateSnapshot
from .imageio import decode_pgm, encode_ppm
from .splat import DEFAULT, RenderOutput, SplatConfig, project_all, render_views

log = logging.getLogger(__name__)

ASSIGN_EPS = 1e-9
N_POSITIVE = 10
N_NEGATIVE = 20
UNASSIGNED = -1


class RefineError(ValueError):
    pass


class PromptError(RefineError):
    pass


@dataclass(frozen=True, eq=False)
class PartMask:
    view: int
    label: int
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise RefineError(f"mask for part {self.label} in view {self.view} is not 2-D")
        object.__setattr__(self, "mask", m)


@dataclass(frozen=True, eq=False)
class PromptSet:
    """Pixel prompts as integer ``(x, y) = (col, row)`` rows."""

    view: int
    label: int
    positives: np.ndarray
    negatives: np.ndarray

    def validate(self, height: int, width: int):
        for name, pts in (("positive", self.positives), ("negative", self.negatives)):
            pts = np.asarray(pts).reshape(-1, 2)
            bad = (pts[:, 0] < 0) | (pts[:, 0] >= width) | (pts[:, 1] < 0) | (pts[:, 1] >= height)
            if np.any(bad):
                x, y = pts[np.argmax(bad)]
                raise PromptError(f"{name} prompt ({x}, {y}) lies outside the {width}x{height} "
                                  f"image of view {self.view}")
        if not len(self.positives):
            raise PromptError(f"no positive prompts for part {self.label} in view {self.view}")


class Segmenter(Protocol):
    def segment(self, image: np.ndarray, prompts: PromptSet) -> PartMask:
        ...


class OracleSegmenter:
    """Returns the exact ground-truth silhouette of the part that holds most of the
    positive prompts. The image is only used for its size."""

    def __init__(self, bundle: SceneBundle, state: int = 0, splat: SplatConfig = DEFAULT):
        if bundle.ground_truth is None:
            raise RefineError("oracle segmenter needs a scene with ground truth")
        self.bundle, self.state, self.splat = bundle, state, splat
        self._cache: Dict[int, List[PartMask]] = {}
        self.calls = 0

    def truth(self, view: int) -> List[PartMask]:
        if view not in self._cache:
            from .synth import ground_truth_masks
            self._cache[view] = ground_truth_masks(self.bundle, view, self.state, self.splat)
        return self._cache[view]

    def segment(self, image, prompts: PromptSet) -> PartMask:
        h, w = np.asarray(image).shape[:2]
        prompts.validate(h, w)
        self.calls += 1
        masks = self.truth(prompts.view)
        x, y = prompts.positives[:, 0], prompts.positives[:, 1]
        hits = [int(np.sum(m.mask[y, x])) for m in masks]
        best = masks[int(np.argmax(hits))]
        return PartMask(prompts.view, prompts.label, best.mask.copy())


@dataclass
class HttpSegmenter:
    """Point-prompted segmentation endpoint.

    Request: ``{"image": <base64 PPM data URL>, "positives": [[x, y], ...],
    "negatives": [[x, y], ...]}``. Reply: ``{"mask": <base64 binary PGM>}``.
    Configured from ``ARTIKIN_SAM_URL`` and ``ARTIKIN_SAM_TOKEN``.
    """

    url: str
    token: Optional[str] = None
    timeout: float = 60.0

    @classmethod
    def from_env(cls) -> "HttpSegmenter":
        url = os.environ.get("ARTIKIN_SAM_URL")
        if not url:
            raise RefineError("ARTIKIN_SAM_URL is not set")
        return cls(url, os.environ.get("ARTIKIN_SAM_TOKEN"))

    def build_request(self, image, prompts: PromptSet) -> dict:
        data = base64.b64encode(encode_ppm(image)).decode("ascii")
        return {"image": "data:image/x-portable-pixmap;base64," + data,
                "positives": np.asarray(prompts.positives).tolist(),
                "negatives": np.asarray(prompts.negatives).tolist()}

    def segment(self, image, prompts: PromptSet) -> PartMask:
        h, w = np.asarray(image).shape[:2]
        prompts.validate(h, w)
        body = json.dumps(self.build_request(image, prompts)).encode()
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read())
            mask = decode_pgm(base64.b64decode(reply["mask"])) > 127
        except (OSError, KeyError, ValueError) as exc:
            raise RefineError(f"segmenter request failed: {exc}") from exc
        if mask.shape != (h, w):
            raise RefineError(f"segmenter returned a {mask.shape} mask for a {(h, w)} image")
        return PartMask(prompts.view, prompts.label, mask)


# --- assignment and prompts ------------------------------------------------------------

def part_pixel_assignment(render: RenderOutput, tau_vis: float = 2.0,
                          eps: float = ASSIGN_EPS) -> np.ndarray:
    """Winner-margin test: label ``p`` where ``w_p / (max_{q != p} w_q + eps) > tau_vis``,
    else ``UNASSIGNED``."""
    labels = sorted(render.weight_maps)
    h, w = render.transmittance.shape
    if not labels:
        return np.full((h, w), UNASSIGNED, dtype=np.int64)
    W = np.stack([render.weight_maps[k] for k in labels])
    if len(labels) == 1:
        win, second = np.zeros((h, w), dtype=np.int64), np.zeros((h, w))
    else:
        part = np.argpartition(-W, 1, axis=0)
        win = part[0]
        second = np.take_along_axis(W, part[1:2], axis=0)[0]
    best = np.take_along_axis(W, win[None], axis=0)[0]
    ok = best / (second + eps) > tau_vis
    return np.where(ok, np.asarray(labels)[win], UNASSIGNED)


def farthest_point_sampling(points, n: int) -> np.ndarray:
    """Indices of ``n`` points chosen greedily by max-min Euclidean distance, starting
    from the member nearest the centroid. Ties go to the lowest index."""
    P = np.asarray(points, dtype=float)
    m = len(P)
    if m == 0 or n <= 0:
        return np.zeros(0, dtype=np.int64)
    if m <= n:
        return np.arange(m)
    first = int(np.argmin(np.sum((P - P.mean(axis=0)) ** 2, axis=1)))
    picks = [first]
    d2 = np.sum((P - P[first]) ** 2, axis=1)
    for _ in range(n - 1):
        j = int(np.argmax(d2))
        picks.append(j)
        np.minimum(d2, np.sum((P - P[j]) ** 2, axis=1), out=d2)
    return np.array(picks)


def sample_prompts(assignment, weight_maps, part: int, view: int,
                   n_pos: int = N_POSITIVE, n_neg: int = N_NEGATIVE) -> Optional[PromptSet]:
    """FPS positives from pixels assigned to ``part`` and negatives from pixels where
    the part has zero weight; ``None`` when no pixel is assigned to the part."""
    assignment = np.asarray(assignment)
    ys, xs = np.nonzero(assignment == part)
    if not len(xs):
        log.warning("part %d has no assigned pixels in view %d; skipped", part, view)
        return None
    pos = np.stack([xs, ys], axis=1)
    w = weight_maps.get(part)
    ny, nx = np.nonzero(w == 0) if w is not None else np.nonzero(np.ones_like(assignment, bool))
    neg = np.stack([nx, ny], axis=1)
    return PromptSet(view, part, pos[farthest_point_sampling(pos, n_pos)],
                     neg[farthest_point_sampling(neg, n_neg)])


@dataclass
class ViewContext:
    """Coarse renders of the canonical state with the masks gathered from them."""

    cameras: List[CameraModel]
    renders: List[RenderOutput]
    masks: Dict[Tuple[int, int], PartMask]  # (view, label) -> mask
    skipped: List[Tuple[int, int]] = field(default_factory=list)
    snapshot: Optional[StateSnapshot] = None
    splat: SplatConfig = DEFAULT
    _proj: Dict[int, tuple] = field(default_factory=dict, repr=False)

    def masks_in(self, view: int) -> List[PartMask]:
        return [m for (v, _), m in sorted(self.masks.items()) if v == view]

    def projection(self, v: int):
        """Cached ``(mean2d, inverse cov2d, drawn)`` of the field in view ``v``."""
        if v not in self._proj:
            mean, cov, _, drawn = project_all(self.snapshot, self.cameras[v], self.splat)
            self._proj[v] = (mean, np.linalg.inv(cov), drawn)
        return self._proj[v]

    def transmittance_in_front(self, v: int, uv, z: float, margin: float, exclude: int = -1) -> float:
        """Light reaching depth ``z`` through pixel ``uv``.

        Every primitive whose footprint covers the pixel is intersected with the pixel
        ray at its own plane (normal = shortest axis); those hitting more than
        ``margin`` in front of ``z`` attenuate it. Intersecting planes, rather than
        comparing center depths, keeps oblique surfaces from occluding themselves.
        """
        if self.snapshot is None or not len(self.snapshot):
            return 1.0
        f = self.snapshot
        cam = self.cameras[v]
        mean, icov, drawn = self.projection(v)
        x, y = _pixel(uv)
        d = np.array([x, y], dtype=float) - mean
        m2 = np.einsum("ni,nij,nj->n", d, icov, d)
        cover = drawn & (m2 <= self.splat.cutoff_sigma ** 2)
        if 0 <= exclude < len(cover):
            cover[exclude] = False
        idx = np.flatnonzero(cover)
        if not len(idx):
            return 1.0
        ray = cam.rotation.T @ np.array([(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0])
        C = cam.center
        R = quat.to_matrix(f.q[idx])
        normal = R[np.arange(len(idx)), :, np.argmin(f.s[idx], axis=1)]
        denom = normal @ ray
        num = np.einsum("ni,ni->n", normal, f.mu[idx] - C)
        center_z = cam.to_camera(f.mu[idx])[:, 2]
        hit = np.where(np.abs(denom) > 1e-9, num / np.where(np.abs(denom) > 1e-9, denom, 1.0),
                       center_z)
        front = hit < z - margin
        rho = np.minimum(f.opacity[idx] * np.exp(-0.5 * m2[idx]), self.splat.alpha_clamp)
        return float(np.prod(1.0 - rho[front]))


def acquire_masks(segmenter: Segmenter, field_: StateSnapshot, cameras: Sequence[CameraModel],
                  views: Optional[Sequence[int]] = None, tau_vis: float = 2.0,
                  splat: SplatConfig = DEFAULT, workers: int = 1) -> ViewContext:
    """Render each selected view with the current labels and ask the segmenter for one
    mask per (label, view) that has assigned pixels."""
    views = list(range(len(cameras))) if views is None else list(views)
    cams = [cameras[v] for v in views]
    renders = render_views(field_, cams, splat, workers=workers)
    labels = sorted(int(v) for v in np.unique(field_.label))
    masks, skipped = {}, []
    for v, cam, r in zip(views, cams, renders):
        assign = part_pixel_assignment(r, tau_vis)
        for lab in labels:
            prompts = sample_prompts(assign, r.weight_maps, lab, v)
            if prompts is None:
                skipped.append((v, lab))
                continue
            m = segmenter.segment(r.color, prompts)
            if m.mask.shape != (cam.height, cam.width):
                raise RefineError(f"mask shape {m.mask.shape} does not match view {v} "
                                  f"({cam.height}x{cam.width})")
            masks[(v, lab)] = PartMask(v, lab, m.mask)
    full_cams = list(cameras)
    full_renders: List[Optional[RenderOutput]] = [None] * len(full_cams)
    for v, r in zip(views, renders):
        full_renders[v] = r
    return ViewContext(full_cams, full_renders, masks, skipped, field_, splat)


# --- geometry helpers ------------------------------------------------------------------

def replace_label(p: GaussianPrimitive, label: int) -> GaussianPrimitive:
    return GaussianPrimitive(p.mu, p.q, p.s, p.rgb, p.opacity, int(label))


def major_axis(p: GaussianPrimitive) -> Tuple[np.ndarray, float]:
    R = quat.to_matrix(p.q)
    k = int(np.argmax(p.s))
    return R[:, k].copy(), float(p.s[k])


def split_gaussian(p: GaussianPrimitive, lam: float, e) -> Tuple[GaussianPrimitive, GaussianPrimitive]:
    """Split along the major axis. ``e`` is that axis oriented toward the in-mask end;
    the part child keeps fraction ``lam`` of the segment on that side."""
    if not 0.0 < lam < 1.0:
        raise RefineError(f"split ratio {lam} outside (0, 1)")
    e = np.asarray(e, dtype=float)
    if abs(np.linalg.norm(e) - 1.0) > 1e-9:
        raise RefineError("split direction must be a unit vector")
    k = int(np.argmax(p.s))
    smax = float(p.s[k])
    s_part, s_bg = p.s.copy(), p.s.copy()
    s_part[k] = lam * smax
    s_bg[k] = (1.0 - lam) * smax
    part = GaussianPrimitive(p.mu + 0.5 * (1.0 - lam) * smax * e, p.q, s_part, p.rgb,
                             p.opacity, p.label)
    bg = GaussianPrimitive(p.mu - 0.5 * lam * smax * e, p.q, s_bg, p.rgb, p.opacity, p.label)
    return part, bg


def bresenham(x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
    """Integer pixels on the segment from ``(x0, y0)`` to ``(x1, y1)``, in walk order."""
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    out = []
    while True:
        out.append((x0, y0))
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy
    return np.array(out, dtype=np.int64)


def _pixel(pt) -> Tuple[int, int]:
    return int(math.floor(pt[0] + 0.5)), int(math.floor(pt[1] + 0.5))


def _on_screen(pt, cam: CameraModel) -> bool:
    x, y = _pixel(pt)
    return 0 <= x < cam.width and 0 <= y < cam.height


def _inside(mask, pt) -> bool:
    x, y = _pixel(pt)
    h, w = mask.shape
    return 0 <= x < w and 0 <= y < h and bool(mask[y, x])


@dataclass(frozen=True)
class RefineConfig:
    max_depth: int = 4
    s_min: float = 1e-4
    ellipse_sigma: float = 1.0
    tau_vis: float = 2.0
    occlusion_margin: float = 0.01  # scene units a surface must lie in front to occlude
    min_transmittance: float = 0.5  # a point counts as seen when this much light reaches it
    min_fraction: float = 1e-3  # splits leaving a child shorter than this are skipped

    def validate(self):
        if self.max_depth < 0 or self.s_min <= 0 or self.ellipse_sigma <= 0:
            raise RefineError("max_depth must be >= 0, s_min and ellipse_sigma > 0")
        if self.tau_vis < 1.0:
            raise RefineError("tau_vis must be at least 1")
        if not 0.0 < self.min_fraction < 0.5:
            raise RefineError("min_fraction must lie in (0, 0.5)")
        return self


@dataclass(frozen=True, eq=False)
class Candidate:
    index: int
    view: int
    endpoints: np.ndarray  # (2, 2) screen endpoints of the projected ellipse major axis
    outside: Tuple[bool, bool]


def _project(ctx: ViewContext, v: int, mu):
    """Screen position and camera depth of ``mu`` in view ``v`` when on screen."""
    cam = ctx.cameras[v]
    pc = cam.to_camera(mu)
    if pc[2] <= DEFAULT.z_near:
        return None
    uv = np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])
    if not _on_screen(uv, cam):
        return None
    return uv, float(pc[2])


def _visible(ctx: ViewContext, v: int, mu, src: int, cfg: RefineConfig):
    """``_project`` restricted to views where the point is not hidden behind other
    primitives."""
    hit = _project(ctx, v, mu)
    if hit is None or _occluded(ctx, v, hit[0], hit[1], cfg, src):
        return None
    return hit


def _occluded(ctx: ViewContext, v: int, uv, z: float, cfg: RefineConfig, exclude: int = -1) -> bool:
    """True when less than ``min_transmittance`` of the light reaches depth ``z`` at ``uv``;
    a mask label seen there then says nothing about the point."""
    if not _on_screen(uv, ctx.cameras[v]):
        return False
    t = ctx.transmittance_in_front(v, uv, z, cfg.occlusion_margin, exclude)
    return t < cfg.min_transmittance


def nearest_view(ctx: ViewContext, p: GaussianPrimitive, src: int,
                 cfg: RefineConfig) -> Optional[int]:
    """Smallest camera depth among views where the center lands on screen and that hold
    a mask for the primitive's label."""
    best, best_z = None, math.inf
    for v in range(len(ctx.cameras)):
        if (v, int(p.label)) not in ctx.masks:
            continue
        hit = _project(ctx, v, p.mu)
        if hit is not None and hit[1] < best_z:
            best, best_z = v, hit[1]
    return best


def candidate_test(ctx: ViewContext, p: GaussianPrimitive, index: int,
                   cfg: RefineConfig, splat: SplatConfig = DEFAULT) -> Optional[Candidate]:
    v = nearest_view(ctx, p, index, cfg)
    if v is None:
        return None
    cam = ctx.cameras[v]
    single = StateSnapshot(p.mu[None], p.q[None], p.s[None], p.rgb[None],
                           np.array([p.opacity]), np.array([p.label]))
    mean, cov, _, _ = project_all(single, cam, splat)
    evals, evecs = np.linalg.eigh(cov[0])
    step = cfg.ellipse_sigma * math.sqrt(evals[-1]) * evecs[:, -1]
    ends = np.stack([mean[0] + step, mean[0] - step])
    mask = ctx.masks[(v, int(p.label))].mask
    z = float(cam.to_camera(p.mu)[2])
    outside = tuple(not _inside(mask, q) and not _occluded(ctx, v, q, z, cfg, index)
                    for q in ends)
    if not any(outside):
        return None
    return Candidate(index, v, ends, outside)


def boundary_crossing(ctx: ViewContext, p: GaussianPrimitive, view: int,
                      cfg: RefineConfig, src: int = -1) -> Optional[Tuple[float, np.ndarray, float]]:
    """Walk the projected major-axis segment from its in-mask end to its out-of-mask end.

    Returns ``(lam, e, overflow_px)``: the in-mask fraction of the 3-D segment (with the
    crossing mapped back through the perspective projection), the major axis oriented
    toward the in-mask end, and the on-screen length beyond the crossing. ``None`` when
    the segment does not cross the mask boundary.
    """
    cam = ctx.cameras[view]
    mask = ctx.masks[(view, int(p.label))].mask
    e, smax = major_axis(p)
    half = cfg.ellipse_sigma * 0.5 * smax
    ends3 = np.stack([p.mu + half * e, p.mu - half * e])
    pc = cam.to_camera(ends3)
    if np.any(pc[:, 2] <= DEFAULT.z_near):
        return None
    uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx, cam.fy * pc[:, 1] / pc[:, 2] + cam.cy], 1)
    ins = [_inside(mask, uv[0]), _inside(mask, uv[1])]
    if ins[0] == ins[1]:
        return None
    if not ins[0]:
        e, ends3, pc, uv = -e, ends3[::-1], pc[::-1], uv[::-1]
    if _occluded(ctx, view, uv[1], float(pc[1][2]), cfg, src):
        return None
    A, B = uv
    walk = bresenham(*_pixel(A), *_pixel(B))
    h, w = mask.shape
    inside = np.array([0 <= x < w and 0 <= y < h and mask[y, x] for x, y in walk])
    first_out = int(np.argmin(inside))
    if first_out == 0:
        return None
    mid = 0.5 * (walk[first_out - 1] + walk[first_out])
    AB = B - A
    f = float(np.clip((mid - A) @ AB / max(AB @ AB, 1e-300), 0.0, 1.0))
    crossing = A + f * AB
    # Invert the projection along the segment using the dominant screen axis.
    D = pc[1] - pc[0]
    i = 0 if abs(AB[0]) >= abs(AB[1]) else 1
    focal, center = (cam.fx, cam.cx) if i == 0 else (cam.fy, cam.cy)
    num = focal * pc[0][i] - (crossing[i] - center) * pc[0][2]
    den = (crossing[i] - center) * D[2] - focal * D[i]
    t = num / den if abs(den) > 1e-300 else f
    t = min(1.0, max(0.0, t))
    # In-mask length measured from the in-mask end of the +-smax/2 segment.
    lam = (t * 2.0 * half - (half - 0.5 * smax)) / smax
    overflow = float(np.linalg.norm(B - crossing))
    return lam, e, overflow


def vote_label(ctx: ViewContext, mu, src: int, fallback: int, cfg: RefineConfig) -> int:
    """Majority label over views where ``mu`` is visible and falls in some mask;
    ties go to the smaller label."""
    counts: Dict[int, int] = {}
    for v in range(len(ctx.cameras)):
        masks = ctx.masks_in(v)
        if not masks:
            continue
        hit = _visible(ctx, v, mu, src, cfg)
        if hit is None:
            continue
        for m in masks:
            if _inside(m.mask, hit[0]):
                counts[m.label] = counts.get(m.label, 0) + 1
                break
    if not counts:
        return int(fallback)
    top = max(counts.values())
    return min(k for k, c in counts.items() if c == top)


@dataclass
class RefineResult:
    field: StateSnapshot  # refined canonical field
    source: np.ndarray  # original primitive index of every refined primitive
    split: np.ndarray  # (N,) bool, original primitive was replaced by children
    candidates: List[Candidate]
    n_splits: int
    context: Optional[ViewContext] = None

    def kinematic_labels(self, coarse_labels) -> np.ndarray:
        """Per original primitive: its label, or -1 when it was split (its children have
        no correspondences in the other states)."""
        out = np.asarray(coarse_labels, dtype=np.int64).copy()
        out[self.split] = -1
        return out


def detect_boundary_candidates(field_: StateSnapshot, ctx: ViewContext,
                               cfg: RefineConfig = RefineConfig()) -> List[Candidate]:
    cands = []
    for i in range(len(field_)):
        c = candidate_test(ctx, field_[i], i, cfg)
        if c is not None:
            cands.append(c)
    return cands


def refine_labels(bundle: SceneBundle, labels, segmenter: Segmenter,
                  cfg: RefineConfig = RefineConfig(), views: Optional[Sequence[int]] = None,
                  splat: SplatConfig = DEFAULT, workers: int = 1,
                  context: Optional[ViewContext] = None) -> RefineResult:
    """Split boundary-straddling primitives of the canonical field and relabel the new
    children by multiview vote. Background children are re-tested, largest overflow
    first, until they fit one mask, fall below ``s_min`` or reach ``max_depth``."""
    cfg.validate()
    base = bundle.canonical.with_labels(labels)
    cams = bundle.cameras[base.state_index]
    ctx = context or acquire_masks(segmenter, base, cams, views, cfg.tau_vis, splat, workers)
    cands = detect_boundary_candidates(base, ctx, cfg)

    # Children of each original are keyed by their path in the split tree, so sorting
    # the paths restores a stable, depth-first order.
    pieces: Dict[int, Dict[Tuple[int, ...], GaussianPrimitive]] = {}
    heap = []
    for seq, c in enumerate(cands if cfg.max_depth > 0 else []):
        probe = boundary_crossing(ctx, base[c.index], c.view, cfg, c.index)
        if probe is not None:
            heap.append((-probe[2], seq, c.index, (), c.view))
    heapq.heapify(heap)
    seq = len(cands)
    n_splits = 0
    while heap:
        _, _, src, path, view = heapq.heappop(heap)
        prim = pieces[src].pop(path) if path else base[src]
        res = boundary_crossing(ctx, prim, view, cfg, src)
        lam = res[0] if res is not None else -1.0
        if not cfg.min_fraction <= lam <= 1.0 - cfg.min_fraction:
            if path:
                pieces[src][path] = prim
            continue
        part, bg = split_gaussian(prim, lam, res[1])
        n_splits += 1
        bg = replace_label(bg, vote_label(ctx, bg.mu, src, prim.label, cfg))
        kids = pieces.setdefault(src, {})
        kids[path + (0,)] = part
        kids[path + (1,)] = bg
        if len(path) + 1 >= cfg.max_depth or bg.s.max() < cfg.s_min:
            continue
        c = candidate_test(ctx, bg, src, cfg, splat)
        probe = boundary_crossing(ctx, bg, c.view, cfg, src) if c is not None else None
        if probe is not None:
            heapq.heappush(heap, (-probe[2], seq, src, path + (1,), c.view))
            seq += 1

    out: List[GaussianPrimitive] = []
    source: List[int] = []
    split = np.zeros(len(base), dtype=bool)
    for i in range(len(base)):
        if i not in pieces:
            out.append(base[i])
            source.append(i)
            continue
        split[i] = True
        for path in sorted(pieces[i]):
            prim = pieces[i][path]
            out.append(replace_label(prim, vote_label(ctx, prim.mu, i, prim.label, cfg)))
            source.append(i)
    refined = StateSnapshot.from_primitives(out, base.state_index) if out else base
    return RefineResult(refined, np.array(source, dtype=np.int64), split, cands, n_splits, ctx)
