"""Forward splatting: covariance projection, per-pixel density and front-to-back compositing.

Pixel ``(col, row)`` has image-plane coordinates ``x = (col, row)``: densities
are point-sampled at pixel centers. No tiling; each primitive touches only the
pixels inside its cutoff bounding box.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .field import CameraModel, GaussianPrimitive, StateSnapshot, covariance_of, covariances


@dataclass(frozen=True)
class SplatConfig:
    z_near: float = 1e-4
    dilation: float = 0.3  # px^2 added to both diagonal entries
    alpha_clamp: float = 0.99
    cutoff_sigma: float = 3.0


DEFAULT = SplatConfig()


@dataclass(frozen=True, eq=False)
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    source_index: int = -1


@dataclass(eq=False)
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), 0 where nothing was hit
    weight_maps: Dict[int, np.ndarray]  # label -> (H, W)
    transmittance: np.ndarray  # (H, W)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.transmittance


def perspective_jacobian(cam: CameraModel, pc) -> np.ndarray:
    """Jacobian of the pixel projection w.r.t. camera-space point(s) ``pc``."""
    pc = np.asarray(pc, dtype=float)
    x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
    J = np.zeros(pc.shape[:-1] + (2, 3))
    J[..., 0, 0] = cam.fx / z
    J[..., 0, 2] = -cam.fx * x / z ** 2
    J[..., 1, 1] = cam.fy / z
    J[..., 1, 2] = -cam.fy * y / z ** 2
    return J


def _bbox_hits_viewport(mean, cov, cam, cfg):
    hx = cfg.cutoff_sigma * np.sqrt(cov[..., 0, 0])
    hy = cfg.cutoff_sigma * np.sqrt(cov[..., 1, 1])
    return ((mean[..., 0] + hx >= 0) & (mean[..., 0] - hx <= cam.width - 1)
            & (mean[..., 1] + hy >= 0) & (mean[..., 1] - hy <= cam.height - 1))


def project_gaussian(p: GaussianPrimitive, cam: CameraModel,
                     cfg: SplatConfig = DEFAULT) -> Optional[ProjectedGaussian]:
    """Screen-space mean and ``J W Σ Wᵀ Jᵀ + dilation·I``; ``None`` when culled."""
    pc = cam.to_camera(p.mu)
    if pc[2] <= cfg.z_near:
        return None
    J = perspective_jacobian(cam, pc)
    M = J @ cam.rotation
    cov = M @ covariance_of(p) @ M.T
    cov = 0.5 * (cov + cov.T) + cfg.dilation * np.eye(2)
    mean = np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])
    if not _bbox_hits_viewport(mean, cov, cam, cfg):
        return None
    return ProjectedGaussian(mean, cov, float(pc[2]))


def project_all(field: StateSnapshot, cam: CameraModel, cfg: SplatConfig = DEFAULT):
    """Vectorized projection. Returns ``(mean2d, cov2d, depth, visible)``."""
    n = len(field)
    pc = cam.to_camera(field.mu)
    z = pc[:, 2]
    visible = z > cfg.z_near
    zs = np.where(visible, z, 1.0)
    pcs = pc.copy()
    pcs[:, 2] = zs
    J = perspective_jacobian(cam, pcs)
    M = J @ cam.rotation
    cov = M @ covariances(field.q, field.s) @ np.swapaxes(M, 1, 2)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2)) + cfg.dilation * np.eye(2)
    mean = np.stack([cam.fx * pc[:, 0] / zs + cam.cx, cam.fy * pc[:, 1] / zs + cam.cy], axis=1)
    if n:
        visible &= _bbox_hits_viewport(mean, cov, cam, cfg)
    return mean, cov, z, visible


def pixel_density(pg: ProjectedGaussian, opacity: float, x, cfg: SplatConfig = DEFAULT) -> float:
    d = np.asarray(x, dtype=float) - pg.mean2d
    m2 = float(d @ np.linalg.solve(pg.cov2d, d))
    if m2 > cfg.cutoff_sigma ** 2:
        return 0.0
    return min(opacity * math.exp(-0.5 * m2), cfg.alpha_clamp)


def composite_pixel(entries):
    """Front-to-back compositing of ``(rho, color, part)`` entries at one pixel.

    Returns ``(color, {part: weight}, transmittance)``.
    """
    color = np.zeros(3)
    weights: Dict[int, float] = {}
    T = 1.0
    for rho, c, part in entries:
        w = rho * T
        color = color + w * np.asarray(c, dtype=float)
        weights[part] = weights.get(part, 0.0) + w
        T *= 1.0 - rho
    return color, weights, T


def render_view(field: StateSnapshot, cam: CameraModel, cfg: SplatConfig = DEFAULT,
                labels=None) -> RenderOutput:
    """Render one view. ``labels`` overrides ``field.label`` for the weight maps."""
    H, W = cam.height, cam.width
    labels = field.label if labels is None else np.asarray(labels)
    uniq = sorted(set(int(v) for v in labels))
    slot = {lab: j for j, lab in enumerate(uniq)}
    T = np.ones((H, W))
    color = np.zeros((H, W, 3))
    depth_acc = np.zeros((H, W))
    weights = np.zeros((len(uniq), H, W))
    if len(field):
        mean, cov, z, visible = project_all(field, cam, cfg)
        idx = np.flatnonzero(visible)
        order = idx[np.argsort(z[idx], kind="stable")]
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
        ia = cov[:, 1, 1] / det
        ib = -cov[:, 0, 1] / det
        ic = cov[:, 0, 0] / det
        hx = cfg.cutoff_sigma * np.sqrt(cov[:, 0, 0])
        hy = cfg.cutoff_sigma * np.sqrt(cov[:, 1, 1])
        c2 = cfg.cutoff_sigma ** 2
        for i in order:
            u, v = mean[i]
            x0, x1 = max(0, math.ceil(u - hx[i])), min(W - 1, math.floor(u + hx[i]))
            y0, y1 = max(0, math.ceil(v - hy[i])), min(H - 1, math.floor(v + hy[i]))
            if x0 > x1 or y0 > y1:
                continue
            dx = np.arange(x0, x1 + 1) - u
            dy = (np.arange(y0, y1 + 1) - v)[:, None]
            m2 = ia[i] * dx * dx + 2.0 * ib[i] * dx * dy + ic[i] * dy * dy
            rho = field.opacity[i] * np.exp(-0.5 * m2)
            rho[m2 > c2] = 0.0
            np.minimum(rho, cfg.alpha_clamp, out=rho)
            Tp = T[y0:y1 + 1, x0:x1 + 1]
            w = rho * Tp
            color[y0:y1 + 1, x0:x1 + 1] += w[..., None] * field.rgb[i]
            depth_acc[y0:y1 + 1, x0:x1 + 1] += w * z[i]
            weights[slot[int(labels[i])], y0:y1 + 1, x0:x1 + 1] += w
            Tp *= 1.0 - rho
    acc = weights.sum(axis=0) if len(uniq) else np.zeros((H, W))
    depth = np.where(acc >= 1e-6, depth_acc / np.maximum(acc, 1e-300), 0.0)
    return RenderOutput(color, depth, {lab: weights[j] for lab, j in slot.items()}, T)


def render_views(field: StateSnapshot, cams: Sequence[CameraModel],
                 cfg: SplatConfig = DEFAULT, labels=None, workers: int = 1) -> List[RenderOutput]:
    """Render every camera. Views are independent, so ``workers > 1`` renders them in
    threads; output does not depend on the schedule."""
    if workers <= 1 or len(cams) <= 1:
        return [render_view(field, c, cfg, labels) for c in cams]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: render_view(field, c, cfg, labels), cams))


def silhouette(render: RenderOutput, threshold: float = 0.5) -> np.ndarray:
    return render.alpha > threshold
