"""Motion-driven coarse segmentation: static/dynamic split, part count, trajectory clustering."""
from __future__ import annotations

import base64
import json
import logging
import os
import re
import urllib.request
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Protocol, Sequence

import numpy as np

from .field import SceneBundle
from .imageio import encode_ppm
from .splat import SplatConfig, render_view

log = logging.getLogger(__name__)

VLM_PROMPT = ("Compare the two images. How many components moved? "
              "Answer: 'Number of moved components: [N]'.")
_COUNT_RE = re.compile(r"Number of moved components:\s*\[?\s*(\d+)\s*\]?", re.IGNORECASE)
DESCRIPTOR_EPS = 1e-9


class ProviderError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DisplacementStats:
    d: np.ndarray
    d_hat: np.ndarray


def displacement_stats(bundle: SceneBundle) -> DisplacementStats:
    """Largest center displacement of each primitive over all state pairs, and its
    normalization by the scene-wide maximum (all zeros for a motionless scene)."""
    mu = bundle.centers()
    K = mu.shape[0]
    d = np.zeros(mu.shape[1])
    for j in range(K):
        for k in range(j + 1, K):
            np.maximum(d, np.linalg.norm(mu[j] - mu[k], axis=1), out=d)
    top = d.max() if len(d) else 0.0
    d_hat = d / top if top > 0 else np.zeros_like(d)
    return DisplacementStats(d, d_hat)


def split_static_dynamic(stats: DisplacementStats, tau_mot: float = 0.05):
    if not 0.0 <= tau_mot <= 1.0:
        raise ValueError("tau_mot must lie in [0, 1]")
    dynamic = stats.d_hat >= tau_mot
    return np.flatnonzero(~dynamic), np.flatnonzero(dynamic)


# --- part count -----------------------------------------------------------------------

@dataclass(eq=False)
class ImagePair:
    """Two views of the object in different states; images are rendered on first use."""

    bundle: SceneBundle
    state_a: int
    view_a: int
    state_b: int
    view_b: int
    splat: SplatConfig = SplatConfig()

    @cached_property
    def images(self):
        b = self.bundle
        ra = render_view(b.states[self.state_a], b.cameras[self.state_a][self.view_a], self.splat)
        rb = render_view(b.states[self.state_b], b.cameras[self.state_b][self.view_b], self.splat)
        return ra.color, rb.color


class PartCountProvider(Protocol):
    def count_moved(self, pair: ImagePair) -> int:
        ...


@dataclass
class FixedProvider:
    n: int

    def count_moved(self, pair: ImagePair) -> int:
        return self.n


class OracleProvider:
    """Counts the ground-truth parts whose joint magnitude differs between the two states."""

    def count_moved(self, pair: ImagePair) -> int:
        gt = pair.bundle.ground_truth
        if gt is None:
            raise ProviderError("oracle provider needs a scene with ground truth")
        return sum(1 for p in gt.parts
                   if abs(p.magnitudes[pair.state_a] - p.magnitudes[pair.state_b]) > 1e-12)


def _ppm_data_url(rgb) -> str:
    return "data:image/x-portable-pixmap;base64," + base64.b64encode(encode_ppm(rgb)).decode("ascii")


def parse_count(text: str) -> int:
    m = _COUNT_RE.search(text)
    if m is None:
        raise ProviderError(f"could not find a component count in reply: {text[:200]!r}")
    return int(m.group(1))


@dataclass
class HttpProvider:
    """Chat-completion style endpoint.

    Request: ``{"model", "messages": [{"role": "user", "content": [text, image, image]}]}``
    with images as base64 PPM data URLs. Reply: OpenAI-style
    ``choices[0].message.content`` containing ``Number of moved components: [N]``.
    Configured from ``ARTIKIN_VLM_URL``, ``ARTIKIN_VLM_TOKEN``, ``ARTIKIN_VLM_MODEL``.
    """

    url: str
    token: Optional[str] = None
    model: str = "default"
    timeout: float = 60.0

    @classmethod
    def from_env(cls) -> "HttpProvider":
        url = os.environ.get("ARTIKIN_VLM_URL")
        if not url:
            raise ProviderError("ARTIKIN_VLM_URL is not set")
        return cls(url, os.environ.get("ARTIKIN_VLM_TOKEN"),
                   os.environ.get("ARTIKIN_VLM_MODEL", "default"))

    def build_request(self, pair: ImagePair) -> dict:
        img_a, img_b = pair.images
        content = [{"type": "text", "text": VLM_PROMPT}]
        content += [{"type": "image_url", "image_url": {"url": _ppm_data_url(im)}}
                    for im in (img_a, img_b)]
        return {"model": self.model, "messages": [{"role": "user", "content": content}]}

    def count_moved(self, pair: ImagePair) -> int:
        body = json.dumps(self.build_request(pair)).encode()
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read())
            return parse_count(reply["choices"][0]["message"]["content"])
        except (OSError, KeyError, IndexError, ValueError) as exc:
            raise ProviderError(f"VLM request failed: {exc}") from exc


def mode_smallest(counts: Sequence[int]) -> int:
    """Most frequent value; ties go to the smaller count."""
    if not counts:
        raise ProviderError("no part counts returned")
    tally = Counter(counts)
    best = max(tally.values())
    return min(v for v, c in tally.items() if c == best)


def sample_pairs(bundle: SceneBundle, M: int, rng: np.random.Generator) -> List[ImagePair]:
    pairs = []
    for _ in range(M):
        ka, kb = rng.choice(bundle.K, size=2, replace=False)
        va = int(rng.integers(len(bundle.cameras[ka])))
        nb = len(bundle.cameras[kb])
        vb = int(rng.integers(nb))
        if nb > 1 and vb == va:
            vb = (vb + 1) % nb
        pairs.append(ImagePair(bundle, int(ka), va, int(kb), vb))
    return pairs


def estimate_part_count(provider: PartCountProvider, bundle: SceneBundle, M: int = 5,
                        seed: int = 0, retries: int = 2) -> int:
    if M < 1:
        raise ValueError("M must be at least 1")
    if bundle.K < 2:
        raise ValueError("need at least two states")
    counts = []
    for pair in sample_pairs(bundle, M, np.random.default_rng(seed)):
        for attempt in range(retries + 1):
            try:
                counts.append(int(provider.count_moved(pair)))
                break
            except ProviderError as exc:
                if attempt == retries:
                    raise
                log.warning("provider failed (%s); retrying", exc)
    return mode_smallest(counts)


# --- descriptors and clustering -------------------------------------------------------

def build_descriptors(bundle: SceneBundle, dynamic) -> np.ndarray:
    """Per-primitive ``[dir_1, len_1, ..., dir_{K-1}, len_{K-1}]``, unit-normalized."""
    mu = bundle.centers()[:, np.asarray(dynamic, dtype=int)]
    delta = np.diff(mu, axis=0)  # (K-1, n, 3)
    length = np.linalg.norm(delta, axis=2, keepdims=True)
    blocks = np.concatenate([delta / (length + DESCRIPTOR_EPS), length], axis=2)
    f = np.transpose(blocks, (1, 0, 2)).reshape(mu.shape[1], -1)
    norm = np.linalg.norm(f, axis=1, keepdims=True)
    return np.where(norm > 0, f / np.where(norm > 0, norm, 1.0), 0.0)


def _sq_dists(X, C):
    return np.maximum(np.sum(X * X, 1)[:, None] - 2.0 * X @ C.T + np.sum(C * C, 1)[None, :], 0.0)


def kmeans_pp_init(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else int(rng.integers(n))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans(X, k, seed=0, n_init=10, max_iter=300, tol=1e-8):
    """Lloyd's algorithm from k-means++ seeds; the lowest-inertia of ``n_init`` runs wins."""
    X = np.asarray(X, dtype=float)
    if k > len(X):
        raise ValueError(f"cannot form {k} clusters from {len(X)} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        C = kmeans_pp_init(X, k, rng)
        for _ in range(max_iter):
            labels = np.argmin(_sq_dists(X, C), axis=1)
            newC = C.copy()
            for j in range(k):
                members = X[labels == j]
                if len(members):
                    newC[j] = members.mean(axis=0)
            shift = np.max(np.linalg.norm(newC - C, axis=1))
            C = newC
            if shift < tol:
                break
        labels = np.argmin(_sq_dists(X, C), axis=1)
        inertia = float(np.sum((X - C[labels]) ** 2))
        if best is None or inertia < best[0] - 1e-12:
            best = (inertia, labels, C)
    return best[1], best[2]


def cluster_dynamic(descriptors, n_parts: int, seed: int = 0, min_fraction: float = 0.02,
                    n_init: int = 10) -> np.ndarray:
    """Cluster descriptors into ``n_parts`` groups, dissolve clusters holding fewer than
    ``min_fraction`` of the points into the nearest surviving centroid, and return labels
    ``1..n_surviving`` numbered by first appearance."""
    X = np.asarray(descriptors, dtype=float)
    if n_parts < 1:
        raise ValueError("n_parts must be at least 1")
    if n_parts > len(X):
        raise ValueError(f"n_parts={n_parts} exceeds the number of dynamic primitives ({len(X)})")
    labels, C = kmeans(X, n_parts, seed, n_init=n_init)
    sizes = np.bincount(labels, minlength=n_parts)
    keep = sizes >= min_fraction * len(X)
    if not keep.any():
        keep[np.argmax(sizes)] = True
    if not keep.all():
        survivors = np.flatnonzero(keep)
        moved = ~keep[labels]
        labels = labels.copy()
        labels[moved] = survivors[np.argmin(_sq_dists(X[moved], C[survivors]), axis=1)]
    _, first = np.unique(labels, return_index=True)
    order = labels[np.sort(first)]
    remap = {int(old): new for new, old in enumerate(order, start=1)}
    return np.array([remap[int(v)] for v in labels], dtype=np.int64)


@dataclass
class CoarseResult:
    labels: np.ndarray
    stats: DisplacementStats
    dynamic: np.ndarray
    n_parts: int


def coarse_labels(bundle: SceneBundle, tau_mot: float = 0.05,
                  provider: Optional[PartCountProvider] = None, seed: int = 0,
                  M: int = 5, min_fraction: float = 0.02) -> CoarseResult:
    """Per-primitive coarse labels (0 = static)."""
    stats = displacement_stats(bundle)
    labels = np.zeros(bundle.N, dtype=np.int64)
    if not np.any(stats.d > 0):
        return CoarseResult(labels, stats, np.zeros(0, dtype=np.int64), 0)
    _, dynamic = split_static_dynamic(stats, tau_mot)
    if provider is None:
        raise ProviderError("a part-count provider is required for a scene with motion")
    n_parts = estimate_part_count(provider, bundle, M, seed)
    n_parts = max(1, min(n_parts, len(dynamic)))
    desc = build_descriptors(bundle, dynamic)
    labels[dynamic] = cluster_dynamic(desc, n_parts, seed, min_fraction)
    return CoarseResult(labels, stats, dynamic, n_parts)
