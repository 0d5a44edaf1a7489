"""Latent-conditioned deformation field.

A small tanh MLP maps ``(mu, q, s, latent)`` of each canonical primitive to
offsets ``(dmu, dq_raw, ds)``; ``dq_raw`` is normalized and left-multiplied
onto the canonical orientation. One latent per observed state is learned
jointly with the weights by regressing the observed per-state geometry.
Gradients are derived by hand (no autodiff framework).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import quaternion as quat
from .field import GaussianPrimitive, SceneBundle, StateSnapshot

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "artikin-deform/1"
GEOM_DIM = 10  # mu:3, q:4, s:3
OUT_DIM = 10  # dmu:3, dq:4, ds:3
S_MIN = 1e-6


class DeformError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    epochs: int = 1500
    learning_rate: float = 5e-3
    latent_dim: int = 8
    seed: int = 0
    hidden: Tuple[int, ...] = (64, 64, 64)
    lambda_q: float = 0.1
    lambda_s: float = 0.1
    optimizer: str = "adam"  # or "gd" (fixed-step gradient descent)
    latent_init_std: float = 0.1
    s_min: float = S_MIN
    cosine_decay: bool = True
    final_learning_rate: float = 1e-4


@dataclass(eq=False)
class DeformNet:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    # centers enter the first layer as (mu - mu_center) / mu_scale
    mu_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mu_scale: float = 1.0

    @property
    def latent_dim(self) -> int:
        return self.weights[0].shape[0] - GEOM_DIM

    @classmethod
    def init(cls, latent_dim: int, hidden: Sequence[int], rng: np.random.Generator,
             output_scale: float = 0.0) -> "DeformNet":
        """Glorot-initialized hidden layers. With ``output_scale=0`` the output layer is
        zero and the net starts as the identity deformation."""
        dims = [GEOM_DIM + latent_dim, *hidden, OUT_DIM]
        weights, biases = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / (a + b)), size=(a, b)))
            biases.append(np.zeros(b))
        weights[-1] *= output_scale
        biases[-1][3] = 1.0
        return cls(weights, biases)

    def copy(self) -> "DeformNet":
        return DeformNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.mu_center.copy(), self.mu_scale)

    def inputs(self, mu, q, s, latent):
        n = len(mu)
        latent = np.asarray(latent, dtype=float)
        if latent.ndim == 1:
            latent = np.broadcast_to(latent, (n, len(latent)))
        return np.concatenate([(mu - self.mu_center) / self.mu_scale, q, s, latent], axis=1)

    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward_batch(self, X: np.ndarray):
        acts = [X]
        h = X
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
            acts.append(h)
        return h @ self.weights[-1] + self.biases[-1], acts

    def backward_batch(self, acts, dout):
        """Gradients for ``params()`` order and w.r.t. the input batch."""
        grads = []
        d = dout
        for layer in range(len(self.weights) - 1, -1, -1):
            h = acts[layer]
            grads.append(d.sum(axis=0))
            grads.append(h.T @ d)
            d = d @ self.weights[layer].T
            if layer > 0:
                d = d * (1.0 - h * h)
        grads.reverse()
        return grads, d


def forward(net: DeformNet, p: GaussianPrimitive, latent) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    out, _ = net.forward_batch(net.inputs(p.mu[None], p.q[None], p.s[None], latent))
    return out[0, :3], out[0, 3:7], out[0, 7:]


def apply_offsets(p: GaussianPrimitive, dmu, dq_raw, ds, s_min: float = S_MIN) -> GaussianPrimitive:
    dq_raw = np.asarray(dq_raw, dtype=float)
    if np.linalg.norm(dq_raw) <= 1e-12:
        raise DeformError("zero-norm rotation offset")
    q = quat.normalize(quat.multiply(quat.normalize(dq_raw), p.q))
    return GaussianPrimitive(p.mu + dmu, q, np.maximum(p.s + ds, s_min), p.rgb, p.opacity, p.label)


def _apply_batch(mu, q, s, out, s_min):
    dq = out[:, 3:7]
    norm = np.linalg.norm(dq, axis=1, keepdims=True)
    if np.any(norm <= 1e-12):
        raise DeformError("zero-norm rotation offset")
    n = dq / norm
    qn = quat.multiply(n, q)
    qn /= np.linalg.norm(qn, axis=1, keepdims=True)
    return mu + out[:, :3], qn, np.maximum(s + out[:, 7:], s_min), n, norm


def deform(net: DeformNet, canonical: StateSnapshot, latent, s_min: float = S_MIN,
           state_index: int = 0) -> StateSnapshot:
    out, _ = net.forward_batch(net.inputs(canonical.mu, canonical.q, canonical.s, latent))
    mu, q, s, _, _ = _apply_batch(canonical.mu, canonical.q, canonical.s, out, s_min)
    return canonical.with_geometry(mu, q, s, state_index)


def loss_and_grad(net: DeformNet, latents: np.ndarray, canonical: StateSnapshot,
                  targets: Sequence[StateSnapshot], lambda_q=0.1, lambda_s=0.1,
                  s_min=S_MIN, need_grad=True):
    """Mean regression loss over states and primitives, with gradients for the
    network parameters (``params()`` order) and the latent table."""
    K, N = len(targets), len(canonical)
    mu0 = np.tile(canonical.mu, (K, 1))
    q0 = np.tile(canonical.q, (K, 1))
    s0 = np.tile(canonical.s, (K, 1))
    X = net.inputs(mu0, q0, s0, np.repeat(latents, N, axis=0))
    mu_t = np.concatenate([t.mu for t in targets])
    q_t = np.concatenate([t.q for t in targets])
    s_t = np.concatenate([t.s for t in targets])

    out, acts = net.forward_batch(X)
    dq = out[:, 3:7]
    norm = np.linalg.norm(dq, axis=1, keepdims=True)
    n = dq / norm
    qp = quat.multiply(n, q0)
    raw_s = s0 + out[:, 7:]
    sp = np.maximum(raw_s, s_min)
    emu = mu0 + out[:, :3] - mu_t
    dot = np.sum(qp * q_t, axis=1)
    es = sp - s_t
    B = K * N
    loss = (np.sum(emu ** 2) + lambda_q * np.sum(1.0 - dot ** 2) + lambda_s * np.sum(es ** 2)) / B
    if not need_grad:
        return loss
    dout = np.empty_like(out)
    dout[:, :3] = 2.0 * emu / B
    g_qp = (-2.0 * lambda_q / B) * dot[:, None] * q_t
    # qp = n ⊗ q0 is linear in n: qp = M(q0) n
    w, x, y, z = q0.T
    M = np.stack([np.stack([w, -x, -y, -z], 1), np.stack([x, w, z, -y], 1),
                  np.stack([y, -z, w, x], 1), np.stack([z, y, -x, w], 1)], axis=1)
    g_n = np.einsum("bji,bj->bi", M, g_qp)
    dout[:, 3:7] = (g_n - n * np.sum(n * g_n, axis=1, keepdims=True)) / norm
    dout[:, 7:] = np.where(raw_s > s_min, 2.0 * lambda_s * es / B, 0.0)
    grads, dX = net.backward_batch(acts, dout)
    g_lat = dX[:, GEOM_DIM:].reshape(K, N, -1).sum(axis=1)
    return loss, grads, g_lat


@dataclass
class FitResult:
    net: DeformNet
    latents: np.ndarray
    final_loss: float
    history: List[float] = field(default_factory=list)
    config: FitConfig = FitConfig()


def fit(bundle: SceneBundle, cfg: FitConfig = FitConfig(), log_every: int = 0) -> FitResult:
    """Jointly fit network weights and per-state latents (full-batch)."""
    if bundle.K < 2:
        raise DeformError("need at least two states")
    rng = np.random.default_rng(cfg.seed)
    net = DeformNet.init(cfg.latent_dim, cfg.hidden, rng)
    mu = bundle.canonical.mu
    net.mu_center = mu.mean(axis=0)
    net.mu_scale = float(max(np.max(np.abs(mu - net.mu_center)), 1e-9))
    latents = rng.normal(0.0, cfg.latent_init_std, size=(bundle.K, cfg.latent_dim))
    params = net.params() + [latents]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    history = []
    loss = float("nan")
    for epoch in range(1, cfg.epochs + 1):
        loss, grads, g_lat = loss_and_grad(net, latents, bundle.canonical, bundle.states,
                                           cfg.lambda_q, cfg.lambda_s, cfg.s_min)
        if not np.isfinite(loss):
            raise DeformError(f"training diverged at epoch {epoch} (loss={loss}); "
                              f"lower learning_rate (currently {cfg.learning_rate})")
        history.append(float(loss))
        if log_every and epoch % log_every == 0:
            log.info("epoch %d loss %.3e", epoch, loss)
        grads = grads + [g_lat]
        lr = cfg.learning_rate
        if cfg.cosine_decay:
            lr = cfg.final_learning_rate + 0.5 * (cfg.learning_rate - cfg.final_learning_rate) * (
                1.0 + np.cos(np.pi * (epoch - 1) / max(cfg.epochs - 1, 1)))
        for j, (p, g) in enumerate(zip(params, grads)):
            if cfg.optimizer == "adam":
                m[j] = b1 * m[j] + (1 - b1) * g
                v[j] = b2 * v[j] + (1 - b2) * g * g
                mhat = m[j] / (1 - b1 ** epoch)
                vhat = v[j] / (1 - b2 ** epoch)
                p -= lr * mhat / (np.sqrt(vhat) + eps)
            elif cfg.optimizer == "gd":
                p -= lr * g
            else:
                raise DeformError(f"unknown optimizer {cfg.optimizer!r}")
    final = loss_and_grad(net, latents, bundle.canonical, bundle.states, cfg.lambda_q,
                          cfg.lambda_s, cfg.s_min, need_grad=False)
    if not np.isfinite(final):
        raise DeformError("training produced a non-finite final loss")
    return FitResult(net, latents, float(final), history, cfg)


def interpolate(net: DeformNet, latent_a, latent_b, t: float, canonical: StateSnapshot,
                part_filter: Optional[Iterable[int]] = None, s_min: float = S_MIN) -> StateSnapshot:
    """Deform ``canonical`` with the blended latent ``(1-t) a + t b``.

    With ``part_filter`` only primitives whose label is in the filter follow the
    blend; all others take the ``latent_a`` deformation.
    """
    a = np.asarray(latent_a, dtype=float)
    b = np.asarray(latent_b, dtype=float)
    blended = deform(net, canonical, (1.0 - t) * a + t * b, s_min)
    if part_filter is None:
        return blended
    wanted = set(int(v) for v in part_filter)
    unknown = wanted - set(int(v) for v in canonical.label)
    if unknown:
        raise DeformError(f"unknown part label(s) {sorted(unknown)}")
    base = deform(net, canonical, a, s_min)
    sel = np.isin(canonical.label, list(wanted))[:, None]
    return canonical.with_geometry(np.where(sel, blended.mu, base.mu),
                                   np.where(sel, blended.q, base.q),
                                   np.where(sel, blended.s, base.s))


def save_checkpoint(result: FitResult, path) -> None:
    cfg = asdict(result.config)
    cfg["hidden"] = list(cfg["hidden"])
    doc = {"format": CHECKPOINT_FORMAT,
           "activation": "tanh",
           "mu_center": result.net.mu_center.tolist(),
           "mu_scale": result.net.mu_scale,
           "layers": [{"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
                      for w, b in zip(result.net.weights, result.net.biases)],
           "latents": result.latents.tolist(),
           "final_loss": result.final_loss,
           "config": cfg}
    Path(path).write_text(json.dumps(doc, allow_nan=False))


def load_checkpoint(path) -> FitResult:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DeformError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    weights = [np.array(L["weight"], float).reshape(L["shape"]) for L in doc["layers"]]
    biases = [np.array(L["bias"], float) for L in doc["layers"]]
    cfg = dict(doc["config"])
    cfg["hidden"] = tuple(cfg["hidden"])
    net = DeformNet(weights, biases, np.array(doc["mu_center"], float), float(doc["mu_scale"]))
    return FitResult(net, np.array(doc["latents"], float),
                     float(doc["final_loss"]), [], FitConfig(**cfg))
