"""Desk-scale denoiser: a small MLP with manual backpropagation trained on
the flow-matching losses over synthetic conditional action distributions.

Supports EMA checkpointing, deterministic seeding, block-wise causal
attention-mask construction, and analytic-vs-finite-difference gradient
verification.  The rotation head emits a raw 4-vector exactly as the
losses consume it.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import blobio
from .errors import DivergenceDetected, ShapeMismatch
from .flow import ActionChunk, FieldTarget, FmConfig, target_field_rotation
from .rotation import (
    axis_angle_quat,
    canonicalize,
    conjugate,
    geodesic_angle,
    hamilton,
    integrate_quat,
    sample_uniform_quat,
    slerp,
)

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

# Role offsets for deriving sub-generators from the master seed.
SEED_PARAMS, SEED_DATA, SEED_EVAL = 0, 1, 2


@dataclass(frozen=True)
class DenoiserParams:
    """MLP weights plus the shapes that define the feature layout."""

    weights: dict  # name -> ndarray
    horizon: int
    cond_dim: int

    @property
    def hidden(self) -> tuple:
        return (self.weights["w1"].shape[1], self.weights["w2"].shape[1])

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            weights={k: v.copy() for k, v in self.weights.items()},
            horizon=self.horizon,
            cond_dim=self.cond_dim,
        )


@dataclass(frozen=True)
class EmaState:
    """Exponential-moving-average shadow of the parameters."""

    shadow: dict  # name -> ndarray
    decay: float


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 20_000
    batch_size: int = 64
    lr: float = 0.03
    loss_cosine: bool = True
    loss_geodesic: bool = True
    loss_chordal: bool = False
    loss_mse_field: bool = False
    rotation_path: str = "s3"  # s3 | linear
    fm: FmConfig = field(default_factory=FmConfig)
    hidden: tuple = (128, 128)
    ema_decay: float = 0.999
    eval_every: int = 100
    eval_samples: int = 8
    label: str = "run"

    def __post_init__(self):
        if not (self.loss_cosine or self.loss_geodesic or self.loss_chordal or self.loss_mse_field):
            raise ValueError("at least one rotation loss must be enabled")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.rotation_path not in ("s3", "linear"):
            raise ValueError(f"unknown rotation path: {self.rotation_path}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "seed", "steps", "batch_size", "lr", "loss_cosine", "loss_geodesic",
            "loss_chordal", "loss_mse_field", "rotation_path", "ema_decay",
            "eval_every", "eval_samples", "label",
        )}
        d["hidden"] = list(self.hidden)
        d["fm"] = {
            "alpha": self.fm.alpha, "beta": self.fm.beta,
            "delta_min": self.fm.delta_min, "steps": self.fm.steps,
            "normalize_cosine": self.fm.normalize_cosine,
        }
        return d


def init_params(rng: np.random.Generator, horizon: int, cond_dim: int,
                hidden=(128, 128)) -> DenoiserParams:
    d_in = 1 + 8 * horizon + cond_dim
    d_out = 8 * horizon
    h1, h2 = hidden
    weights = {
        "w1": rng.standard_normal((d_in, h1)) / np.sqrt(d_in),
        "b1": np.zeros(h1),
        "w2": rng.standard_normal((h1, h2)) / np.sqrt(h1),
        "b2": np.zeros(h2),
        "w3": rng.standard_normal((h2, d_out)) / np.sqrt(h2),
        "b3": np.zeros(d_out),
    }
    return DenoiserParams(weights=weights, horizon=horizon, cond_dim=cond_dim)


def _features(tau, x, q, g, cond) -> np.ndarray:
    b, h = x.shape[0], x.shape[1]
    flat = np.concatenate([x, q, g[..., None]], axis=-1).reshape(b, 8 * h)
    return np.concatenate([np.asarray(tau, dtype=float).reshape(b, 1), flat, cond], axis=1)


def _forward_batch(params: DenoiserParams, feats: np.ndarray):
    w = params.weights
    h1 = np.tanh(feats @ w["w1"] + w["b1"])
    h2 = np.tanh(h1 @ w["w2"] + w["b2"])
    out = h2 @ w["w3"] + w["b3"]
    b = feats.shape[0]
    return out.reshape(b, params.horizon, 8), (feats, h1, h2)


def _backward_batch(params: DenoiserParams, cache, d_out: np.ndarray) -> dict:
    feats, h1, h2 = cache
    w = params.weights
    d_flat = d_out.reshape(feats.shape[0], -1)
    grads = {}
    grads["w3"] = h2.T @ d_flat
    grads["b3"] = d_flat.sum(axis=0)
    dh2 = d_flat @ w["w3"].T
    dz2 = (1.0 - h2 * h2) * dh2
    grads["w2"] = h1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dh1 = dz2 @ w["w2"].T
    dz1 = (1.0 - h1 * h1) * dh1
    grads["w1"] = feats.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads


def forward(params: DenoiserParams, tau: float, noisy: ActionChunk, cond) -> FieldTarget:
    """Predict the per-step denoising field for one chunk."""
    cond = np.atleast_2d(np.asarray(cond, dtype=float))
    if noisy.horizon != params.horizon or cond.shape[1] != params.cond_dim:
        raise ShapeMismatch("chunk/conditioning shapes do not match the parameters")
    out, _ = _forward_batch(
        params, _features([tau], noisy.x[None], noisy.q[None], noisy.g[None], cond)
    )
    v = out[0]
    return FieldTarget(x=v[:, 0:3], q=v[:, 3:7], g=v[:, 7])


def make_model(params: DenoiserParams):
    """Wrap parameters as the (chunk, tau, obs) -> FieldTarget callable."""

    def model(chunk: ActionChunk, tau: float, obs) -> FieldTarget:
        return forward(params, tau, chunk, obs)

    return model


# --- geodesic-loss forward/backward -------------------------------------

def _geo_forward(q, v, target, delta):
    """Differentiable forward of min_sign |target -+ q*dq(v)| per element.

    q, v, target: (..., 4); delta: (..., 1).  Returns (loss, cache).
    Matches integrate_quat followed by the sign minimum (canonicalization
    only flips sign, which the minimum absorbs).
    """
    c = conjugate(q)
    p = hamilton(c, v)
    omega = 2.0 * p[..., 1:]
    r = np.linalg.norm(omega, axis=-1, keepdims=True)
    x = 0.5 * r * delta  # half rotation angle
    a = np.cos(x)
    small = r < 1e-12
    b = np.where(small, 0.5 * delta, np.sin(x) / np.where(small, 1.0, r))
    dq = np.concatenate([a, b * omega], axis=-1)
    qhat = hamilton(q, dq)
    sign = np.where(np.sum(target * qhat, axis=-1, keepdims=True) >= 0, 1.0, -1.0)
    diff = target - sign * qhat
    loss = np.linalg.norm(diff, axis=-1)
    return loss, (q, omega, r, a, b, qhat, sign, diff, delta)


def _geo_backward(cache, d_loss, squared: bool = False):
    """Gradient of the (optionally squared) sign-minimum distance w.r.t. v."""
    q, omega, r, a, b, qhat, sign, diff, delta = cache
    if squared:
        d_qhat = -2.0 * sign * diff * d_loss[..., None]
    else:
        norm = np.linalg.norm(diff, axis=-1, keepdims=True)
        safe = np.where(norm < 1e-12, 1.0, norm)
        d_qhat = np.where(norm < 1e-12, 0.0, -sign * diff / safe) * d_loss[..., None]
    # qhat = q * dq: adjoint of left multiplication is conjugate(q) * (.)
    d_dq = hamilton(conjugate(q), d_qhat)
    d_a = d_dq[..., :1]
    d_bv = d_dq[..., 1:]
    # a = cos(r d/2): da/domega = -(d/2) b omega  (b = sin(rd/2)/r)
    d_omega = d_a * (-0.5 * delta * b) * omega
    # dq_vec = b(r) omega
    d_omega = d_omega + b * d_bv
    # b'(r)/r, series-switched where the cancellation bites
    x = 0.5 * r * delta
    small = x < 1e-3
    num = 0.5 * delta * a * r - np.sin(x)
    r3 = np.where(small, 1.0, r**3)
    db_over_r = np.where(small, -(delta**3) / 24.0 + (r * delta) ** 2 * delta**3 / 960.0, num / r3)
    d_omega = d_omega + db_over_r * np.sum(omega * d_bv, axis=-1, keepdims=True) * omega
    # omega = 2 Im(conj(q) v); adjoint of (conj(q) *) is (q *)
    d_p = np.concatenate([np.zeros_like(d_omega[..., :1]), 2.0 * d_omega], axis=-1)
    return hamilton(q, d_p)


# --- batched training samples -------------------------------------------

@dataclass
class BatchSample:
    """Arrays for one training batch (leading dims: batch, horizon)."""

    cond: np.ndarray  # (B, C)
    clean_x: np.ndarray  # (B, H, 3)
    clean_q: np.ndarray  # (B, H, 4)
    clean_g: np.ndarray  # (B, H)
    eps_x: np.ndarray
    eps_q: np.ndarray
    eps_g: np.ndarray
    tau: np.ndarray  # (B,)
    delta: np.ndarray  # (B,)
    noisy_x: np.ndarray
    noisy_q: np.ndarray  # slerp point (s3) or raw lerp 4-vector (linear)
    noisy_g: np.ndarray


def make_batch(task, rng: np.random.Generator, cfg: TrainConfig) -> BatchSample:
    cond, clean_x, clean_q, clean_g = task.sample_batch(rng, cfg.batch_size)
    b, h = clean_x.shape[:2]
    tau = rng.beta(cfg.fm.alpha, cfg.fm.beta, b)
    eps_x = rng.standard_normal((b, h, 3))
    eps_g = rng.standard_normal((b, h))
    eps_q = sample_uniform_quat(rng, (b, h))
    rem = 1.0 - tau
    lo = np.minimum(cfg.fm.delta_min, rem)
    delta = lo + (rem - lo) * rng.uniform(size=b)
    t3 = tau[:, None, None]
    noisy_x = t3 * clean_x + (1 - t3) * eps_x
    noisy_g = tau[:, None] * clean_g + (1 - tau[:, None]) * eps_g
    if cfg.rotation_path == "linear":
        noisy_q = t3 * clean_q + (1 - t3) * eps_q
    else:
        noisy_q = slerp(eps_q, clean_q, tau[:, None])
    return BatchSample(
        cond=cond, clean_x=clean_x, clean_q=clean_q, clean_g=clean_g,
        eps_x=eps_x, eps_q=eps_q, eps_g=eps_g, tau=tau, delta=delta,
        noisy_x=noisy_x, noisy_q=noisy_q, noisy_g=noisy_g,
    )


def batch_from_samples(samples) -> BatchSample:
    """Stack NoisySample objects (shared conditioning unused -> zeros)."""
    b = len(samples)
    h = samples[0].clean.horizon
    out = BatchSample(
        cond=np.zeros((b, 0)),
        clean_x=np.stack([s.clean.x for s in samples]),
        clean_q=np.stack([s.clean.q for s in samples]),
        clean_g=np.stack([s.clean.g for s in samples]),
        eps_x=np.stack([s.eps.x for s in samples]),
        eps_q=np.stack([s.eps.q for s in samples]),
        eps_g=np.stack([s.eps.g for s in samples]),
        tau=np.array([s.tau for s in samples]),
        delta=np.full(b, 0.05),
        noisy_x=np.stack([s.chunk.x for s in samples]),
        noisy_q=np.stack([s.chunk.q for s in samples]),
        noisy_g=np.stack([s.chunk.g for s in samples]),
    )
    return out


def _norm_base(noisy_q):
    """Unit base for manifold integration (guards collapsed lerp points)."""
    norm = np.linalg.norm(noisy_q, axis=-1, keepdims=True)
    ok = norm > 1e-9
    base = np.where(ok, noisy_q / np.where(ok, norm, 1.0), [1.0, 0.0, 0.0, 0.0])
    return base, ok[..., 0]


def loss_and_grad(params: DenoiserParams, batch, cfg: TrainConfig,
                  geodesic_grad: str = "analytic"):
    """Batch-mean total loss and its gradient in parameter shapes.

    ``geodesic_grad="fd"`` swaps the geodesic term's velocity gradient for
    a central finite difference (verification fallback, much slower).
    """
    if isinstance(batch, (list, tuple)):
        batch = batch_from_samples(batch)
    b = batch.tau.shape[0]
    feats = _features(batch.tau, batch.noisy_x, batch.noisy_q, batch.noisy_g, batch.cond)
    out, cache = _forward_batch(params, feats)
    v_x, v_q, v_g = out[..., 0:3], out[..., 3:7], out[..., 7]

    u_x = batch.clean_x - batch.eps_x
    u_g = batch.clean_g - batch.eps_g
    if cfg.rotation_path == "linear":
        u_q = batch.clean_q - batch.eps_q
    else:
        u_q = target_field_rotation(batch.clean_q, batch.eps_q, batch.tau[:, None])

    d_out = np.zeros_like(out)
    parts = {}

    ex = v_x - u_x
    eg = v_g - u_g
    parts["loss_r3"] = (np.sum(ex**2) + np.sum(eg**2)) / b
    d_out[..., 0:3] += 2.0 * ex / b
    d_out[..., 7] += 2.0 * eg / b

    cos_part = 0.0
    if cfg.loss_cosine:
        if cfg.fm.normalize_cosine:
            vn = np.linalg.norm(v_q, axis=-1, keepdims=True)
            un = np.linalg.norm(u_q, axis=-1, keepdims=True)
            vs = np.maximum(vn, 1e-12)
            us = np.maximum(un, 1e-12)
            vhat, uhat = v_q / vs, u_q / us
            cosang = np.sum(vhat * uhat, axis=-1)
            cos_part = np.sum(1.0 - cosang) / b
            d_out[..., 3:7] += -(uhat - cosang[..., None] * vhat) / vs / b
        else:
            cos_part = np.sum(1.0 - np.sum(v_q * u_q, axis=-1)) / b
            d_out[..., 3:7] += -u_q / b
    parts["loss_cos"] = float(cos_part)

    if cfg.loss_mse_field:
        eq = v_q - u_q
        parts["loss_mse"] = float(np.sum(eq**2) / b)
        d_out[..., 3:7] += 2.0 * eq / b

    geo_part = 0.0
    if cfg.loss_geodesic or cfg.loss_chordal:
        base, ok = _norm_base(batch.noisy_q)
        base = canonicalize(base)
        tau_d = (batch.tau + batch.delta)[:, None]
        if cfg.rotation_path == "linear":
            raw = tau_d[..., None] * batch.clean_q + (1 - tau_d[..., None]) * batch.eps_q
            s_target, _ = _norm_base(raw)
            s_target = canonicalize(s_target)
        else:
            s_target = slerp(batch.eps_q, batch.clean_q, tau_d)
        delta3 = np.broadcast_to(batch.delta[:, None, None], (b, params.horizon, 1))
        loss_geo, gcache = _geo_forward(base, v_q, s_target, delta3)
        w = ok.astype(float)
        if cfg.loss_geodesic:
            geo_part += np.sum(loss_geo * w) / b
            if geodesic_grad == "fd":
                d_out[..., 3:7] += _geo_grad_fd(base, v_q, s_target, delta3, False) * w[..., None] / b
            else:
                d_out[..., 3:7] += _geo_backward(gcache, w / b)
        if cfg.loss_chordal:
            geo_part += np.sum(loss_geo**2 * w) / b
            if geodesic_grad == "fd":
                d_out[..., 3:7] += _geo_grad_fd(base, v_q, s_target, delta3, True) * w[..., None] / b
            else:
                d_out[..., 3:7] += _geo_backward(gcache, 2.0 * loss_geo * w / b, squared=True)
    parts["loss_geo"] = float(geo_part)

    loss = parts["loss_r3"] + parts["loss_cos"] + parts.get("loss_mse", 0.0) + parts["loss_geo"]
    parts["loss_total"] = float(loss)
    grads = _backward_batch(params, cache, d_out)
    return float(loss), grads, parts


def _geo_grad_fd(base, v_q, target, delta, squared, h=1e-6):
    grad = np.zeros_like(v_q)
    for j in range(4):
        shift = np.zeros_like(v_q)
        shift[..., j] = h
        lp, _ = _geo_forward(base, v_q + shift, target, delta)
        lm, _ = _geo_forward(base, v_q - shift, target, delta)
        if squared:
            lp, lm = lp**2, lm**2
        grad[..., j] = (lp - lm) / (2 * h)
    return grad


def ema_update(ema: EmaState, params: DenoiserParams, decay: float | None = None) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params, elementwise."""
    d = ema.decay if decay is None else decay
    shadow = {k: d * ema.shadow[k] + (1.0 - d) * params.weights[k] for k in ema.shadow}
    return EmaState(shadow=shadow, decay=ema.decay)


def _with_weights(params: DenoiserParams, weights: dict) -> DenoiserParams:
    return DenoiserParams(weights=weights, horizon=params.horizon, cond_dim=params.cond_dim)


# --- synthetic tasks ------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTask:
    """Fixed target chunks per discrete conditioning code.

    ``targets_*`` have shape (codes, modes, H, ...); unimodal tasks have
    one mode, the wide-rotation task two roughly opposite ones.
    """

    name: str
    targets_x: np.ndarray
    targets_q: np.ndarray
    targets_g: np.ndarray

    @property
    def n_codes(self) -> int:
        return self.targets_x.shape[0]

    @property
    def n_modes(self) -> int:
        return self.targets_x.shape[1]

    @property
    def horizon(self) -> int:
        return self.targets_x.shape[2]

    @property
    def cond_dim(self) -> int:
        return self.n_codes

    def sample_batch(self, rng: np.random.Generator, b: int):
        codes = rng.integers(self.n_codes, size=b)
        modes = rng.integers(self.n_modes, size=b)
        cond = np.eye(self.n_codes)[codes]
        return cond, self.targets_x[codes, modes], self.targets_q[codes, modes], self.targets_g[codes, modes]


def unimodal_task(seed: int, n_codes: int = 4, horizon: int = 5,
                  max_angle: float = 1.0, translation_scale: float = 0.5) -> SyntheticTask:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-translation_scale, translation_scale, (n_codes, 1, horizon, 3))
    axes = rng.standard_normal((n_codes, 1, horizon, 3))
    angles = rng.uniform(0.2, max_angle, (n_codes, 1, horizon))
    q = axis_angle_quat(axes, angles)
    g = rng.integers(0, 2, (n_codes, 1, horizon)).astype(float)
    return SyntheticTask(name="unimodal", targets_x=x, targets_q=q, targets_g=g)


def wide_rotation_task(seed: int, n_codes: int = 4, horizon: int = 5) -> SyntheticTask:
    """Bimodal task with rotation targets up to 170 degrees."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.5, 0.5, (n_codes, 2, horizon, 3))
    axes = rng.standard_normal((n_codes, 2, horizon, 3))
    angles = rng.uniform(np.deg2rad(150), np.deg2rad(170), (n_codes, 2, horizon))
    q = axis_angle_quat(axes, angles)
    g = rng.integers(0, 2, (n_codes, 2, horizon)).astype(float)
    return SyntheticTask(name="wide_rotation", targets_x=x, targets_q=q, targets_g=g)


# --- evaluation and training ----------------------------------------------

def _generate_batch(params: DenoiserParams, cond: np.ndarray, cfg: TrainConfig,
                    rng: np.random.Generator):
    """Vectorized sampling of one chunk per conditioning row."""
    n = cond.shape[0]
    h = params.horizon
    x = rng.standard_normal((n, h, 3))
    q = sample_uniform_quat(rng, (n, h))
    g = rng.standard_normal((n, h))
    delta = 1.0 / cfg.fm.steps
    for k in range(cfg.fm.steps):
        tau = k * delta
        out, _ = _forward_batch(params, _features(np.full(n, tau), x, q, g, cond))
        x = x + delta * out[..., 0:3]
        g = g + delta * out[..., 7]
        if cfg.rotation_path == "linear":
            q = q + delta * out[..., 3:7]
        else:
            q = integrate_quat(q, out[..., 3:7], delta)
    if cfg.rotation_path == "linear":
        q, _ = _norm_base(q)
    return x, canonicalize(q), np.clip(g, 0.0, 1.0)


def evaluate(params: DenoiserParams, task: SyntheticTask, cfg: TrainConfig,
             rng: np.random.Generator, n_samples: int | None = None):
    """Mean geodesic / translation errors of sampled chunks vs targets.

    Bimodal targets score against the closer mode.
    """
    n_samples = cfg.eval_samples if n_samples is None else n_samples
    codes = np.repeat(np.arange(task.n_codes), n_samples)
    cond = np.eye(task.n_codes)[codes]
    x, q, _ = _generate_batch(params, cond, cfg, rng)
    geo = np.stack(
        [np.mean(geodesic_angle(q, task.targets_q[codes, m]), axis=-1) for m in range(task.n_modes)]
    )
    trans = np.stack(
        [
            np.mean(np.linalg.norm(x - task.targets_x[codes, m], axis=-1), axis=-1)
            for m in range(task.n_modes)
        ]
    )
    pick = np.argmin(geo + trans, axis=0)
    sel = np.arange(codes.size)
    return float(geo[pick, sel].mean()), float(trans[pick, sel].mean())


@dataclass
class TrainResult:
    params: DenoiserParams
    ema: EmaState
    metrics: list  # dicts, one per logged step
    config: TrainConfig

    def metrics_csv(self) -> str:
        cols = ["step", "loss_total", "loss_r3", "loss_cos", "loss_geo",
                "eval_geo", "eval_trans", "eval_geo_ema", "eval_trans_ema"]
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in self.metrics:
            writer.writerow(row)
        return buf.getvalue()


def train(cfg: TrainConfig, task: SyntheticTask, out_dir=None) -> TrainResult:
    """Plain SGD with a fixed learning rate and per-step EMA updates.

    Fully deterministic given (config, seed): parameters, data, and eval
    noise each use a generator derived from the master seed by a fixed
    role offset.  Raises DivergenceDetected if the loss goes non-finite.
    """
    rng_params = np.random.default_rng(cfg.seed + SEED_PARAMS)
    rng_data = np.random.default_rng(cfg.seed + SEED_DATA)
    params = init_params(rng_params, task.horizon, task.cond_dim, cfg.hidden)
    ema = EmaState(shadow={k: v.copy() for k, v in params.weights.items()}, decay=cfg.ema_decay)
    metrics = []
    for step in range(1, cfg.steps + 1):
        batch = make_batch(task, rng_data, cfg)
        loss, grads, parts = loss_and_grad(params, batch, cfg)
        if not np.isfinite(loss):
            raise DivergenceDetected(f"non-finite loss at step {step}")
        weights = {k: params.weights[k] - cfg.lr * grads[k] for k in params.weights}
        params = _with_weights(params, weights)
        ema = ema_update(ema, params)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            # Fixed eval noise: paired comparisons across checkpoints.
            geo, trans = evaluate(params, task, cfg, np.random.default_rng(cfg.seed + SEED_EVAL))
            geo_e, trans_e = evaluate(
                _with_weights(params, ema.shadow), task, cfg,
                np.random.default_rng(cfg.seed + SEED_EVAL),
            )
            metrics.append(
                {
                    "step": step,
                    "loss_total": loss,
                    "loss_r3": parts["loss_r3"],
                    "loss_cos": parts["loss_cos"],
                    "loss_geo": parts["loss_geo"],
                    "eval_geo": geo,
                    "eval_trans": trans,
                    "eval_geo_ema": geo_e,
                    "eval_trans_ema": trans_e,
                }
            )
    result = TrainResult(params=params, ema=ema, metrics=metrics, config=cfg)
    if out_dir is not None:
        save_run(out_dir, result, task)
    return result


def save_checkpoint(path_prefix, params: DenoiserParams, step: int, seed: int, cfg_hash: str):
    """Checkpoint = JSON header + one float64 blob of concatenated params."""
    header = {
        "format_version": 1,
        "step": step,
        "seed": seed,
        "config_hash": cfg_hash,
        "horizon": params.horizon,
        "cond_dim": params.cond_dim,
        "shapes": {k: list(params.weights[k].shape) for k in PARAM_NAMES},
    }
    flat = np.concatenate([params.weights[k].ravel() for k in PARAM_NAMES])
    blobio.atomic_write_text(str(path_prefix) + ".json", json.dumps(header, sort_keys=True, indent=1))
    blobio.write_blob(str(path_prefix) + ".blob", flat)


def load_checkpoint(path_prefix) -> tuple[DenoiserParams, dict]:
    header = json.loads(open(str(path_prefix) + ".json").read())
    flat = blobio.read_blob(str(path_prefix) + ".blob")
    weights = {}
    offset = 0
    for k in PARAM_NAMES:
        shape = tuple(header["shapes"][k])
        size = int(np.prod(shape))
        weights[k] = flat[offset : offset + size].reshape(shape)
        offset += size
    params = DenoiserParams(weights=weights, horizon=header["horizon"], cond_dim=header["cond_dim"])
    return params, header


def save_run(out_dir, result: TrainResult, task: SyntheticTask):
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = blobio.config_hash(result.config.to_dict())
    save_checkpoint(out_dir / "params_final", result.params, result.config.steps,
                    result.config.seed, cfg_hash)
    save_checkpoint(
        out_dir / "params_ema",
        _with_weights(result.params, result.ema.shadow),
        result.config.steps, result.config.seed, cfg_hash,
    )
    blobio.atomic_write_text(out_dir / "metrics.csv", result.metrics_csv())


# --- attention mask and ablations ------------------------------------------

def blockwise_causal_mask(block_lengths) -> np.ndarray:
    """mask[i, j] is True iff block(j) <= block(i).

    Full bidirectional attention within a block; earlier blocks visible,
    later blocks hidden.
    """
    block_lengths = list(block_lengths)
    if any(n <= 0 for n in block_lengths):
        raise ValueError("block lengths must be positive")
    block_of = np.repeat(np.arange(len(block_lengths)), block_lengths)
    return block_of[None, :] <= block_of[:, None]


def ablation_run(configs, task_builder, seeds, out_csv=None) -> list:
    """Train every config on the same seeds/tasks; report final EMA errors.

    Returns per-(config, seed) rows followed by per-config mean/std
    summary rows.  ``task_builder(seed)`` supplies the shared task.
    """
    if len(configs) < 2:
        raise ValueError("need at least 2 configs to compare")
    rows = []
    for cfg in configs:
        per_seed = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            task = task_builder(seed)
            result = train(run_cfg, task)
            geo, trans = evaluate(
                _with_weights(result.params, result.ema.shadow), task, run_cfg,
                np.random.default_rng(seed + SEED_EVAL),
            )
            rows.append(
                {
                    "config": cfg.label, "seed": seed, "kind": "run",
                    "geo_err": geo, "trans_err": trans,
                    "config_hash": blobio.config_hash(run_cfg.to_dict()),
                }
            )
            per_seed.append((geo, trans))
        geo_arr = np.array([g for g, _ in per_seed])
        trans_arr = np.array([t for _, t in per_seed])
        rows.append(
            {
                "config": cfg.label, "seed": "all", "kind": "summary",
                "geo_err": float(geo_arr.mean()), "trans_err": float(trans_arr.mean()),
                "geo_std": float(geo_arr.std()), "trans_std": float(trans_arr.std()),
                "config_hash": blobio.config_hash(replace(cfg, seed=-1).to_dict()),
            }
        )
    if out_csv is not None:
        cols = ["config", "seed", "kind", "geo_err", "trans_err", "geo_std", "trans_std", "config_hash"]
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        blobio.atomic_write_text(out_csv, buf.getvalue())
    return rows
