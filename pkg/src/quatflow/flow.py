"""Conditional flow matching for action chunks.

Translation and gripper follow the linear interpolation path; rotation
follows the spherical (slerp) path on the unit-quaternion sphere.  The
module provides the noising operations, the closed-form target vector
fields, the loss terms, and Euler-integration inference.

Array layout: a chunk of horizon H stores translations ``x`` with shape
(H, 3), rotations ``q`` with shape (H, 4), and gripper values ``g`` with
shape (H,).  The batched helpers used by the trainer accept an extra
leading batch axis on every array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidStep, ShapeMismatch
from .rotation import (
    canonicalize,
    geodesic_angle,
    integrate_quat,
    sample_uniform_quat,
    slerp,
)

_SIN_EPS = 1e-7


@dataclass(frozen=True)
class FmConfig:
    """Flow-matching hyperparameters.

    alpha, beta        Beta-distribution shape parameters for the timestep.
    delta_min          lower bound of the training integration step.
    steps              Euler step count used at inference time.
    normalize_cosine   use 1 - cos(angle) instead of 1 - v.u for the
                       velocity loss (ablation flag; default is the raw
                       dot product).
    """

    alpha: float = 1.5
    beta: float = 1.0
    delta_min: float = 0.01
    steps: int = 10
    normalize_cosine: bool = False

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("beta-distribution shapes must be positive")
        if not 0 < self.delta_min < 1:
            raise ValueError("delta_min must lie in (0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass(frozen=True)
class ActionChunk:
    """Horizon-H sequence of actions: translation, rotation, gripper."""

    x: np.ndarray  # (H, 3)
    q: np.ndarray  # (H, 4), canonical for clean data
    g: np.ndarray  # (H,)

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float))
        h = self.x.shape[0]
        if h < 1:
            raise ShapeMismatch("chunk horizon must be >= 1")
        if self.x.shape != (h, 3) or self.q.shape != (h, 4) or self.g.shape != (h,):
            raise ShapeMismatch(
                f"inconsistent chunk shapes {self.x.shape} {self.q.shape} {self.g.shape}"
            )

    @property
    def horizon(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class FieldTarget:
    """Per-step denoising vector field: u_x (H,3), u_q (H,4), u_g (H,)."""

    x: np.ndarray
    q: np.ndarray
    g: np.ndarray


@dataclass(frozen=True)
class NoisySample:
    """A noised chunk with everything needed to supervise it."""

    chunk: ActionChunk  # the noisy chunk at timestep tau
    tau: float
    clean: ActionChunk
    eps: ActionChunk  # the noise draw


def sample_tau(rng: np.random.Generator, cfg: FmConfig) -> float:
    """Draw the flow timestep from Beta(alpha, beta)."""
    return float(rng.beta(cfg.alpha, cfg.beta))


def sample_delta(rng: np.random.Generator, tau: float, cfg: FmConfig) -> float:
    """Draw the training integration step from U(delta_min, 1 - tau).

    When tau leaves less room than delta_min the interval is empty and the
    whole remaining time 1 - tau is used.
    """
    remaining = 1.0 - tau
    if remaining <= cfg.delta_min:
        return remaining
    return float(rng.uniform(cfg.delta_min, remaining))


def make_noisy(
    clean: ActionChunk, rng: np.random.Generator, cfg: FmConfig, tau: float | None = None
) -> NoisySample:
    """Noise a clean chunk at a single shared timestep.

    Translation/gripper noise is standard normal, rotation noise uniform on
    the sphere.  Translation and gripper interpolate linearly; rotations
    interpolate along the slerp geodesic.  ``tau`` may be forced for tests.
    """
    if tau is None:
        tau = sample_tau(rng, cfg)
    h = clean.horizon
    eps = ActionChunk(
        x=rng.standard_normal((h, 3)),
        q=sample_uniform_quat(rng, (h,)),
        g=rng.standard_normal(h),
    )
    chunk = ActionChunk(
        x=tau * clean.x + (1.0 - tau) * eps.x,
        q=slerp(eps.q, clean.q, tau),
        g=tau * clean.g + (1.0 - tau) * eps.g,
    )
    return NoisySample(chunk=chunk, tau=float(tau), clean=clean, eps=eps)


def target_field_translation(clean_x, eps_x) -> np.ndarray:
    """Target field of the linear path: clean - eps, constant in tau."""
    return np.asarray(clean_x, dtype=float) - np.asarray(eps_x, dtype=float)


def target_field_rotation(clean_q, eps_q, tau) -> np.ndarray:
    """Closed-form derivative of the slerp path, as a raw 4-vector:

        theta / sin(theta) * (-cos((1 - tau) theta) q_eps
                              + cos(tau theta) q_t)

    with theta = arccos(q_eps . q_t).  Near theta = 0 the limit is
    q_t - q_eps.
    """
    clean_q = np.asarray(clean_q, dtype=float)
    eps_q = np.asarray(eps_q, dtype=float)
    tau = np.asarray(tau, dtype=float)[..., None]
    dot = np.clip(np.sum(eps_q * clean_q, axis=-1, keepdims=True), -1.0, 1.0)
    theta = np.arccos(dot)
    sin_theta = np.sin(theta)
    near = sin_theta < _SIN_EPS
    safe = np.where(near, 1.0, sin_theta)
    geo = (theta / safe) * (
        -np.cos((1.0 - tau) * theta) * eps_q + np.cos(tau * theta) * clean_q
    )
    return np.where(near, clean_q - eps_q, geo)


def loss_translation(pred, target) -> float:
    """Sum over the chunk of squared Euclidean errors (MSE form)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"{pred.shape} vs {target.shape}")
    return float(np.sum((pred - target) ** 2))


def loss_cosine(pred_vq, target_uq, normalize: bool = False) -> np.ndarray:
    """Velocity loss 1 - pred . target per step.

    With ``normalize`` both vectors are scaled to unit length first, which
    makes the loss a pure direction penalty with minimum 0.
    """
    pred_vq = np.asarray(pred_vq, dtype=float)
    target_uq = np.asarray(target_uq, dtype=float)
    if normalize:
        pn = np.linalg.norm(pred_vq, axis=-1, keepdims=True)
        tn = np.linalg.norm(target_uq, axis=-1, keepdims=True)
        pred_vq = pred_vq / np.maximum(pn, 1e-12)
        target_uq = target_uq / np.maximum(tn, 1e-12)
    return 1.0 - np.sum(pred_vq * target_uq, axis=-1)


def geodesic_distance_to_target(noisy_q, pred_vq, target_q, delta) -> np.ndarray:
    """min over sign of |target -+ integrate(noisy, pred, delta)| per step."""
    pred_q = integrate_quat(noisy_q, pred_vq, delta)
    target_q = np.asarray(target_q, dtype=float)
    d_minus = np.linalg.norm(target_q - pred_q, axis=-1)
    d_plus = np.linalg.norm(target_q + pred_q, axis=-1)
    return np.minimum(d_minus, d_plus)


def loss_geodesic(noisy_q, pred_vq, clean_q, eps_q, tau, delta) -> np.ndarray:
    """Geodesic loss between the integrated prediction and the path target.

    The target is the interpolated quaternion at tau + delta; the prediction
    integrates the predicted velocity from the noisy quaternion over delta.
    The sign minimum identifies antipodal representatives.
    """
    tau = np.asarray(tau, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(tau + delta > 1.0 + 1e-12):
        raise InvalidStep("tau + delta exceeds 1")
    target_q = slerp(eps_q, clean_q, tau + delta)
    return geodesic_distance_to_target(noisy_q, pred_vq, target_q, delta)


def loss_chordal(noisy_q, pred_vq, clean_q, eps_q, tau, delta) -> np.ndarray:
    """Squared-distance variant of the geodesic loss (ablation grid only)."""
    return loss_geodesic(noisy_q, pred_vq, clean_q, eps_q, tau, delta) ** 2


def total_loss(
    pred: FieldTarget,
    sample: NoisySample,
    cfg: FmConfig,
    rng: np.random.Generator | None = None,
    delta: float | None = None,
) -> float:
    """Translation + gripper MSE plus per-step cosine and geodesic terms.

    One delta is drawn per chunk from U(delta_min, 1 - tau) unless given
    explicitly.
    """
    if delta is None:
        if rng is None:
            raise ValueError("either rng or delta is required")
        delta = sample_delta(rng, sample.tau, cfg)
    clean, eps, noisy = sample.clean, sample.eps, sample.chunk
    u_x = target_field_translation(clean.x, eps.x)
    u_g = target_field_translation(clean.g, eps.g)
    u_q = target_field_rotation(clean.q, eps.q, sample.tau)
    r3 = loss_translation(pred.x, u_x) + loss_translation(pred.g, u_g)
    cos_terms = loss_cosine(pred.q, u_q, normalize=cfg.normalize_cosine)
    geo_terms = loss_geodesic(noisy.q, pred.q, clean.q, eps.q, sample.tau, delta)
    return float(r3 + np.sum(cos_terms) + np.sum(geo_terms))


def euler_step_translation(x, v, delta) -> np.ndarray:
    """Linear-space Euler step x + delta * v."""
    return np.asarray(x, dtype=float) + np.asarray(delta, dtype=float) * np.asarray(
        v, dtype=float
    )


def euler_step_rotation(q, vq, delta) -> np.ndarray:
    """Manifold Euler step: advance q along vq for flow time delta."""
    return integrate_quat(q, vq, delta)


def conditional_field_model(target: ActionChunk, rotation_path: str = "s3"):
    """Exact conditional vector field for a fixed target chunk.

    Returns a model callable ``(chunk, tau, obs) -> FieldTarget`` that
    re-anchors the interpolation path through the current state, so
    integrating it from any noise start recovers the target.  On the path
    itself it coincides with the closed-form target field.  Used as the
    inference oracle in tests and demos.
    """

    def model(chunk: ActionChunk, tau: float, obs=None) -> FieldTarget:
        remaining = max(1.0 - tau, 1e-9)
        u_x = (target.x - chunk.x) / remaining
        u_g = (target.g - chunk.g) / remaining
        if rotation_path == "linear":
            u_q = (target.q - chunk.q) / remaining
        else:
            # Geodesic field from the current quaternion toward the target,
            # traversing the remaining angle in the remaining flow time.
            dot = np.clip(np.sum(chunk.q * target.q, axis=-1, keepdims=True), -1.0, 1.0)
            theta = np.arccos(dot)
            sin_theta = np.sin(theta)
            near = sin_theta < _SIN_EPS
            safe = np.where(near, 1.0, sin_theta)
            geo = (theta / safe) * (target.q - dot * chunk.q)
            u_q = np.where(near, target.q - chunk.q, geo) / remaining
        return FieldTarget(x=u_x, q=u_q, g=u_g)

    return model


def generate(
    model,
    obs,
    cfg: FmConfig,
    rng: np.random.Generator,
    horizon: int = 5,
    rotation_path: str = "s3",
) -> ActionChunk:
    """Sample an action chunk by integrating the learned field from 0 to 1.

    The state starts at pure noise and takes ``cfg.steps`` uniform Euler
    steps, updating the translation/gripper channels linearly and the
    rotation channel on the manifold (or linearly in R^4 for the linear
    ablation path).  The gripper is clamped to [0, 1] at the end.
    """
    x = rng.standard_normal((horizon, 3))
    q = sample_uniform_quat(rng, (horizon,))
    g = rng.standard_normal(horizon)
    delta = 1.0 / cfg.steps
    for k in range(cfg.steps):
        tau = k * delta
        fieldv = model(ActionChunk(x=x, q=q, g=g), tau, obs)
        x = euler_step_translation(x, fieldv.x, delta)
        g = euler_step_translation(g, fieldv.g, delta)
        if rotation_path == "linear":
            q = q + delta * np.asarray(fieldv.q, dtype=float)
        else:
            q = euler_step_rotation(q, fieldv.q, delta)
    if rotation_path == "linear":
        norms = np.linalg.norm(q, axis=-1, keepdims=True)
        # A collapsed R^4 state carries no rotation information; fall back
        # to the identity rather than dividing by ~0.
        q = np.where(norms > 1e-12, q / np.maximum(norms, 1e-12), np.array([1.0, 0, 0, 0]))
    q = canonicalize(q)
    return ActionChunk(x=x, q=q, g=np.clip(g, 0.0, 1.0))


def chunk_geodesic_error(a: ActionChunk, b: ActionChunk) -> float:
    """Mean per-step rotation angle between two chunks."""
    return float(np.mean(geodesic_angle(a.q, b.q)))


def chunk_translation_error(a: ActionChunk, b: ActionChunk) -> float:
    """Mean per-step Euclidean translation error between two chunks."""
    return float(np.mean(np.linalg.norm(a.x - b.x, axis=-1)))
