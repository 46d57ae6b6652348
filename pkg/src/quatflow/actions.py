"""Robot action-chunk data pipeline.

Covers trajectory resampling to a target control frequency, delta-action
chunk construction (translation deltas in the robot base frame, rotation
deltas in the end-effector frame, binary gripper), the three normalization
schemes, and weighted dataset-mixture sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptySpec, InsufficientData, OutOfRange, ShapeMismatch, TooShort
from .flow import ActionChunk
from .rotation import canonicalize, conjugate, hamilton, slerp

FORMAT_VERSION = 1

CHANNELS = ("tx", "ty", "tz", "g")


@dataclass(frozen=True)
class Pose:
    """End-effector state at one timestamp (base frame)."""

    t: np.ndarray  # (3,) position, meters
    r: np.ndarray  # (4,) canonical orientation quaternion
    g: float  # gripper opening in [0, 1]
    stamp: float  # seconds


@dataclass(frozen=True)
class Trajectory:
    """A time-stamped pose sequence, stored column-wise for vector math."""

    stamps: np.ndarray  # (N,), strictly increasing
    pos: np.ndarray  # (N, 3)
    quat: np.ndarray  # (N, 4) canonical
    grip: np.ndarray  # (N,)
    hz: float | None = None  # source frequency, if known

    def __post_init__(self):
        object.__setattr__(self, "stamps", np.asarray(self.stamps, dtype=float))
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=float))
        object.__setattr__(self, "quat", np.asarray(self.quat, dtype=float))
        object.__setattr__(self, "grip", np.asarray(self.grip, dtype=float))
        n = self.stamps.shape[0]
        if n < 2:
            raise ShapeMismatch("trajectory needs at least 2 poses")
        if self.pos.shape != (n, 3) or self.quat.shape != (n, 4) or self.grip.shape != (n,):
            raise ShapeMismatch("inconsistent trajectory array shapes")
        if np.any(np.diff(self.stamps) <= 0):
            raise ShapeMismatch("stamps must be strictly increasing")

    def __len__(self) -> int:
        return self.stamps.shape[0]

    def pose(self, i: int) -> Pose:
        return Pose(t=self.pos[i], r=self.quat[i], g=float(self.grip[i]), stamp=float(self.stamps[i]))


@dataclass(frozen=True)
class DeltaChunk:
    """Horizon-H delta actions relative to an anchor pose."""

    dt: np.ndarray  # (H, 3) translation deltas, base frame
    dr: np.ndarray  # (H, 4) rotation deltas, end-effector frame, canonical
    g: np.ndarray  # (H,) binary gripper commands

    @property
    def horizon(self) -> int:
        return self.dt.shape[0]

    def to_action_chunk(self) -> ActionChunk:
        return ActionChunk(x=self.dt, q=self.dr, g=self.g.astype(float))


@dataclass(frozen=True)
class NormStats:
    """Per-channel normalization parameters for one of the three schemes."""

    scheme: str  # quantile | minmax_const | mean_std
    params: dict  # channel -> {"lo","hi"} or {"mean","std"}

    def to_json(self) -> str:
        return json.dumps(
            {"format_version": FORMAT_VERSION, "scheme": self.scheme, "params": self.params},
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "NormStats":
        data = json.loads(text)
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported stats format: {data.get('format_version')}")
        return NormStats(scheme=data["scheme"], params=data["params"])


@dataclass(frozen=True)
class MixtureSpec:
    """Weighted dataset mixture; probabilities are normalized weights."""

    entries: tuple  # ((dataset_id, weight), ...)

    def __post_init__(self):
        if len(self.entries) == 0:
            raise EmptySpec("mixture spec has no entries")
        if any(w <= 0 for _, w in self.entries):
            raise ValueError("mixture weights must be positive")
        object.__setattr__(self, "entries", tuple((str(k), float(w)) for k, w in self.entries))

    @property
    def ids(self):
        return [k for k, _ in self.entries]

    @property
    def probabilities(self) -> np.ndarray:
        w = np.array([w for _, w in self.entries])
        return w / w.sum()

    def to_json(self) -> str:
        return json.dumps(
            {"format_version": FORMAT_VERSION, "entries": [list(e) for e in self.entries]},
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "MixtureSpec":
        data = json.loads(text)
        return MixtureSpec(entries=tuple((k, w) for k, w in data["entries"]))


def resample(traj: Trajectory, dst_hz: float) -> Trajectory:
    """Resample onto a uniform dst_hz grid covering the source span.

    Positions and gripper interpolate linearly between bracketing poses;
    orientations interpolate by slerp (set ``lerp_rotation=True`` on
    ``resample_ex`` for the component-lerp ablation).
    """
    return resample_ex(traj, dst_hz)


def resample_ex(traj: Trajectory, dst_hz: float, lerp_rotation: bool = False) -> Trajectory:
    if dst_hz <= 0:
        raise ValueError("dst_hz must be positive")
    span = traj.stamps[-1] - traj.stamps[0]
    if span < 2.0 / dst_hz:
        raise TooShort(f"trajectory spans {span:.4f}s, need >= {2.0 / dst_hz:.4f}s")
    n_out = int(np.floor(span * dst_hz + 1e-9)) + 1
    grid = traj.stamps[0] + np.arange(n_out) / dst_hz
    hi = np.searchsorted(traj.stamps, grid, side="right")
    hi = np.clip(hi, 1, len(traj) - 1)
    lo = hi - 1
    seg = traj.stamps[hi] - traj.stamps[lo]
    w = np.clip((grid - traj.stamps[lo]) / seg, 0.0, 1.0)
    pos = traj.pos[lo] + w[:, None] * (traj.pos[hi] - traj.pos[lo])
    grip = traj.grip[lo] + w * (traj.grip[hi] - traj.grip[lo])
    if lerp_rotation:
        raw = traj.quat[lo] + w[:, None] * (traj.quat[hi] - traj.quat[lo])
        quat = canonicalize(raw)
    else:
        quat = slerp(traj.quat[lo], traj.quat[hi], w)
    # Grid-aligned endpoints must be preserved bit for bit.
    exact = np.isin(grid, traj.stamps)
    if np.any(exact):
        src = np.searchsorted(traj.stamps, grid[exact])
        pos[exact] = traj.pos[src]
        quat[exact] = traj.quat[src]
        grip[exact] = traj.grip[src]
    return Trajectory(stamps=grid, pos=pos, quat=quat, grip=grip, hz=dst_hz)


def binarize_gripper(g, threshold: float = 0.5) -> np.ndarray:
    """1 if g >= threshold else 0 (boundary maps up)."""
    return (np.asarray(g, dtype=float) >= threshold).astype(np.int64)


def make_chunk(traj: Trajectory, start: int, horizon: int) -> DeltaChunk:
    """Delta-action chunk anchored at pose ``start``.

    For k = 1..H: translation delta in the base frame, rotation delta in
    the end-effector frame (conj(r_start) * r_{start+k}), binarized
    absolute gripper state at the target step.
    """
    if start < 0 or start + horizon >= len(traj):
        raise OutOfRange(f"chunk [{start}, {start + horizon}] exceeds length {len(traj)}")
    idx = start + 1 + np.arange(horizon)
    dt = traj.pos[idx] - traj.pos[start]
    dr = canonicalize(hamilton(np.broadcast_to(conjugate(traj.quat[start]), (horizon, 4)), traj.quat[idx]))
    return DeltaChunk(dt=dt, dr=dr, g=binarize_gripper(traj.grip[idx]))


def apply_chunk(pose: Pose, chunk: DeltaChunk, hz: float | None = None) -> list[Pose]:
    """Inverse of make_chunk given the anchor pose: t + dt, r * dr.

    Stamps advance by 1/hz when given, else by 1.
    """
    step = 1.0 / hz if hz else 1.0
    t = pose.t + chunk.dt
    r = canonicalize(hamilton(np.broadcast_to(pose.r, (chunk.horizon, 4)), chunk.dr))
    return [
        Pose(t=t[k], r=r[k], g=float(chunk.g[k]), stamp=pose.stamp + (k + 1) * step)
        for k in range(chunk.horizon)
    ]


def chunk_starts(n_poses: int, horizon: int, stride: int | None = None) -> np.ndarray:
    """Anchor indices for chunking; non-overlapping by default."""
    stride = horizon if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return np.arange(0, n_poses - horizon, stride)


def fit_norm(rows, scheme: str, bounds: dict | None = None) -> NormStats:
    """Fit normalization statistics over per-step rows (N, 4) = (tx,ty,tz,g).

    quantile     per-channel 1st/99th percentiles over the whole mixture.
    mean_std     per-channel mean and standard deviation.
    minmax_const fixed user bounds; defaults +-0.05 m translation, [0,1]
                 gripper.  Ignores the data stream.
    """
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != len(CHANNELS):
        raise ShapeMismatch(f"expected rows of shape (N, {len(CHANNELS)})")
    if scheme == "minmax_const":
        defaults = {"tx": (-0.05, 0.05), "ty": (-0.05, 0.05), "tz": (-0.05, 0.05), "g": (0.0, 1.0)}
        if bounds:
            defaults.update(bounds)
        params = {ch: {"lo": float(lo), "hi": float(hi)} for ch, (lo, hi) in defaults.items()}
        return NormStats(scheme=scheme, params=params)
    if rows.shape[0] < 100:
        raise InsufficientData(f"need >= 100 rows per channel, got {rows.shape[0]}")
    params = {}
    for j, ch in enumerate(CHANNELS):
        col = rows[:, j]
        if scheme == "quantile":
            lo, hi = np.quantile(col, [0.01, 0.99])
            if not hi > lo:
                raise InsufficientData(f"degenerate channel {ch}: q01 == q99")
            params[ch] = {"lo": float(lo), "hi": float(hi)}
        elif scheme == "mean_std":
            std = col.std()
            if std <= 0:
                raise InsufficientData(f"degenerate channel {ch}: zero std")
            params[ch] = {"mean": float(col.mean()), "std": float(std)}
        else:
            raise ValueError(f"unknown scheme: {scheme}")
    return NormStats(scheme=scheme, params=params)


def normalize(rows, stats: NormStats, clip: bool = False) -> np.ndarray:
    """Map channel rows (..., 4) into normalized units.

    Range schemes map [lo, hi] affinely onto [-1, 1]; out-of-range values
    pass through the same affine map unless ``clip``.  mean_std maps to
    zero mean, unit variance.  Rotation quaternions never pass through
    here; they live on the unit sphere.
    """
    rows = np.asarray(rows, dtype=float)
    out = np.empty_like(rows)
    for j, ch in enumerate(CHANNELS):
        p = stats.params[ch]
        if stats.scheme in ("quantile", "minmax_const"):
            out[..., j] = 2.0 * (rows[..., j] - p["lo"]) / (p["hi"] - p["lo"]) - 1.0
        else:
            out[..., j] = (rows[..., j] - p["mean"]) / p["std"]
    if clip:
        out = np.clip(out, -1.0, 1.0)
    return out


def denormalize(rows, stats: NormStats) -> np.ndarray:
    """Exact inverse of ``normalize`` (without clipping)."""
    rows = np.asarray(rows, dtype=float)
    out = np.empty_like(rows)
    for j, ch in enumerate(CHANNELS):
        p = stats.params[ch]
        if stats.scheme in ("quantile", "minmax_const"):
            out[..., j] = (rows[..., j] + 1.0) / 2.0 * (p["hi"] - p["lo"]) + p["lo"]
        else:
            out[..., j] = rows[..., j] * p["std"] + p["mean"]
    return out


def chunk_rows(chunk: DeltaChunk) -> np.ndarray:
    """Stack a chunk's normalizable channels as (H, 4) rows."""
    return np.column_stack([chunk.dt, chunk.g.astype(float)])


def sample_mixture(spec: MixtureSpec, rng: np.random.Generator, n: int) -> list[str]:
    """n i.i.d. categorical draws of dataset ids."""
    idx = rng.choice(len(spec.entries), size=n, p=spec.probabilities)
    ids = spec.ids
    return [ids[i] for i in idx]


def mixture_sampler(spec: MixtureSpec, rng: np.random.Generator):
    """Infinite stream of dataset ids, deterministic under a fixed seed."""
    while True:
        yield from sample_mixture(spec, rng, 1024)


def trajectory_to_jsonl(traj: Trajectory) -> str:
    lines = []
    for i in range(len(traj)):
        lines.append(
            json.dumps(
                {
                    "stamp": traj.stamps[i],
                    "t": traj.pos[i].tolist(),
                    "r": traj.quat[i].tolist(),
                    "g": traj.grip[i],
                },
                sort_keys=True,
            )
        )
    return "\n".join(lines) + "\n"


def trajectory_from_jsonl(text: str, hz: float | None = None) -> Trajectory:
    stamps, pos, quat, grip = [], [], [], []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        stamps.append(rec["stamp"])
        pos.append(rec["t"])
        quat.append(rec["r"])
        grip.append(rec["g"])
    return Trajectory(
        stamps=np.array(stamps),
        pos=np.array(pos),
        quat=canonicalize(np.array(quat)),
        grip=np.array(grip),
        hz=hz,
    )
