"""Quantile discretization of 3D coordinate/distance values into N tokens.

The vocabulary clips values to the 1st/99th percentile range of the fit
data and places bin edges at equal-mass empirical quantiles inside that
range, so token usage on in-range data is approximately uniform.  Values
outside the range clamp into the edge bins.  The decoder returns the
within-bin median seen at fit time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCovariance, IndexOutOfRange, InsufficientData

FORMAT_VERSION = 1

DEFAULT_BINS = 1024


@dataclass(frozen=True)
class TokenVocab3D:
    """Fitted vocabulary: ascending edges, one center per bin."""

    n_bins: int
    edges: np.ndarray  # (n_bins + 1,), edges[0] = z_min, edges[-1] = z_max
    centers: np.ndarray  # (n_bins,), strictly inside their bins
    z_min: float
    z_max: float

    def __post_init__(self):
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=float))
        object.__setattr__(self, "centers", np.asarray(self.centers, dtype=float))

    def to_json(self) -> str:
        return json.dumps(
            {
                "format_version": FORMAT_VERSION,
                "n_bins": self.n_bins,
                "z_min": self.z_min,
                "z_max": self.z_max,
                "edges": self.edges.tolist(),
                "centers": self.centers.tolist(),
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "TokenVocab3D":
        data = json.loads(text)
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported vocabulary format: {data.get('format_version')}")
        return TokenVocab3D(
            n_bins=int(data["n_bins"]),
            edges=np.array(data["edges"], dtype=float),
            centers=np.array(data["centers"], dtype=float),
            z_min=float(data["z_min"]),
            z_max=float(data["z_max"]),
        )


def fit_vocab(samples, n_bins: int = DEFAULT_BINS, strategy: str = "quantile") -> TokenVocab3D:
    """Fit a vocabulary to pooled coordinate/distance samples.

    ``strategy="quantile"`` (default) places interior edges at equal-mass
    quantiles of the in-range samples; ``"uniform"`` uses equal-width bins
    (ablation mode showing why equal-mass binning is needed).
    """
    samples = np.asarray(samples, dtype=float).ravel()
    samples = samples[np.isfinite(samples)]
    if samples.size < 10 * n_bins:
        raise InsufficientData(
            f"need at least {10 * n_bins} finite samples, got {samples.size}"
        )
    z_min, z_max = np.quantile(samples, [0.01, 0.99])
    if not z_max > z_min:
        raise InsufficientData("degenerate sample distribution: z_min == z_max")
    inside = np.sort(samples[(samples >= z_min) & (samples <= z_max)])
    if strategy == "quantile":
        interior = np.quantile(inside, np.arange(1, n_bins) / n_bins)
        edges = np.concatenate([[z_min], interior, [z_max]])
    elif strategy == "uniform":
        edges = np.linspace(z_min, z_max, n_bins + 1)
    else:
        raise ValueError(f"unknown binning strategy: {strategy}")
    if np.any(np.diff(edges) <= 0):
        raise InsufficientData("sample distribution too discrete for strictly ascending edges")
    # Values are already sorted, and bin membership is monotone in value, so
    # each bin is a contiguous slice: the median is read off by index.
    lo = np.searchsorted(inside, edges[:-1], side="left")
    hi = np.searchsorted(inside, edges[1:], side="left")
    hi[-1] = inside.size
    centers = np.empty(n_bins)
    for i in range(n_bins):
        if hi[i] > lo[i]:
            seg = inside[lo[i] : hi[i]]
            centers[i] = 0.5 * (seg[(seg.size - 1) // 2] + seg[seg.size // 2])
        else:
            centers[i] = 0.5 * (edges[i] + edges[i + 1])
    # Keep every center strictly inside its bin so decode/encode round-trips.
    mid = 0.5 * (edges[:-1] + edges[1:])
    at_edge = (centers <= edges[:-1]) | (centers >= edges[1:])
    centers = np.where(at_edge, mid, centers)
    return TokenVocab3D(
        n_bins=n_bins, edges=edges, centers=centers, z_min=float(z_min), z_max=float(z_max)
    )


def encode(v, vocab: TokenVocab3D) -> np.ndarray:
    """Token index of the bin containing clamp(v, z_min, z_max).

    Boundary values resolve to the lower bin, except z_max which maps to
    the last bin.
    """
    v = np.clip(np.asarray(v, dtype=float), vocab.z_min, vocab.z_max)
    idx = np.searchsorted(vocab.edges, v, side="left") - 1
    return np.clip(idx, 0, vocab.n_bins - 1)


def decode(idx, vocab: TokenVocab3D) -> np.ndarray:
    """Representative value (within-bin median) of a token index."""
    idx = np.asarray(idx)
    if np.any(idx < 0) or np.any(idx >= vocab.n_bins):
        raise IndexOutOfRange(f"token index outside [0, {vocab.n_bins})")
    return vocab.centers[idx]


def encode_point(p, vocab: TokenVocab3D) -> np.ndarray:
    """Encode a 3-vector coordinate-major: (x, y, z) -> 3 token indices."""
    p = np.asarray(p, dtype=float)
    return encode(p, vocab).reshape(p.shape)


def encode_box(box, vocab: TokenVocab3D) -> np.ndarray:
    """Encode the 8 canonically ordered box vertices into 24 token indices."""
    from .scene import order_vertices

    verts = order_vertices(box)
    return encode(verts, vocab).ravel()


def usage_histogram(vocab: TokenVocab3D, samples) -> tuple[np.ndarray, float]:
    """Per-token counts over encode(samples) plus the max/min usage ratio.

    Note the 1% tail mass outside [z_min, z_max] clamps into the edge bins;
    pass in-range values to measure the uniformity of the binning itself.
    """
    idx = encode(samples, vocab)
    counts = np.bincount(idx.ravel(), minlength=vocab.n_bins)
    low = counts.min()
    ratio = float("inf") if low == 0 else float(counts.max() / low)
    return counts, ratio


def init_embeddings(
    existing, n_new: int, rng: np.random.Generator, shrinkage: float = 0.05
) -> np.ndarray:
    """Sample embedding rows matching the mean/covariance of existing rows.

    Uses a symmetric eigendecomposition square root of the (shrunken when
    rank-deficient) sample covariance.
    """
    existing = np.asarray(existing, dtype=float)
    if existing.ndim != 2 or existing.shape[0] < 2:
        raise InsufficientData("need a (rows >= 2, dim) embedding matrix")
    rows, dim = existing.shape
    mu = existing.mean(axis=0)
    cov = np.cov(existing, rowvar=False).reshape(dim, dim)
    eigval = np.linalg.eigvalsh(cov)
    if rows <= dim or eigval.min() <= 1e-12 * max(eigval.max(), 1e-30):
        cov = (1.0 - shrinkage) * cov + shrinkage * (np.trace(cov) / dim) * np.eye(dim)
        eigval = np.linalg.eigvalsh(cov)
        if eigval.min() <= 0:
            raise DegenerateCovariance("shrinkage could not restore positive definiteness")
    w, v = np.linalg.eigh(cov)
    root = (v * np.sqrt(np.maximum(w, 0.0))) @ v.T
    return mu + rng.standard_normal((n_new, dim)) @ root


def render_token(idx: int) -> str:
    """Human-readable placeholder text for a 3D token, e.g. <loc3d_0437>."""
    return f"<loc3d_{idx:04d}>"
