"""Spatial attention and its perturbation-coupled backtracking update.

The pipeline per training step:

  M       sigmoid(conv(channel_pool(features)))  -- plain spatial attention
  M_hat   M - xi1 * dG/dM                        -- one gradient step
  gamma   column sums of G_hat (*) dDelta/dM     -- coupling gain per row
  M_assoc M_hat - xi2 * gamma * M on elements whose input-gradient rank
          exceeds zeta, then clamped to [0, 1]

All the post-backward math (descend/coupling/backtrack) operates on plain
numpy maps of shape [N, 1, H, H]; only spatial_attention is taped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from aal.tensor import ShapeError, Tensor, channel_pool, conv2d, sigmoid

__all__ = [
    "SpatialAttentionParams",
    "AttentionState",
    "spatial_attention",
    "descend_attention",
    "coupling_gain",
    "rank_normalize",
    "backtrack",
]

DEFAULT_EPS_DIV = 1e-6


def _as_map(name, x):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 4 or arr.shape[1] != 1 or arr.shape[2] != arr.shape[3]:
        raise ShapeError(f"{name}: expected an [N,1,H,H] map, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: non-finite values")
    return arr


@dataclass
class SpatialAttentionParams:
    """Weights of the 2-channel-to-1 spatial attention convolution."""

    weight: Tensor  # [1, 2, k, k]
    bias: Tensor  # [1]

    def __post_init__(self):
        if self.weight.shape[0] != 1 or self.weight.shape[1] != 2:
            raise ShapeError(f"attention weight must be [1,2,k,k], got {self.weight.shape}")
        if self.weight.shape[2] % 2 == 0:
            raise ShapeError(f"attention kernel size must be odd, got {self.weight.shape[2]}")

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    @property
    def padding(self):
        # same-padding so the map keeps the input's spatial size
        return (self.kernel_size - 1) // 2

    @classmethod
    def init(cls, rng, kernel_size=7, dtype=np.float32):
        fan_in = 2 * kernel_size * kernel_size
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(1, 2, kernel_size, kernel_size)).astype(dtype)
        b = np.zeros(1, dtype=dtype)
        return cls(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


@dataclass
class AttentionState:
    """Per-step attention maps plus the (delta, M) history used for coupling.

    prev_M / prev_delta hold the previous step's batch-mean maps; while they
    are None there is no coupling history, gamma is all zero and M_assoc
    degenerates to clamp(M_hat).
    """

    M: np.ndarray | None = None
    M_hat: np.ndarray | None = None
    M_assoc: np.ndarray | None = None
    G_hat: np.ndarray | None = None
    gamma: np.ndarray | None = None
    grad_delta: np.ndarray | None = None
    prev_M: np.ndarray | None = field(default=None)
    prev_delta: np.ndarray | None = field(default=None)


def spatial_attention(features, params):
    """Attention map in (0,1): sigmoid(conv(channel_pool(features))).

    The features must be square HxH; same-padding keeps the map at HxH.
    Taped, so dG/dM is available after backward.
    """
    if features.ndim != 4:
        raise ShapeError(f"spatial_attention: features must be 4-D NCHW, got {features.shape}")
    if features.shape[2] != features.shape[3]:
        raise ShapeError(
            f"spatial_attention: features must be square, got {features.shape[2]}x{features.shape[3]}"
        )
    pooled = channel_pool(features)
    return sigmoid(conv2d(pooled, params.weight, params.bias, stride=1, padding=params.padding))


def descend_attention(M, dG_dM, xi1):
    """One explicit gradient step on the attention map (no clamping here)."""
    M = _as_map("descend_attention: M", M)
    g = _as_map("descend_attention: dG_dM", dG_dM)
    if g.shape != M.shape:
        raise ShapeError(f"descend_attention: shape mismatch {M.shape} vs {g.shape}")
    if xi1 < 0:
        raise ValueError(f"descend_attention: xi1 must be >= 0, got {xi1}")
    return M - xi1 * g


def _signed_clamp(x, eps):
    """Push magnitudes below eps out to +-eps, keeping sign (zero goes to +eps)."""
    return np.where(x >= 0, np.maximum(x, eps), np.minimum(x, -eps))


def coupling_gain(grad_delta, M, delta, prev_delta=None, prev_M=None, eps_div=DEFAULT_EPS_DIV):
    """Coupling between perturbation and attention: G_hat and per-row gamma.

    G_hat is the transposed perturbation gradient divided elementwise by M
    (denominator clamped away from zero). The Jacobian of delta w.r.t. M is
    approximated by the elementwise quotient of finite changes against the
    stored history; with no history the quotient is zero. gamma[m] is the
    column sum over rows n of G_hat * D, one scalar per row index m and
    sample, which is the row-wise trace of the coupled chain-rule term.
    """
    if eps_div <= 0:
        raise ValueError(f"coupling_gain: eps_div must be > 0, got {eps_div}")
    gd = _as_map("coupling_gain: grad_delta", grad_delta)
    M = _as_map("coupling_gain: M", M)
    delta = _as_map("coupling_gain: delta", delta)
    if gd.shape != M.shape or delta.shape != M.shape:
        raise ShapeError(
            f"coupling_gain: map shapes differ: {gd.shape}, {M.shape}, {delta.shape}"
        )
    if (prev_delta is None) != (prev_M is None):
        raise ValueError("coupling_gain: prev_delta and prev_M must be given together")

    G_hat = gd.swapaxes(-1, -2) / _signed_clamp(M, eps_div)
    if prev_M is None:
        D = np.zeros_like(M)
    else:
        prev_M = np.asarray(prev_M)
        prev_delta = np.asarray(prev_delta)
        D = (delta - prev_delta) / _signed_clamp(M - prev_M, eps_div)
    gamma = (G_hat * D).sum(axis=-2)[:, 0, :]  # sum over rows n -> [N, H]
    return G_hat, gamma


def rank_normalize(g):
    """Per-sample fractional rank of |g|: strictly-smaller count / (H*H).

    Ties share a rank; the output lies in [0, 1) and is invariant to
    rescaling g by any nonzero constant.
    """
    g = _as_map("rank_normalize", g)
    n = g.shape[0]
    hh = g.shape[2] * g.shape[3]
    a = np.abs(g).reshape(n, hh)
    out = np.empty_like(a)
    for i in range(n):
        ordered = np.sort(a[i])
        out[i] = np.searchsorted(ordered, a[i], side="left")
    return (out / hh).reshape(g.shape)


def backtrack(M_hat, M, gamma, grad_delta, xi2, zeta):
    """Backtracked attention: project high-gradient-rank elements, clamp to [0,1].

    Elements whose |dG/ddelta| rank exceeds zeta move by -xi2 * gamma[m] * M;
    everything else keeps M_hat. xi2 = 0 or zeta = 1 reduce this to a plain
    clamp of M_hat.
    """
    M_hat = _as_map("backtrack: M_hat", M_hat)
    M = _as_map("backtrack: M", M)
    gd = _as_map("backtrack: grad_delta", grad_delta)
    if M_hat.shape != M.shape or gd.shape != M.shape:
        raise ShapeError(f"backtrack: shape mismatch {M_hat.shape}, {M.shape}, {gd.shape}")
    gamma = np.asarray(gamma)
    if gamma.shape != (M.shape[0], M.shape[2]):
        raise ShapeError(
            f"backtrack: gamma shape {gamma.shape} does not match [N,H]=({M.shape[0]},{M.shape[2]})"
        )
    if not 0.0 <= zeta <= 1.0:
        raise ValueError(f"backtrack: zeta must lie in [0,1], got {zeta}")
    if xi2 < 0:
        raise ValueError(f"backtrack: xi2 must be >= 0, got {xi2}")
    projected = M_hat - xi2 * gamma[:, None, :, None] * M
    triggered = rank_normalize(gd) > zeta
    return np.clip(np.where(triggered, projected, M_hat), 0.0, 1.0)
