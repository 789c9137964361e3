"""Loss terms, their analytic gradients, and the adaptive direction weights.

Three terms drive training: a symmetric triplet hinge on unit-sphere
embeddings whose two negative distances carry per-triplet weights
``u = alpha + beta`` and ``v = alpha - beta``, a locally smoothed mask
regression term (truncated Gaussian kernel), and a squared-norm
parameter regularizer. ``beta`` is nudged each visit so the two
negative distances equalize, keeping gradient flow to the positive pair
symmetric; a small plane simulator exposes that behaviour directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "UNIT_TOL",
    "pairwise_distance",
    "TripletFeatures",
    "symmetric_triplet_loss",
    "symmetric_triplet_grad",
    "AdaptiveWeightState",
    "update_adaptive_weight",
    "GaussianKernel",
    "correlate_same",
    "local_regression_loss",
    "local_regression_grad",
    "parameter_regularizer",
    "accumulate_regularizer_grads",
    "simulate_triplet_dynamics",
    "write_trajectory_csv",
    "TRAJECTORY_HEADER",
    "DYNAMICS_DEFAULTS",
]

UNIT_TOL = 1e-6


def _sqdist(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return float(d @ d)


def pairwise_distance(fa: np.ndarray, fb: np.ndarray) -> float:
    """Squared Euclidean distance between two unit vectors, in [0, 4]."""
    for name, f in (("fa", fa), ("fb", fb)):
        norm = float(np.linalg.norm(f))
        if abs(norm - 1.0) > UNIT_TOL:
            raise ValueError(f"{name} is not unit-norm (|norm - 1| = {abs(norm - 1.0):.3e})")
    return _sqdist(fa, fb)


@dataclass(frozen=True)
class TripletFeatures:
    """Embeddings of one (anchor, positive, negative) triple."""

    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray

    def distances(self) -> tuple[float, float, float]:
        return (
            _sqdist(self.f1, self.f2),
            _sqdist(self.f1, self.f3),
            _sqdist(self.f2, self.f3),
        )


def _hinge(t: TripletFeatures, u: float, v: float, margin: float) -> float:
    d12, d13, d23 = t.distances()
    return margin + d12 - (u * d13 + v * d23)


def _check_loss_args(u: float, v: float, margin: float) -> None:
    if u < 0.0 or v < 0.0:
        raise ValueError(f"direction weights must be >= 0, got u={u}, v={v}")
    if margin <= 0.0:
        raise ValueError(f"margin must be > 0, got {margin}")


def symmetric_triplet_loss(t: TripletFeatures, u: float, v: float, margin: float) -> float:
    """Hinge on (intra-class distance) - (weighted inter-class distances)."""
    _check_loss_args(u, v, margin)
    return max(_hinge(t, u, v, margin), 0.0)


def symmetric_triplet_grad(
    t: TripletFeatures, u: float, v: float, margin: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the hinge w.r.t. the three feature vectors.

    Inactive hinge (value <= 0) yields three zero vectors. Active:
        g1 =  2(f1 - f2) - 2u(f1 - f3)
        g2 = -2(f1 - f2) - 2v(f2 - f3)
        g3 =  2u(f1 - f3) + 2v(f2 - f3)
    """
    _check_loss_args(u, v, margin)
    if _hinge(t, u, v, margin) <= 0.0:
        z = np.zeros_like(t.f1)
        return z, z.copy(), z.copy()
    d12 = t.f1 - t.f2
    d13 = t.f1 - t.f3
    d23 = t.f2 - t.f3
    g1 = 2.0 * d12 - 2.0 * u * d13
    g2 = -2.0 * d12 - 2.0 * v * d23
    g3 = 2.0 * u * d13 + 2.0 * v * d23
    return g1, g2, g3


@dataclass
class AdaptiveWeightState:
    """Per-triplet direction-control weights.

    Only ``beta`` moves; ``u + v == 2 * alpha`` is preserved exactly by
    construction (``v`` is computed as ``2*alpha - u``), and ``beta`` is
    clamped to [-alpha, alpha] so both weights stay non-negative.

    ``sign_mode`` selects the update direction. ``"textual"`` (default)
    moves ``u`` down when the anchor-negative distance exceeds the
    positive-negative one, which is the equalizing behaviour the method
    argues for; ``"literal"`` applies the raw descent step on the hinge,
    which moves the weights the opposite way.
    """

    alpha: float
    beta: float
    gamma: float
    sign_mode: str = "textual"

    def __post_init__(self):
        if self.sign_mode not in ("textual", "literal"):
            raise ValueError(f"unknown sign_mode {self.sign_mode!r}")
        self._clamp()

    @classmethod
    def from_uv(cls, u: float, v: float, gamma: float, sign_mode: str = "textual"):
        return cls(alpha=(u + v) / 2.0, beta=(u - v) / 2.0, gamma=gamma, sign_mode=sign_mode)

    def _clamp(self) -> None:
        self.beta = min(max(self.beta, -self.alpha), self.alpha)

    @property
    def u(self) -> float:
        return self.alpha + self.beta

    @property
    def v(self) -> float:
        return 2.0 * self.alpha - self.u


def update_adaptive_weight(
    state: AdaptiveWeightState, t: TripletFeatures, margin: float
) -> AdaptiveWeightState:
    """One weight step for a visited triplet; no-op when the hinge is inactive.

    The raw signal is r = d(f2, f3) - d(f1, f3), evaluated with the
    current weights.
    """
    if _hinge(t, state.u, state.v, margin) <= 0.0:
        return state
    _, d13, d23 = t.distances()
    r = d23 - d13
    if state.sign_mode == "textual":
        state.beta += state.gamma * r
    else:
        state.beta -= state.gamma * r
    state._clamp()
    return state


class GaussianKernel:
    """Truncated 2-D Gaussian used to smooth the mask regression.

    Entry (dy, dx) is ``exp(-(dy^2 + dx^2) / (2 sigma^2)) / (sqrt(2 pi)
    sigma)`` when the Euclidean offset is within ``rho`` pixels, zero
    outside. The support is a (2*floor(rho)+1) square. ``normalized``
    (default) rescales the entries to sum to one so the loss weight
    stays decoupled from sigma; the raw kernel is kept available since
    with very small sigma it is a near-delta scaled by the large center
    value.
    """

    def __init__(self, sigma: float, rho: float, normalized: bool = True):
        if sigma <= 0.0:
            raise ValueError(f"sigma must be > 0, got {sigma}")
        if rho <= 0.0:
            raise ValueError(f"rho must be > 0, got {rho}")
        self.sigma = float(sigma)
        self.rho = float(rho)
        self.normalized = bool(normalized)
        r = math.floor(rho)
        offs = np.arange(-r, r + 1, dtype=np.float64)
        dy = offs[:, None]
        dx = offs[None, :]
        radius = np.sqrt(dy**2 + dx**2)
        vals = np.exp(-(dy**2 + dx**2) / (2.0 * sigma**2)) / (math.sqrt(2.0 * math.pi) * sigma)
        vals[radius > rho] = 0.0
        if self.normalized:
            vals /= vals.sum()
        vals.flags.writeable = False
        self.values = vals

    @property
    def radius(self) -> int:
        return self.values.shape[0] // 2


def correlate_same(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded, shape-preserving 2-D cross-correlation."""
    kh, kw = kernel.shape
    rh, rw = kh // 2, kw // 2
    h, w = plane.shape
    padded = np.pad(plane, ((rh, rh), (rw, rw)))
    out = np.zeros_like(plane)
    for i in range(kh):
        for j in range(kw):
            k = kernel[i, j]
            if k != 0.0:
                out += k * padded[i : i + h, j : j + w]
    return out


def local_regression_loss(recon: np.ndarray, mask: np.ndarray, kernel: GaussianKernel) -> float:
    """Squared Frobenius norm of the kernel-smoothed reconstruction error."""
    if recon.shape != mask.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {mask.shape}")
    total = 0.0
    for c in range(recon.shape[0]):
        smoothed = correlate_same(recon[c] - mask[c], kernel.values)
        total += float(np.sum(smoothed**2))
    return total


def local_regression_grad(recon: np.ndarray, mask: np.ndarray, kernel: GaussianKernel) -> np.ndarray:
    """Gradient w.r.t. the reconstruction: 2 K*(K*(recon - mask)) per channel.

    Valid because the truncated Gaussian is symmetric under 180-degree
    rotation, hence self-adjoint as a correlation.
    """
    if recon.shape != mask.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {mask.shape}")
    grad = np.empty_like(recon)
    for c in range(recon.shape[0]):
        smoothed = correlate_same(recon[c] - mask[c], kernel.values)
        grad[c] = 2.0 * correlate_same(smoothed, kernel.values)
    return grad


def parameter_regularizer(param_sets) -> tuple[float, list]:
    """Sum of squared weight/bias norms plus its per-parameter gradient (2W, 2b)."""
    value = 0.0
    grads = []
    for p in param_sets:
        value += float(np.sum(p.weights**2)) + float(np.sum(p.biases**2))
        grads.append((2.0 * p.weights, 2.0 * p.biases))
    return value, grads


def accumulate_regularizer_grads(param_sets, eta: float) -> None:
    """Add eta * (2W, 2b) into each ParamSet's gradient buffers in place."""
    for p in param_sets:
        p.weight_grads += (2.0 * eta) * p.weights
        p.bias_grads += (2.0 * eta) * p.biases


TRAJECTORY_HEADER = "step,x1x,x1y,x2x,x2y,x3x,x3y,d12,d13,d23,u,v"

# Defaults calibrated so the hinge starts active, stays active for ~50
# steps, and in symmetric mode |d13 - d23| closes monotonically before
# the hinge shuts. The weight rate is larger than the trainer's because
# plane distances here are not confined to the unit sphere's [0, 4].
DYNAMICS_DEFAULTS = {
    "init": ((0.0, 1.0), (0.0, -1.0), (1.0, 0.5)),
    "steps": 300,
    "step_size": 0.002,
    "gamma": 0.3,
    "margin": 0.1,
    "init_u": 0.6,
    "init_v": 0.4,
}


def simulate_triplet_dynamics(
    init,
    loss_kind: str,
    steps: int,
    step_size: float,
    gamma: float | None = None,
    margin: float | None = None,
    init_u: float | None = None,
    init_v: float | None = None,
    sign_mode: str = "textual",
) -> list[tuple]:
    """Gradient-descent trajectory of three plane points under the triplet hinge.

    ``asymmetric`` fixes u=1, v=0 with no weight updates; ``symmetric``
    runs the adaptive-weight update before each position step. Distances
    are raw squared Euclidean (the points are unconstrained, not unit
    vectors). Returns one row per step plus the initial row, matching
    :data:`TRAJECTORY_HEADER`.
    """
    if loss_kind not in ("symmetric", "asymmetric"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    gamma = DYNAMICS_DEFAULTS["gamma"] if gamma is None else gamma
    margin = DYNAMICS_DEFAULTS["margin"] if margin is None else margin
    init_u = DYNAMICS_DEFAULTS["init_u"] if init_u is None else init_u
    init_v = DYNAMICS_DEFAULTS["init_v"] if init_v is None else init_v

    pts = [np.array(p, dtype=np.float64) for p in init]
    if len(pts) != 3 or any(p.shape != (2,) for p in pts):
        raise ValueError("init must be three 2-D points")
    if loss_kind == "asymmetric":
        u, v = 1.0, 0.0
        state = None
    else:
        state = AdaptiveWeightState.from_uv(init_u, init_v, gamma, sign_mode)
        u, v = state.u, state.v

    def row(step):
        feats = TripletFeatures(*pts)
        d12, d13, d23 = feats.distances()
        return (
            step,
            float(pts[0][0]), float(pts[0][1]),
            float(pts[1][0]), float(pts[1][1]),
            float(pts[2][0]), float(pts[2][1]),
            d12, d13, d23, float(u), float(v),
        )

    rows = [row(0)]
    for h in range(1, steps + 1):
        feats = TripletFeatures(*pts)
        if state is not None:
            update_adaptive_weight(state, feats, margin)
            u, v = state.u, state.v
        g1, g2, g3 = symmetric_triplet_grad(feats, u, v, margin)
        pts[0] = pts[0] - step_size * g1
        pts[1] = pts[1] - step_size * g2
        pts[2] = pts[2] - step_size * g3
        rows.append(row(h))
    return rows


def write_trajectory_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRAJECTORY_HEADER + "\n")
        for r in rows:
            fh.write(",".join(repr(x) if isinstance(x, float) else str(x) for x in r) + "\n")
