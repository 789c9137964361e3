"""Finite-difference verification of every analytic gradient.

Each check compares an analytic gradient block against central finite
differences of an independent scalar evaluation, reporting
``max |analytic - numeric|`` relative to the larger of the two block
max-norms. The suite covers every layer kind (input, weight and bias
gradients), the three loss terms, and the whole network composed into
the multi-task objective.

Checks run with a wider weight initialization than training uses so the
probe steps stay clear of ReLU kinks; that only changes where the
gradient is evaluated, not what is being verified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    ParamSet,
    conv_spec,
    deconv_spec,
    fc_spec,
    make_layer,
    maxpool_spec,
)
from .losses import (
    GaussianKernel,
    TripletFeatures,
    local_regression_grad,
    local_regression_loss,
    parameter_regularizer,
    symmetric_triplet_grad,
    symmetric_triplet_loss,
)
from .network import Network, NetworkConfig, build_network

__all__ = [
    "CheckResult",
    "finite_difference",
    "refine_fd_entry",
    "relative_error",
    "verified_error",
    "check_layer_kind",
    "check_loss_terms",
    "check_whole_network",
    "run_suite",
    "LAYER_STEP",
    "NET_STEP",
    "LAYER_TOL",
    "NET_TOL",
]

LAYER_STEP = 1e-5
NET_STEP = 1e-4
LAYER_TOL = 1e-4
NET_TOL = 1e-3
GRADCHECK_INIT_STD = 0.1


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def _fd_entry(f, flat: np.ndarray, i: int, step: float) -> float:
    orig = flat[i]
    flat[i] = orig + step
    hi = f()
    flat[i] = orig - step
    lo = f()
    flat[i] = orig
    return (hi - lo) / (2.0 * step)


def finite_difference(f, x: np.ndarray, step: float, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. entries of ``x``.

    ``x`` is perturbed in place and restored. ``indices`` restricts the
    sweep to a flat-index subset; unprobed entries come back as nan so
    callers can mask them out.
    """
    flat = x.reshape(-1)
    if indices is None:
        indices = range(flat.size)
        grad = np.empty(flat.size)
    else:
        grad = np.full(flat.size, np.nan)
    for i in indices:
        grad[i] = _fd_entry(f, flat, i, step)
    return grad.reshape(x.shape)


def refine_fd_entry(f, flat: np.ndarray, i: int, step: float, rounds: int = 6) -> float:
    """Shrink the probe step until two successive FD estimates agree.

    A probe that straddles a ReLU kink or a pool near-tie reports a
    spurious derivative at one step size but converges to the true
    one-sided value as the step drops below the distance to the kink.
    Refining only changes the oracle's own accuracy: a genuinely wrong
    analytic gradient still disagrees with the converged estimate.
    """
    prev = _fd_entry(f, flat, i, step)
    for _ in range(rounds):
        step /= 4.0
        cur = _fd_entry(f, flat, i, step)
        if abs(cur - prev) <= max(1e-9, 1e-5 * abs(cur)):
            return cur
        prev = cur
    return prev


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Block-wise max-norm relative error, nan entries in numeric skipped."""
    mask = np.isfinite(numeric)
    if not mask.any():
        return 0.0
    diff = float(np.max(np.abs(analytic[mask] - numeric[mask])))
    scale = max(
        float(np.max(np.abs(numeric[mask]))),
        float(np.max(np.abs(analytic[mask]))),
        1e-12,
    )
    return diff / scale


def verified_error(
    analytic: np.ndarray,
    f,
    x: np.ndarray,
    step: float,
    tol: float,
    indices=None,
) -> float:
    """Relative error against an FD oracle that re-probes suspect entries.

    Entries disagreeing with the analytic value at the nominal step are
    recomputed with :func:`refine_fd_entry` before the final comparison.
    """
    numeric = finite_difference(f, x, step, indices)
    mask = np.isfinite(numeric)
    if not mask.any():
        return 0.0
    scale = max(
        float(np.max(np.abs(numeric[mask]))),
        float(np.max(np.abs(analytic[mask]))),
        1e-12,
    )
    flat_a = analytic.reshape(-1)
    flat_n = numeric.reshape(-1)
    flat_x = x.reshape(-1)
    probed = np.nonzero(np.isfinite(flat_n))[0]
    for i in probed:
        if abs(flat_a[i] - flat_n[i]) > 0.25 * tol * scale:
            flat_n[i] = refine_fd_entry(f, flat_x, i, step)
    return relative_error(analytic, flat_n.reshape(numeric.shape))


# -- per-layer checks ----------------------------------------------------------


def _layer_specs_under_test():
    return {
        "conv": conv_spec(2, 3, (3, 3), (2, 2), (1, 1)),
        "deconv": deconv_spec(3, 2, (3, 3), (2, 2), (1, 1)),
        "maxpool": maxpool_spec((2, 2), (1, 1)),
        "fully_connected": fc_spec(12, 5),
    }


def _random_input(kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == "fully_connected":
        return rng.uniform(-1.0, 1.0, 12)
    if kind in ("relu", "l2_normalize"):
        # keep entries away from the relu kink / zero norm
        x = rng.uniform(0.2, 1.0, (2, 4, 3)) * rng.choice([-1.0, 1.0], (2, 4, 3))
        return x if kind == "relu" else x.ravel()
    if kind == "maxpool":
        return rng.normal(0.0, 1.0, (2, 5, 4))
    return rng.normal(0.0, 1.0, (2, 7, 5)) if kind == "conv" else rng.normal(0.0, 1.0, (3, 4, 3))


def check_layer_kind(kind: str, rng: np.random.Generator) -> list[CheckResult]:
    """FD-verify input (and parameter) gradients of one layer kind."""
    specs = _layer_specs_under_test()
    if kind in specs:
        layer = make_layer(specs[kind], rng, init_std=GRADCHECK_INIT_STD)
    else:
        layer = make_layer(_free_spec(kind))
    x = _random_input(kind, rng)
    out, ctx = layer.forward(x)
    g_up = rng.normal(0.0, 1.0, out.shape)

    def scalar():
        y, _ = layer.forward(x)
        return float(np.vdot(g_up, y))

    results = []
    if layer.params is not None:
        layer.params.zero_grads()
    dx = layer.backward(ctx, g_up)
    results.append(
        CheckResult(f"{kind}/input", verified_error(dx, scalar, x, LAYER_STEP, LAYER_TOL))
    )
    if layer.params is not None:
        results.append(
            CheckResult(
                f"{kind}/weights",
                verified_error(
                    layer.params.weight_grads, scalar, layer.params.weights, LAYER_STEP, LAYER_TOL
                ),
            )
        )
        results.append(
            CheckResult(
                f"{kind}/biases",
                verified_error(
                    layer.params.bias_grads, scalar, layer.params.biases, LAYER_STEP, LAYER_TOL
                ),
            )
        )
    return results


def _free_spec(kind: str):
    from .layers import l2_normalize_spec, relu_spec

    return relu_spec() if kind == "relu" else l2_normalize_spec()


def check_all_layers(rng: np.random.Generator) -> list[CheckResult]:
    results = []
    for kind in ("conv", "deconv", "relu", "maxpool", "fully_connected", "l2_normalize"):
        results.extend(check_layer_kind(kind, rng))
    return results


# -- loss-term checks ----------------------------------------------------------


def _active_triplet(rng: np.random.Generator, dim: int = 8) -> TripletFeatures:
    """Random unit triplet with a safely active hinge."""
    while True:
        f = [rng.normal(0.0, 1.0, dim) for _ in range(3)]
        f = [v / np.linalg.norm(v) for v in f]
        t = TripletFeatures(*f)
        d12, d13, d23 = t.distances()
        if 0.1 + d12 - (0.6 * d13 + 0.4 * d23) > 0.05:
            return t


def check_loss_terms(rng: np.random.Generator) -> list[CheckResult]:
    results = []

    # triplet term: gradients w.r.t. each feature vector
    t = _active_triplet(rng)
    u, v, margin = 0.6, 0.4, 0.1
    grads = symmetric_triplet_grad(t, u, v, margin)
    vecs = [t.f1.copy(), t.f2.copy(), t.f3.copy()]

    def triplet_scalar():
        return symmetric_triplet_loss(TripletFeatures(*vecs), u, v, margin)

    worst = 0.0
    for k in range(3):
        worst = max(worst, verified_error(grads[k], triplet_scalar, vecs[k], LAYER_STEP, LAYER_TOL))
    results.append(CheckResult("loss/triplet", worst))

    # regression term
    kernel = GaussianKernel(1.0, 2.0, normalized=True)
    recon = rng.uniform(0.0, 1.0, (2, 6, 5))
    mask = (rng.uniform(0.0, 1.0, (2, 6, 5)) > 0.5).astype(float)
    analytic = local_regression_grad(recon, mask, kernel)

    def regression_scalar():
        return local_regression_loss(recon, mask, kernel)

    results.append(
        CheckResult(
            "loss/regression",
            verified_error(analytic, regression_scalar, recon, LAYER_STEP, LAYER_TOL),
        )
    )

    # regularizer
    p = ParamSet(rng.normal(0.0, 1.0, (3, 4)), rng.normal(0.0, 1.0, 3))
    (value, grads_r) = parameter_regularizer([p])

    def reg_scalar():
        v, _ = parameter_regularizer([p])
        return v

    worst = verified_error(grads_r[0][0], reg_scalar, p.weights, LAYER_STEP, LAYER_TOL)
    worst = max(worst, verified_error(grads_r[0][1], reg_scalar, p.biases, LAYER_STEP, LAYER_TOL))
    results.append(CheckResult("loss/regularizer", worst))
    return results


# -- whole-network check ---------------------------------------------------------


def _triplet_objective(net: Network, images, masks, u: float, v: float):
    """E = L1 + zeta * L2 + eta * R for one triplet at fixed direction weights."""
    cfg = net.cfg
    kernel = GaussianKernel(cfg.sigma, cfg.rho, cfg.kernel_normalized)

    def value() -> float:
        traces = [net.forward(img) for img in images]
        feats = TripletFeatures(*(t.ranking_embedding for t in traces))
        l1 = symmetric_triplet_loss(feats, u, v, cfg.margin)
        l2 = 0.0
        for trace, m in zip(traces, masks):
            target = np.repeat(m, trace.reconstruction.shape[0], axis=0)
            l2 += local_regression_loss(trace.reconstruction, target, kernel)
        r, _ = parameter_regularizer(net.param_sets())
        return l1 + cfg.zeta * l2 + cfg.eta * r

    def analytic_grads() -> None:
        net.zero_grads()
        traces = [net.forward(img) for img in images]
        feats = TripletFeatures(*(t.ranking_embedding for t in traces))
        emb_grads = symmetric_triplet_grad(feats, u, v, cfg.margin)
        for trace, g_emb, m in zip(traces, emb_grads, masks):
            target = np.repeat(m, trace.reconstruction.shape[0], axis=0)
            g_rec = cfg.zeta * local_regression_grad(trace.reconstruction, target, kernel)
            net.backward(trace, g_emb, g_rec)
        for p in net.param_sets():
            p.weight_grads += 2.0 * cfg.eta * p.weights
            p.bias_grads += 2.0 * cfg.eta * p.biases

    return value, analytic_grads


def check_whole_network(
    cfg: NetworkConfig,
    rng: np.random.Generator,
    samples_per_paramset: int | None = 12,
) -> list[CheckResult]:
    """FD-verify the composed objective through every ParamSet.

    ``samples_per_paramset=None`` sweeps every parameter (use the micro
    config for that); an integer probes that many random entries per
    tensor, which keeps the desk-scale check inside the time budget.
    """
    net = build_network(cfg, rng=rng, init_std=GRADCHECK_INIT_STD)
    c, h, w = cfg.input_shape
    images = [rng.uniform(0.0, 1.0, (c, h, w)) for _ in range(3)]
    masks = [(rng.uniform(0.0, 1.0, (1, h, w)) > 0.5).astype(float) for _ in range(3)]
    value, analytic = _triplet_objective(net, images, masks, cfg.init_u, cfg.init_v)

    analytic()
    saved = [
        (p.weight_grads.copy(), p.bias_grads.copy()) for p in net.param_sets()
    ]

    results = []
    for (name, p), (wg, bg) in zip(net.named_params(), saved):
        for label, tensor_, grad in (("weights", p.weights, wg), ("biases", p.biases, bg)):
            if samples_per_paramset is None or tensor_.size <= samples_per_paramset:
                idx = None
            else:
                idx = rng.choice(tensor_.size, size=samples_per_paramset, replace=False)
            err = verified_error(grad, value, tensor_, NET_STEP, NET_TOL, indices=idx)
            results.append(CheckResult(f"net/{name}/{label}", err))
    return results


# -- suite ----------------------------------------------------------------------


def run_suite(cfg: NetworkConfig, seed: int) -> list[CheckResult]:
    """Layer, loss and whole-network checks for one seed."""
    rng = np.random.default_rng(seed)
    results = check_all_layers(rng)
    results.extend(check_loss_terms(rng))
    results.extend(check_whole_network(cfg, rng))
    return results
