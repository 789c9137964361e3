"""Triplet sampling and the SGD loop.

Per triplet and in order: forward all three images, nudge that
triplet's direction weights (hinge-gated), compute the triplet-term
gradients on the embeddings and the regression-term gradients on the
reconstructions, then backpropagate both paths. After the batch the
accumulated gradients are averaged over triplets, the regularizer
gradient is added once, and plain SGD applies the update with a
staircase learning-rate schedule. Everything is keyed off one seeded
generator so identical (seed, config, manifest) runs are bit-identical.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import DatasetManifest, Sample, load_samples, write_fant, read_fant
from .losses import (
    AdaptiveWeightState,
    GaussianKernel,
    TripletFeatures,
    accumulate_regularizer_grads,
    local_regression_grad,
    local_regression_loss,
    parameter_regularizer,
    symmetric_triplet_grad,
    symmetric_triplet_loss,
    update_adaptive_weight,
)
from .network import Network, NetworkConfig

__all__ = [
    "NumericalError",
    "TrainConfig",
    "TripletBatch",
    "TrainState",
    "sample_triplets",
    "train_step",
    "batch_objective",
    "train",
    "save_checkpoint",
    "load_params",
    "METRICS_HEADER",
]

METRICS_HEADER = "iter,E,L1,L2,R,mean_u,mean_v,lr"


class NumericalError(RuntimeError):
    """A loss or gradient went non-finite; carries the offending term."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 0.01
    lr_decay: float = 0.1
    lr_decay_interval: int = 10000
    log_interval: int = 100
    checkpoint_interval: int = 0  # 0 = final checkpoint only


@dataclass
class TripletBatch:
    """Index triples into a sample list; anchor/positive share identity."""

    triplets: list[tuple[int, int, int]]

    def __len__(self) -> int:
        return len(self.triplets)


@dataclass
class TrainState:
    iteration: int = 0
    lr: float = 0.01
    weight_states: dict = field(default_factory=dict)
    rng: np.random.Generator | None = None
    metrics: list = field(default_factory=list)
    last: dict = field(default_factory=dict)


def learning_rate(tcfg: TrainConfig, iteration: int) -> float:
    return tcfg.lr * tcfg.lr_decay ** (iteration // tcfg.lr_decay_interval)


def _group_by_identity(samples: list[Sample]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.identity, []).append(i)
    return groups


def sample_triplets(
    samples: list[Sample], batch_size: int, rng: np.random.Generator
) -> TripletBatch:
    """Uniform identity, two distinct images of it (cross-camera when the
    identity spans cameras), and a uniform image of another identity."""
    groups = _group_by_identity(samples)
    usable = {}
    for ident, idxs in groups.items():
        if len(idxs) < 2:
            warnings.warn(f"identity {ident} has < 2 images; skipped for sampling")
            continue
        usable[ident] = idxs
    if len(usable) < 2:
        raise ValueError("need at least two identities with >= 2 images each")

    idents = sorted(usable)
    triplets = []
    for _ in range(batch_size):
        ident = idents[rng.integers(len(idents))]
        idxs = usable[ident]
        anchor = idxs[rng.integers(len(idxs))]
        cross = [i for i in idxs if i != anchor and samples[i].camera != samples[anchor].camera]
        pool = cross if cross else [i for i in idxs if i != anchor]
        positive = pool[rng.integers(len(pool))]
        other = [i for i in idents if i != ident]
        neg_ident = other[rng.integers(len(other))]
        neg_idxs = usable[neg_ident]
        negative = neg_idxs[rng.integers(len(neg_idxs))]
        triplets.append((anchor, positive, negative))
    return TripletBatch(triplets)


def _weight_state(state: TrainState, cfg: NetworkConfig, key) -> AdaptiveWeightState:
    ws = state.weight_states.get(key)
    if ws is None:
        ws = AdaptiveWeightState.from_uv(cfg.init_u, cfg.init_v, cfg.gamma, cfg.sign_mode)
        state.weight_states[key] = ws
    return ws


def _triplet_terms(net: Network, samples, triplet, ws, cfg, kernel, update_weights):
    """Forward one triplet and return its losses plus everything backward needs."""
    with_decoder = cfg.zeta != 0.0
    traces = [net.forward(samples[i].image, with_decoder=with_decoder) for i in triplet]
    feats = TripletFeatures(*(t.ranking_embedding for t in traces))
    if update_weights:
        update_adaptive_weight(ws, feats, cfg.margin)
    l1 = symmetric_triplet_loss(feats, ws.u, ws.v, cfg.margin)
    emb_grads = symmetric_triplet_grad(feats, ws.u, ws.v, cfg.margin)
    l2 = 0.0
    recon_grads = [None, None, None]
    if with_decoder:
        for k, (trace, idx) in enumerate(zip(traces, triplet)):
            target = np.repeat(samples[idx].mask, trace.reconstruction.shape[0], axis=0)
            l2 += local_regression_loss(trace.reconstruction, target, kernel)
            recon_grads[k] = cfg.zeta * local_regression_grad(trace.reconstruction, target, kernel)
    return traces, emb_grads, recon_grads, l1, l2


def train_step(
    net: Network,
    samples: list[Sample],
    batch: TripletBatch,
    state: TrainState,
    tcfg: TrainConfig,
) -> dict:
    """One mini-batch update; returns the scalar loss terms it used."""
    cfg = net.cfg
    kernel = GaussianKernel(cfg.sigma, cfg.rho, cfg.kernel_normalized)
    net.zero_grads()
    n = len(batch)
    l1_sum = 0.0
    l2_sum = 0.0
    for triplet in batch.triplets:
        ws = _weight_state(state, cfg, triplet)
        traces, emb_grads, recon_grads, l1, l2 = _triplet_terms(
            net, samples, triplet, ws, cfg, kernel, update_weights=True
        )
        l1_sum += l1
        l2_sum += l2
        for trace, g_emb, g_rec in zip(traces, emb_grads, recon_grads):
            net.backward(trace, g_emb, g_rec)

    inv = 1.0 / n
    for p in net.param_sets():
        p.weight_grads *= inv
        p.bias_grads *= inv
    accumulate_regularizer_grads(net.param_sets(), cfg.eta)
    r, _ = parameter_regularizer(net.param_sets())

    l1_mean = l1_sum * inv
    l2_mean = l2_sum * inv
    e = l1_mean + cfg.zeta * l2_mean + cfg.eta * r
    for name, value in (("L1", l1_mean), ("L2", l2_mean), ("R", r), ("E", e)):
        if not np.isfinite(value):
            raise NumericalError(f"{name} is not finite at iteration {state.iteration}")
    for pname, p in net.named_params():
        if not (np.isfinite(p.weight_grads).all() and np.isfinite(p.bias_grads).all()):
            raise NumericalError(f"gradient of {pname} is not finite at iteration {state.iteration}")

    state.lr = learning_rate(tcfg, state.iteration)
    net.sgd_step(state.lr)
    state.iteration += 1
    state.last = {"E": e, "L1": l1_mean, "L2": l2_mean, "R": r}
    return dict(state.last)


def batch_objective(
    net: Network, samples: list[Sample], batch: TripletBatch, state: TrainState
) -> dict:
    """Evaluate the batch losses with the current weight states, no updates."""
    cfg = net.cfg
    kernel = GaussianKernel(cfg.sigma, cfg.rho, cfg.kernel_normalized)
    n = len(batch)
    l1_sum = 0.0
    l2_sum = 0.0
    for triplet in batch.triplets:
        ws = _weight_state(state, cfg, triplet)
        _, _, _, l1, l2 = _triplet_terms(
            net, samples, triplet, ws, cfg, kernel, update_weights=False
        )
        l1_sum += l1
        l2_sum += l2
    r, _ = parameter_regularizer(net.param_sets())
    e = l1_sum / n + cfg.zeta * l2_sum / n + cfg.eta * r
    return {"E": e, "L1": l1_sum / n, "L2": l2_sum / n, "R": r}


def _mean_uv(state: TrainState, cfg: NetworkConfig) -> tuple[float, float]:
    if not state.weight_states:
        return cfg.init_u, cfg.init_v
    us = [ws.u for ws in state.weight_states.values()]
    vs = [ws.v for ws in state.weight_states.values()]
    return float(np.mean(us)), float(np.mean(vs))


def _log_row(state: TrainState, cfg: NetworkConfig, tcfg: TrainConfig, losses: dict) -> None:
    mu, mv = _mean_uv(state, cfg)
    state.metrics.append(
        (
            state.iteration,
            losses["E"],
            losses["L1"],
            losses["L2"],
            losses["R"],
            mu,
            mv,
            learning_rate(tcfg, state.iteration),
        )
    )


def write_metrics_csv(state: TrainState, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in state.metrics:
            fh.write(",".join(repr(float(x)) if isinstance(x, float) else str(x) for x in row) + "\n")


def train(
    net: Network,
    manifest: DatasetManifest,
    tcfg: TrainConfig,
    iterations: int,
    state: TrainState | None = None,
    samples: list[Sample] | None = None,
    out_dir=None,
) -> TrainState:
    """Run ``iterations`` mini-batch steps, logging and checkpointing."""
    cfg = net.cfg
    if samples is None:
        samples = load_samples(manifest, target_hw=cfg.input_shape[1:])
    if state is None:
        state = TrainState(lr=tcfg.lr, rng=np.random.default_rng(cfg.seed))

    # pre-training row: evaluate one batch without touching parameters
    probe = sample_triplets(samples, tcfg.batch_size, state.rng)
    _log_row(state, cfg, tcfg, batch_objective(net, samples, probe, state))

    for h in range(iterations):
        batch = sample_triplets(samples, tcfg.batch_size, state.rng)
        losses = train_step(net, samples, batch, state, tcfg)
        done = h + 1
        if done % tcfg.log_interval == 0 or done == iterations:
            _log_row(state, cfg, tcfg, losses)
        if tcfg.checkpoint_interval and done % tcfg.checkpoint_interval == 0 and out_dir:
            save_checkpoint(net, state, Path(out_dir) / f"ckpt_{done:07d}")

    if out_dir:
        save_checkpoint(net, state, Path(out_dir))
        write_metrics_csv(state, Path(out_dir) / "metrics.csv")
    return state


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(net: Network, state: TrainState, out_dir) -> None:
    """Parameters as FANT tensors plus a layers.txt index and state.txt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, p in net.named_params():
        wfile = f"{name}.weights.fant"
        bfile = f"{name}.biases.fant"
        write_fant(out_dir / wfile, p.weights)
        write_fant(out_dir / bfile, p.biases)
        lines.append(f"{name}\t{wfile}\t{bfile}\n")
    (out_dir / "layers.txt").write_text("".join(lines), encoding="utf-8", newline="\n")

    rng_state = json.dumps(state.rng.bit_generator.state, sort_keys=True) if state.rng else ""
    snapshot = json.dumps({k: float(v) for k, v in state.last.items()}, sort_keys=True)
    (out_dir / "state.txt").write_text(
        f"iteration={state.iteration}\n"
        f"lr={state.lr!r}\n"
        f"rng={rng_state}\n"
        f"metrics={snapshot}\n",
        encoding="utf-8",
        newline="\n",
    )


def load_params(net: Network, ckpt_dir) -> Network:
    """Load checkpointed tensors into an already-built network."""
    ckpt_dir = Path(ckpt_dir)
    index = {}
    for ln in (ckpt_dir / "layers.txt").read_text(encoding="utf-8").splitlines():
        if not ln.strip():
            continue
        name, wfile, bfile = ln.split("\t")
        index[name] = (wfile, bfile)
    for name, p in net.named_params():
        if name not in index:
            raise ValueError(f"checkpoint is missing layer {name!r}")
        wfile, bfile = index[name]
        weights = read_fant(ckpt_dir / wfile)
        biases = read_fant(ckpt_dir / bfile)
        if weights.shape != p.weights.shape or biases.shape != p.biases.shape:
            raise ValueError(
                f"checkpoint shapes for {name!r} ({weights.shape}, {biases.shape}) "
                f"do not match the network ({p.weights.shape}, {p.biases.shape})"
            )
        p.weights[...] = weights
        p.biases[...] = biases
    return net
