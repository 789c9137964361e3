"""Assembly of the three-subnetwork architecture.

An encoder (two strided convolutions ending in a shape-preserving max
pool) feeds two consumers: a deconvolutional decoder that reconstructs
the foreground mask, tapped from the activation *before* the pool so
the transposed-convolution geometry inverts the encoder exactly, and a
body-part branch that slices the pooled maps into horizontal bands,
runs an unshared residual stack per band, and fuses per-band fully
connected heads into one unit-norm embedding.

Backward runs the embedding gradient through fusion/parts/encoder and
the reconstruction gradient through the decoder; the two paths sum at
the tap, which is what couples the two tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    Conv,
    FullyConnected,
    L2Normalize,
    LayerSpec,
    MaxPool,
    ParamSet,
    conv_spec,
    deconv_spec,
    fc_spec,
    make_layer,
    maxpool_spec,
    relu_spec,
)
from .tensor import concat_height, slice_height

__all__ = [
    "NetworkConfig",
    "ShapeReport",
    "ForwardTrace",
    "Network",
    "build_network",
    "propagate_shapes",
    "paper_config",
    "desk_config",
    "micro_config",
]


@dataclass(frozen=True)
class NetworkConfig:
    """Full architecture and loss hyperparameter record."""

    input_shape: tuple[int, int, int]
    encoder: tuple[LayerSpec, ...]
    decoder: tuple[LayerSpec, ...]
    parts: int
    residual_blocks_per_part: int
    part_channels: int
    fc_small_dim: int
    fc_large_dim: int
    margin: float = 0.1
    zeta: float = 0.02
    eta: float = 0.05
    sigma: float = 0.01
    rho: float = 3.0
    kernel_normalized: bool = True
    init_u: float = 0.6
    init_v: float = 0.4
    gamma: float = 0.01
    sign_mode: str = "textual"
    seed: int = 1
    # None draws each layer's std from U[0.001, 0.01]; small-scale configs
    # pin a larger value because their tiny fan-ins otherwise produce
    # degenerate (~1e-8 norm) pre-normalization features.
    init_std: float | None = None

    @property
    def embedding_dim(self) -> int:
        return self.fc_large_dim + self.parts * self.fc_small_dim


@dataclass(frozen=True)
class ShapeReport:
    """Shapes produced by symbolic propagation through a config."""

    tap_shape: tuple[int, int, int]
    pooled_shape: tuple[int, int, int]
    slice_shapes: tuple[tuple[int, int, int], ...]
    part_out_shapes: tuple[tuple[int, int, int], ...]
    embedding_dim: int
    reconstruction_shape: tuple[int, int, int]


def _residual_block_specs(cin: int, channels: int) -> tuple[LayerSpec, LayerSpec]:
    first = conv_spec(cin, channels, (3, 3), (1, 1), (1, 1))
    second = conv_spec(channels, channels, (3, 3), (1, 1), (1, 1))
    return first, second


def propagate_shapes(cfg: NetworkConfig) -> ShapeReport:
    """Walk every junction symbolically; raises naming the junction that fails."""
    if len(cfg.input_shape) != 3 or cfg.input_shape[0] != 3:
        raise ValueError(f"input shape must be (3, H, W), got {cfg.input_shape}")
    if not cfg.encoder or cfg.encoder[-1].kind != "maxpool":
        raise ValueError("encoder must end with the maxpool layer (decoder taps before it)")
    if cfg.parts < 1 or cfg.residual_blocks_per_part < 1:
        raise ValueError("parts and residual_blocks_per_part must be >= 1")

    shape = tuple(cfg.input_shape)
    for i, spec in enumerate(cfg.encoder[:-1]):
        try:
            shape = spec.out_shape(shape)
        except ValueError as e:
            raise ValueError(f"encoder layer {i} ({spec.kind}): {e}") from None
    tap_shape = shape

    try:
        pooled = cfg.encoder[-1].out_shape(tap_shape)
    except ValueError as e:
        raise ValueError(f"encoder pool: {e}") from None

    shape = tap_shape
    for i, spec in enumerate(cfg.decoder):
        try:
            shape = spec.out_shape(shape)
        except ValueError as e:
            raise ValueError(f"decoder layer {i} ({spec.kind}): {e}") from None
    if shape != tuple(cfg.input_shape):
        raise ValueError(
            f"decoder output {shape} does not reproduce the input shape {tuple(cfg.input_shape)}"
        )

    c, h, w = pooled
    if cfg.parts > h:
        raise ValueError(f"cannot slice pooled height {h} into {cfg.parts} parts")
    base, extra = divmod(h, cfg.parts)
    slice_shapes = tuple(
        (c, base + (1 if i < extra else 0), w) for i in range(cfg.parts)
    )

    part_out_shapes = []
    for p, sl in enumerate(slice_shapes):
        s = sl
        cin = c
        for b in range(cfg.residual_blocks_per_part):
            first, second = _residual_block_specs(cin, cfg.part_channels)
            try:
                a = first.out_shape(s)
                bshape = second.out_shape(a)
                if a != bshape:
                    raise ValueError(f"residual sum shapes differ: {a} vs {bshape}")
                s = maxpool_spec((3, 3), (1, 1), (1, 1)).out_shape(a)
            except ValueError as e:
                raise ValueError(f"part {p} block {b}: {e}") from None
            cin = cfg.part_channels
        part_out_shapes.append(s)

    embedding_dim = cfg.fc_large_dim + cfg.parts * cfg.fc_small_dim
    return ShapeReport(
        tap_shape=tap_shape,
        pooled_shape=pooled,
        slice_shapes=slice_shapes,
        part_out_shapes=tuple(part_out_shapes),
        embedding_dim=embedding_dim,
        reconstruction_shape=tuple(cfg.input_shape),
    )


@dataclass
class ForwardTrace:
    """Cached activations from one forward pass."""

    input_shape: tuple[int, int, int]
    encoder_ctxs: list = field(default_factory=list)
    encoder_features: np.ndarray | None = None  # tap activation, pre-pool
    pool_ctx: object = None
    slice_shapes: list = field(default_factory=list)
    part_ctxs: list = field(default_factory=list)  # per part: list of block ctx tuples
    fcA_ctxs: list = field(default_factory=list)
    fcA_relu_ctxs: list = field(default_factory=list)
    fcB_ctxs: list = field(default_factory=list)
    fc_large_ctx: object = None
    l2_ctx: object = None
    ranking_embedding: np.ndarray | None = None
    decoder_ctxs: list | None = None
    reconstruction: np.ndarray | None = None


class _ResidualBlock:
    """conv -> conv, eltwise sum of the two conv outputs, relu, pool."""

    def __init__(self, cin: int, channels: int, rng, init_std=None):
        first, second = _residual_block_specs(cin, channels)
        self.conv1 = Conv(first, ParamSet.for_spec(first, rng, init_std))
        self.conv2 = Conv(second, ParamSet.for_spec(second, rng, init_std))
        self.pool = MaxPool(maxpool_spec((3, 3), (1, 1), (1, 1)))

    def forward(self, x):
        a, ctx1 = self.conv1.forward(x)
        b, ctx2 = self.conv2.forward(a)
        s = a + b
        mask = s > 0.0
        out, ctxp = self.pool.forward(np.where(mask, s, 0.0))
        return out, (ctx1, ctx2, mask, ctxp)

    def backward(self, ctx, upstream):
        ctx1, ctx2, mask, ctxp = ctx
        ds = np.where(mask, self.pool.backward(ctxp, upstream), 0.0)
        da = ds + self.conv2.backward(ctx2, ds)
        return self.conv1.backward(ctx1, da)

    def param_sets(self):
        return [self.conv1.params, self.conv2.params]


class Network:
    """Built network: layer objects plus the wiring between them."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator, init_std=None):
        self.cfg = cfg
        self.shapes = propagate_shapes(cfg)
        if init_std is None:
            init_std = cfg.init_std

        self.encoder = [make_layer(s, rng, init_std) for s in cfg.encoder[:-1]]
        self.pool = make_layer(cfg.encoder[-1])
        self.decoder = [make_layer(s, rng, init_std) for s in cfg.decoder]

        self.blocks: list[list[_ResidualBlock]] = []
        cin = self.shapes.pooled_shape[0]
        for _ in range(cfg.parts):
            stack = []
            c = cin
            for _ in range(cfg.residual_blocks_per_part):
                stack.append(_ResidualBlock(c, cfg.part_channels, rng, init_std))
                c = cfg.part_channels
            self.blocks.append(stack)

        self.fcA: list[FullyConnected] = []
        self.fcB: list[FullyConnected] = []
        for shape in self.shapes.part_out_shapes:
            a_spec = fc_spec(int(np.prod(shape)), cfg.fc_small_dim)
            b_spec = fc_spec(cfg.fc_small_dim, cfg.fc_small_dim)
            self.fcA.append(FullyConnected(a_spec, ParamSet.for_spec(a_spec, rng, init_std)))
            self.fcB.append(FullyConnected(b_spec, ParamSet.for_spec(b_spec, rng, init_std)))
        large_spec = fc_spec(cfg.parts * cfg.fc_small_dim, cfg.fc_large_dim)
        self.fc_large = FullyConnected(large_spec, ParamSet.for_spec(large_spec, rng, init_std))
        self.l2norm = L2Normalize()

    # -- parameter plumbing ------------------------------------------------

    def named_params(self) -> list[tuple[str, ParamSet]]:
        out = []
        enc_i = 0
        for layer in self.encoder:
            if layer.params is not None:
                out.append((f"encoder{enc_i}_{layer.spec.kind}", layer.params))
                enc_i += 1
        dec_i = 0
        for layer in self.decoder:
            if layer.params is not None:
                out.append((f"decoder{dec_i}_{layer.spec.kind}", layer.params))
                dec_i += 1
        for p, stack in enumerate(self.blocks):
            for b, block in enumerate(stack):
                out.append((f"part{p}_block{b}_conv1", block.conv1.params))
                out.append((f"part{p}_block{b}_conv2", block.conv2.params))
        for p in range(self.cfg.parts):
            out.append((f"part{p}_fc_a", self.fcA[p].params))
            out.append((f"part{p}_fc_b", self.fcB[p].params))
        out.append(("fc_large", self.fc_large.params))
        return out

    def param_sets(self) -> list[ParamSet]:
        return [p for _, p in self.named_params()]

    def zero_grads(self) -> None:
        for p in self.param_sets():
            p.zero_grads()

    # -- forward / backward ------------------------------------------------

    def forward(self, image: np.ndarray, with_decoder: bool = True) -> ForwardTrace:
        cfg = self.cfg
        if tuple(image.shape) != tuple(cfg.input_shape):
            raise ValueError(f"input shape {image.shape} != configured {cfg.input_shape}")
        lo, hi = float(image.min()), float(image.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"input values must lie in [0, 1], got [{lo:.4g}, {hi:.4g}]")

        trace = ForwardTrace(input_shape=tuple(cfg.input_shape))
        x = image
        for layer in self.encoder:
            x, ctx = layer.forward(x)
            trace.encoder_ctxs.append(ctx)
        trace.encoder_features = x

        pooled, trace.pool_ctx = self.pool.forward(x)

        slices = slice_height(pooled, cfg.parts)
        trace.slice_shapes = [s.shape for s in slices]
        fcA_outs = []
        fcB_outs = []
        for p, part in enumerate(slices):
            ctxs = []
            y = part
            for block in self.blocks[p]:
                y, ctx = block.forward(y)
                ctxs.append(ctx)
            trace.part_ctxs.append(ctxs)
            flat = np.ascontiguousarray(y).ravel()
            a_out, a_ctx = self.fcA[p].forward(flat)
            trace.fcA_ctxs.append(a_ctx)
            a_mask = a_out > 0.0
            trace.fcA_relu_ctxs.append(a_mask)
            b_out, b_ctx = self.fcB[p].forward(np.where(a_mask, a_out, 0.0))
            trace.fcB_ctxs.append(b_ctx)
            fcA_outs.append(a_out)
            fcB_outs.append(b_out)

        fused, trace.fc_large_ctx = self.fc_large.forward(np.concatenate(fcA_outs))
        prenorm = np.concatenate([fused] + fcB_outs)
        trace.ranking_embedding, trace.l2_ctx = self.l2norm.forward(prenorm)

        if with_decoder:
            trace.decoder_ctxs = []
            y = trace.encoder_features
            for layer in self.decoder:
                y, ctx = layer.forward(y)
                trace.decoder_ctxs.append(ctx)
            trace.reconstruction = y
        return trace

    def embed(self, image: np.ndarray) -> np.ndarray:
        """Ranking embedding only; the decoder is never evaluated."""
        return self.forward(image, with_decoder=False).ranking_embedding

    def backward(
        self,
        trace: ForwardTrace,
        grad_embedding: np.ndarray,
        grad_reconstruction: np.ndarray | None = None,
    ) -> None:
        """Accumulate parameter gradients for one traced forward pass.

        The embedding gradient flows through fusion, parts and encoder;
        the reconstruction gradient (already scaled by the caller)
        flows through the decoder; both sum at the encoder tap.
        """
        cfg = self.cfg
        if trace.ranking_embedding is None:
            raise ValueError("backward called without a matching forward trace")
        if grad_embedding.shape != trace.ranking_embedding.shape:
            raise ValueError(
                f"grad_embedding shape {grad_embedding.shape} != embedding {trace.ranking_embedding.shape}"
            )

        d_prenorm = self.l2norm.backward(trace.l2_ctx, grad_embedding)
        d_fused = d_prenorm[: cfg.fc_large_dim]
        d_fcB_outs = np.split(d_prenorm[cfg.fc_large_dim :], cfg.parts)

        d_concatA = self.fc_large.backward(trace.fc_large_ctx, d_fused)
        d_fcA_from_large = np.split(d_concatA, cfg.parts)

        d_slices = []
        for p in range(cfg.parts):
            d_a_relu = self.fcB[p].backward(trace.fcB_ctxs[p], d_fcB_outs[p])
            d_a = np.where(trace.fcA_relu_ctxs[p], d_a_relu, 0.0) + d_fcA_from_large[p]
            d_flat = self.fcA[p].backward(trace.fcA_ctxs[p], d_a)
            d_part = d_flat.reshape(trace.slice_shapes[p])
            for block, ctx in zip(reversed(self.blocks[p]), reversed(trace.part_ctxs[p])):
                d_part = block.backward(ctx, d_part)
            d_slices.append(d_part)

        d_pooled = concat_height(d_slices)
        d_tap = self.pool.backward(trace.pool_ctx, np.asarray(d_pooled))

        if grad_reconstruction is not None:
            if trace.decoder_ctxs is None:
                raise ValueError("reconstruction gradient given but the trace has no decoder pass")
            if grad_reconstruction.shape != trace.reconstruction.shape:
                raise ValueError(
                    f"grad_reconstruction shape {grad_reconstruction.shape} != reconstruction {trace.reconstruction.shape}"
                )
            d = grad_reconstruction
            for layer, ctx in zip(reversed(self.decoder), reversed(trace.decoder_ctxs)):
                d = layer.backward(ctx, d)
            d_tap = d_tap + d

        d = d_tap
        for layer, ctx in zip(reversed(self.encoder), reversed(trace.encoder_ctxs)):
            d = layer.backward(ctx, d)

    def sgd_step(self, lr: float) -> None:
        for p in self.param_sets():
            p.weights -= lr * p.weight_grads
            p.biases -= lr * p.bias_grads


def build_network(cfg: NetworkConfig, rng: np.random.Generator | None = None, init_std=None) -> Network:
    """Validate the config geometry and instantiate all layers."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return Network(cfg, rng, init_std)


# -- stock configurations --------------------------------------------------


def paper_config(**overrides) -> NetworkConfig:
    """Full-scale configuration: 229x79 inputs, 1200-dim embeddings."""
    base = dict(
        input_shape=(3, 229, 79),
        encoder=(
            conv_spec(3, 64, (7, 7), (3, 3)),
            relu_spec(),
            conv_spec(64, 64, (5, 5), (2, 2)),
            relu_spec(),
            maxpool_spec((3, 3), (1, 1), (1, 1)),
        ),
        decoder=(
            deconv_spec(64, 64, (5, 5), (2, 2)),
            relu_spec(),
            deconv_spec(64, 3, (7, 7), (3, 3)),
        ),
        parts=4,
        residual_blocks_per_part=2,
        part_channels=32,
        fc_small_dim=150,
        fc_large_dim=600,
    )
    base.update(overrides)
    return NetworkConfig(**base)


def desk_config(**overrides) -> NetworkConfig:
    """Laptop-scale twin of the full architecture: 37x13 inputs, 128-dim embeddings."""
    base = dict(
        input_shape=(3, 37, 13),
        encoder=(
            conv_spec(3, 8, (5, 5), (2, 2)),
            relu_spec(),
            conv_spec(8, 8, (3, 3), (2, 2)),
            relu_spec(),
            maxpool_spec((3, 3), (1, 1), (1, 1)),
        ),
        decoder=(
            deconv_spec(8, 8, (3, 3), (2, 2)),
            relu_spec(),
            deconv_spec(8, 3, (5, 5), (2, 2)),
        ),
        parts=4,
        residual_blocks_per_part=1,
        part_channels=8,
        fc_small_dim=16,
        fc_large_dim=64,
        init_std=0.15,
    )
    base.update(overrides)
    return NetworkConfig(**base)


def micro_config(**overrides) -> NetworkConfig:
    """Smallest geometry that still exercises every junction; used for
    exhaustive whole-network gradient checks."""
    base = dict(
        input_shape=(3, 13, 7),
        encoder=(
            conv_spec(3, 2, (3, 3), (2, 2)),
            relu_spec(),
            maxpool_spec((3, 3), (1, 1), (1, 1)),
        ),
        decoder=(deconv_spec(2, 3, (3, 3), (2, 2)),),
        parts=2,
        residual_blocks_per_part=1,
        part_channels=2,
        fc_small_dim=3,
        fc_large_dim=4,
        init_std=0.1,
    )
    base.update(overrides)
    return NetworkConfig(**base)
