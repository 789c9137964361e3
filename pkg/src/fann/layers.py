"""Network layers with hand-derived backward passes.

Every layer follows one discipline: ``forward(x)`` returns ``(output,
ctx)`` where ``ctx`` caches whatever the backward pass needs, and
``backward(ctx, upstream)`` returns the gradient with respect to the
input while accumulating parameter gradients (``+=``) into the layer's
:class:`ParamSet`. Forward and backward over distinct contexts are safe
to run concurrently; gradient accumulation into one ParamSet is not.

Convolution is implemented as cross-correlation (no kernel flip), the
standard convention for learned filters. Transposed convolution is the
exact adjoint of that correlation, so ``<deconv(x), y> == <x, conv(y)>``
holds for bias-free parameters sharing one weight tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LayerSpec",
    "ParamSet",
    "Conv",
    "Deconv",
    "Relu",
    "MaxPool",
    "FullyConnected",
    "L2Normalize",
    "make_layer",
    "conv_spec",
    "deconv_spec",
    "relu_spec",
    "maxpool_spec",
    "fc_spec",
    "l2_normalize_spec",
]

KINDS = ("conv", "deconv", "relu", "maxpool", "fully_connected", "l2_normalize")

NORM_EPS = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    ``in_channels`` doubles as the flattened input length for
    ``fully_connected`` layers; spatial fields are ignored for the
    parameter-free kinds.
    """

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (0, 0)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    out_dim: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "deconv", "maxpool"):
            kh, kw = self.kernel
            sh, sw = self.stride
            ph, pw = self.padding
            if kh < 1 or kw < 1:
                raise ValueError(f"kernel must be positive, got {self.kernel}")
            if sh < 1 or sw < 1:
                raise ValueError(f"stride must be positive, got {self.stride}")
            if ph < 0 or pw < 0:
                raise ValueError(f"padding must be >= 0, got {self.padding}")
            if self.kind == "maxpool" and (ph >= kh or pw >= kw):
                raise ValueError("maxpool padding must be smaller than the kernel")
        if self.kind in ("conv", "deconv") and (
            self.in_channels < 1 or self.out_channels < 1
        ):
            raise ValueError("conv/deconv need positive channel counts")
        if self.kind == "fully_connected" and (self.in_channels < 1 or self.out_dim < 1):
            raise ValueError("fully_connected needs positive in/out dimensions")

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Propagate an input shape through this layer, validating it."""
        if self.kind in ("relu", "l2_normalize"):
            return tuple(in_shape)
        if self.kind == "fully_connected":
            n = int(np.prod(in_shape))
            if n != self.in_channels:
                raise ValueError(
                    f"fully_connected expects {self.in_channels} inputs, got {n}"
                )
            return (self.out_dim,)
        if len(in_shape) != 3:
            raise ValueError(f"{self.kind} expects a (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        if self.kind == "deconv":
            if c != self.in_channels:
                raise ValueError(
                    f"deconv expects {self.in_channels} input channels, got {c}"
                )
            oh = (h - 1) * sh + kh - 2 * ph
            ow = (w - 1) * sw + kw - 2 * pw
            if oh < 1 or ow < 1:
                raise ValueError(f"deconv output {oh}x{ow} is not positive")
            return (self.out_channels, oh, ow)
        # conv / maxpool share the windowed-output formula
        if self.kind == "conv" and c != self.in_channels:
            raise ValueError(f"conv expects {self.in_channels} input channels, got {c}")
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ValueError(
                f"window {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}"
            )
        for name, extent, k, s, p in (
            ("height", h, kh, sh, ph),
            ("width", w, kw, sw, pw),
        ):
            if (extent + 2 * p - k) % s != 0:
                raise ValueError(
                    f"non-integral output {name}: ({extent} + 2*{p} - {k}) / {s} + 1"
                )
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        oc = self.out_channels if self.kind == "conv" else c
        return (oc, oh, ow)


def conv_spec(cin, cout, kernel, stride, padding=(0, 0)) -> LayerSpec:
    return LayerSpec("conv", cin, cout, tuple(kernel), tuple(stride), tuple(padding))


def deconv_spec(cin, cout, kernel, stride, padding=(0, 0)) -> LayerSpec:
    return LayerSpec("deconv", cin, cout, tuple(kernel), tuple(stride), tuple(padding))


def relu_spec() -> LayerSpec:
    return LayerSpec("relu")


def maxpool_spec(kernel, stride, padding=(0, 0)) -> LayerSpec:
    return LayerSpec("maxpool", 0, 0, tuple(kernel), tuple(stride), tuple(padding))


def fc_spec(in_dim, out_dim) -> LayerSpec:
    return LayerSpec("fully_connected", in_channels=in_dim, out_dim=out_dim)


def l2_normalize_spec() -> LayerSpec:
    return LayerSpec("l2_normalize")


@dataclass
class ParamSet:
    """Learnable weights and biases with matching gradient accumulators."""

    weights: np.ndarray
    biases: np.ndarray
    weight_grads: np.ndarray = field(init=False)
    bias_grads: np.ndarray = field(init=False)

    def __post_init__(self):
        self.weight_grads = np.zeros_like(self.weights)
        self.bias_grads = np.zeros_like(self.biases)

    @classmethod
    def for_spec(cls, spec: LayerSpec, rng: np.random.Generator, init_std=None) -> "ParamSet":
        """Gaussian-filled weights, zero biases.

        The per-layer standard deviation is drawn uniformly from
        [0.001, 0.01] unless ``init_std`` pins it.
        """
        if spec.kind == "conv":
            wshape = (spec.out_channels, spec.in_channels, *spec.kernel)
            bshape = (spec.out_channels,)
        elif spec.kind == "deconv":
            wshape = (spec.in_channels, spec.out_channels, *spec.kernel)
            bshape = (spec.out_channels,)
        elif spec.kind == "fully_connected":
            wshape = (spec.out_dim, spec.in_channels)
            bshape = (spec.out_dim,)
        else:
            raise ValueError(f"{spec.kind} has no parameters")
        std = float(rng.uniform(0.001, 0.01)) if init_std is None else float(init_std)
        return cls(rng.normal(0.0, std, wshape), np.zeros(bshape))

    def zero_grads(self) -> None:
        self.weight_grads[...] = 0.0
        self.bias_grads[...] = 0.0

    def n_params(self) -> int:
        return self.weights.size + self.biases.size


def _window_view(padded: np.ndarray, kh, kw, sh, sw) -> np.ndarray:
    """(C, Ho, Wo, kh, kw) sliding-window view over a padded (C, Hp, Wp) array."""
    c, hp, wp = padded.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    s0, s1, s2 = padded.strides
    return np.lib.stride_tricks.as_strided(
        padded, (c, ho, wo, kh, kw), (s0, s1 * sh, s2 * sw, s1, s2), writeable=False
    )


def _check_upstream(got: tuple[int, ...], want: tuple[int, ...]) -> None:
    if tuple(got) != tuple(want):
        raise ValueError(f"upstream gradient shape {tuple(got)} != output shape {tuple(want)}")


class Conv:
    """Strided cross-correlation with per-output-channel bias (im2col matmul)."""

    def __init__(self, spec: LayerSpec, params: ParamSet):
        assert spec.kind == "conv"
        self.spec = spec
        self.params = params

    def forward(self, x: np.ndarray):
        spec = self.spec
        cout, ho, wo = spec.out_shape(x.shape)
        ph, pw = spec.padding
        padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else np.ascontiguousarray(x)
        view = _window_view(padded, *spec.kernel, *spec.stride)
        # (C*kh*kw, Ho*Wo) patch matrix; the copy doubles as the backward cache
        cols = view.transpose(0, 3, 4, 1, 2).reshape(-1, ho * wo)
        out = (self.params.weights.reshape(cout, -1) @ cols).reshape(cout, ho, wo)
        out += self.params.biases[:, None, None]
        return out, (x.shape, cols, out.shape)

    def backward(self, ctx, upstream: np.ndarray) -> np.ndarray:
        in_shape, cols, out_shape = ctx
        _check_upstream(upstream.shape, out_shape)
        spec = self.spec
        kh, kw = spec.kernel
        sh, sw = spec.stride
        ph, pw = spec.padding
        cout, ho, wo = out_shape
        c, h, w = in_shape
        up = upstream.reshape(cout, -1)
        self.params.weight_grads += (up @ cols.T).reshape(self.params.weights.shape)
        self.params.bias_grads += up.sum(axis=1)
        # scatter patch gradients back through the window geometry
        dpatch = (self.params.weights.reshape(cout, -1).T @ up).reshape(c, kh, kw, ho, wo)
        dpad = np.zeros((c, h + 2 * ph, w + 2 * pw))
        for k in range(kh):
            for l in range(kw):
                dpad[:, k : k + sh * ho : sh, l : l + sw * wo : sw] += dpatch[:, k, l]
        if ph or pw:
            return dpad[:, ph : ph + h, pw : pw + w]
        return dpad


class Deconv:
    """Transposed convolution: the adjoint of :class:`Conv` with the same spec."""

    def __init__(self, spec: LayerSpec, params: ParamSet):
        assert spec.kind == "deconv"
        self.spec = spec
        self.params = params

    def _scatter_extent(self, h, w):
        kh, kw = self.spec.kernel
        sh, sw = self.spec.stride
        return (h - 1) * sh + kh, (w - 1) * sw + kw

    def forward(self, x: np.ndarray):
        spec = self.spec
        out_shape = spec.out_shape(x.shape)
        kh, kw = spec.kernel
        sh, sw = spec.stride
        ph, pw = spec.padding
        cin, h, w = x.shape
        fh, fw = self._scatter_extent(h, w)
        full = np.zeros((spec.out_channels, fh, fw))
        # each input pixel stamps a kernel-sized window at (i*sh, j*sw)
        t = (
            self.params.weights.reshape(cin, -1).T @ x.reshape(cin, -1)
        ).reshape(spec.out_channels, kh, kw, h, w)
        for k in range(kh):
            for l in range(kw):
                full[:, k : k + sh * h : sh, l : l + sw * w : sw] += t[:, k, l]
        out = full[:, ph : ph + out_shape[1], pw : pw + out_shape[2]]
        out = out + self.params.biases[:, None, None]
        return out, (x, out.shape)

    def backward(self, ctx, upstream: np.ndarray) -> np.ndarray:
        x, out_shape = ctx
        _check_upstream(upstream.shape, out_shape)
        spec = self.spec
        kh, kw = spec.kernel
        sh, sw = spec.stride
        ph, pw = spec.padding
        cin, h, w = x.shape
        fh, fw = self._scatter_extent(h, w)
        full = np.zeros((spec.out_channels, fh, fw))
        full[:, ph : ph + out_shape[1], pw : pw + out_shape[2]] = upstream
        view = _window_view(full, kh, kw, sh, sw)  # (B, H, W, kh, kw)
        cols = view.transpose(0, 3, 4, 1, 2).reshape(-1, h * w)  # (B*kh*kw, H*W)
        self.params.weight_grads += (x.reshape(cin, -1) @ cols.T).reshape(
            self.params.weights.shape
        )
        self.params.bias_grads += upstream.sum(axis=(1, 2))
        return (self.params.weights.reshape(cin, -1) @ cols).reshape(cin, h, w)


class Relu:
    """max(x, 0); the gradient at exactly zero is zero."""

    def __init__(self, spec: LayerSpec | None = None):
        self.spec = spec or relu_spec()
        self.params = None

    def forward(self, x: np.ndarray):
        mask = x > 0.0
        return np.where(mask, x, 0.0), mask

    def backward(self, ctx, upstream: np.ndarray) -> np.ndarray:
        mask = ctx
        _check_upstream(upstream.shape, mask.shape)
        return np.where(mask, upstream, 0.0)


class MaxPool:
    """Windowed maximum with -inf padding; ties go to the first row-major index."""

    def __init__(self, spec: LayerSpec):
        assert spec.kind == "maxpool"
        self.spec = spec
        self.params = None

    def forward(self, x: np.ndarray):
        spec = self.spec
        out_shape = spec.out_shape(x.shape)
        kh, kw = spec.kernel
        ph, pw = spec.padding
        if ph or pw:
            padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
        else:
            padded = np.ascontiguousarray(x)
        view = _window_view(padded, kh, kw, *spec.stride)
        c, ho, wo = out_shape
        flat = view.reshape(c, ho, wo, kh * kw)
        winners = flat.argmax(axis=3)
        out = np.take_along_axis(flat, winners[..., None], axis=3)[..., 0]
        return out, (x.shape, winners, out_shape)

    def backward(self, ctx, upstream: np.ndarray) -> np.ndarray:
        in_shape, winners, out_shape = ctx
        _check_upstream(upstream.shape, out_shape)
        spec = self.spec
        kh, kw = spec.kernel
        sh, sw = spec.stride
        ph, pw = spec.padding
        c, h, w = in_shape
        c_, ho, wo = out_shape
        # winner index -> absolute padded coordinates
        wi, wj = np.divmod(winners, kw)
        base_i = np.arange(ho)[None, :, None] * sh
        base_j = np.arange(wo)[None, None, :] * sw
        rows = (base_i + wi - ph).ravel()
        cols = (base_j + wj - pw).ravel()
        chan = np.repeat(np.arange(c), ho * wo)
        grad = np.zeros(in_shape)
        np.add.at(grad, (chan, rows, cols), upstream.ravel())
        return grad


class FullyConnected:
    """Affine map y = W x + b on a flat vector."""

    def __init__(self, spec: LayerSpec, params: ParamSet):
        assert spec.kind == "fully_connected"
        self.spec = spec
        self.params = params

    def forward(self, x: np.ndarray):
        if x.ndim != 1 or x.shape[0] != self.params.weights.shape[1]:
            raise ValueError(
                f"fully_connected expects a flat ({self.params.weights.shape[1]},) input, got {x.shape}"
            )
        return self.params.weights @ x + self.params.biases, x

    def backward(self, ctx, upstream: np.ndarray) -> np.ndarray:
        x = ctx
        _check_upstream(upstream.shape, (self.spec.out_dim,))
        self.params.weight_grads += np.outer(upstream, x)
        self.params.bias_grads += upstream
        return self.params.weights.T @ upstream


class L2Normalize:
    """Project a vector onto the unit sphere; rejects near-zero inputs."""

    def __init__(self, spec: LayerSpec | None = None):
        self.spec = spec or l2_normalize_spec()
        self.params = None

    def forward(self, x: np.ndarray):
        norm = float(np.linalg.norm(x))
        if norm <= NORM_EPS:
            raise ValueError(f"cannot normalize a vector with norm {norm:.3e}")
        y = x / norm
        return y, (y, norm)

    def backward(self, ctx, upstream: np.ndarray) -> np.ndarray:
        y, norm = ctx
        _check_upstream(upstream.shape, y.shape)
        # full Jacobian (I - y y^T) / ||x||
        return (upstream - y * float(y @ upstream)) / norm


_LAYER_CLASSES = {
    "conv": Conv,
    "deconv": Deconv,
    "relu": Relu,
    "maxpool": MaxPool,
    "fully_connected": FullyConnected,
    "l2_normalize": L2Normalize,
}

PARAMETRIC_KINDS = ("conv", "deconv", "fully_connected")


def make_layer(spec: LayerSpec, rng: np.random.Generator | None = None, init_std=None):
    """Instantiate the layer for ``spec``, drawing parameters from ``rng``."""
    cls = _LAYER_CLASSES[spec.kind]
    if spec.kind in PARAMETRIC_KINDS:
        if rng is None:
            raise ValueError(f"{spec.kind} layer needs an rng for parameter init")
        return cls(spec, ParamSet.for_spec(spec, rng, init_std))
    if spec.kind == "maxpool":
        return cls(spec)
    return cls(spec)
