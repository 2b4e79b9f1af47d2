"""Forward and backward computation for every layer type in the engine.

Convolution is an im2col rearrangement followed by one dense matrix
multiplication per sample; its backward pass runs the same path
transposed.  All kernels work on NCHW numpy arrays and preserve the input
dtype, so the same code serves the 32-bit production path and the 64-bit
shadow mode used for gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatch, StateMissing
from .tensor import gemm

DROPOUT_RATE = 0.5


# ---------------------------------------------------------------------------
# parameter records


def conv_out_size(size, pad, kernel, stride):
    """Output extent of a conv/pool window sweep; non-exact division is an error."""
    span = size + 2 * pad - kernel
    if span < 0:
        raise DimensionMismatch(
            f"kernel {kernel} with pad {pad} exceeds input extent {size}"
        )
    if span % stride != 0:
        raise DimensionMismatch(
            f"window sweep not exact: ({size} + 2*{pad} - {kernel}) % {stride} != 0"
        )
    return span // stride + 1


@dataclass
class ConvParams:
    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0
    weights: np.ndarray = None
    bias: np.ndarray = None

    def __post_init__(self):
        if self.stride < 1 or self.pad < 0:
            raise DimensionMismatch("conv needs stride >= 1 and pad >= 0")
        expect = (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)
        if self.weights is None:
            raise DimensionMismatch("conv weights are required")
        self.weights = np.asarray(self.weights)
        if self.weights.shape != expect:
            raise DimensionMismatch(
                f"conv weights shape {self.weights.shape} != {expect}"
            )
        self.bias = np.zeros(self.out_channels, self.weights.dtype) \
            if self.bias is None else np.asarray(self.bias)
        if self.bias.shape != (self.out_channels,):
            raise DimensionMismatch(f"conv bias shape {self.bias.shape}")


@dataclass
class PoolParams:
    window: int
    stride: int

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise DimensionMismatch("pool needs window >= 1 and stride >= 1")


@dataclass
class LrnParams:
    local_size: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 2.0

    def __post_init__(self):
        if self.local_size < 1 or self.local_size % 2 == 0:
            raise DimensionMismatch("lrn local_size must be odd and >= 1")
        if self.k <= 0:
            raise DimensionMismatch("lrn k must be > 0")


@dataclass
class DropoutState:
    mode: str = "test"  # "train" | "test"
    rate: float = DROPOUT_RATE
    rng_seed: int | None = None
    mask: np.ndarray | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# convolution


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None]
    if x.ndim != 4:
        raise DimensionMismatch(f"expected NCHW input, got shape {x.shape}")
    return x


def im2col(x, conv: ConvParams) -> np.ndarray:
    """Rearrange one image's receptive fields into matrix columns.

    Returns a (C*R*S, H'*W') matrix: column j is the patch feeding output
    position j (row-major over the H'xW' grid), rows ordered channel-major
    then kernel-row then kernel-col.  Padding cells contribute zeros.
    """
    x = np.asarray(x)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise DimensionMismatch("im2col takes a single image")
        x = x[0]
    if x.ndim != 3 or x.shape[0] != conv.in_channels:
        raise DimensionMismatch(
            f"im2col input shape {x.shape} does not match {conv.in_channels} channels"
        )
    c, h, w = x.shape
    oh = conv_out_size(h, conv.pad, conv.kernel_h, conv.stride)
    ow = conv_out_size(w, conv.pad, conv.kernel_w, conv.stride)
    if conv.pad:
        x = np.pad(x, ((0, 0), (conv.pad, conv.pad), (conv.pad, conv.pad)))
    win = sliding_window_view(x, (conv.kernel_h, conv.kernel_w), axis=(1, 2))
    win = win[:, :: conv.stride, :: conv.stride]  # (C, OH, OW, R, S)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(
        c * conv.kernel_h * conv.kernel_w, oh * ow
    )
    return np.ascontiguousarray(cols)


def _col2im(cols, conv: ConvParams, h, w):
    """Scatter-add column gradients back onto the (padded) input image."""
    c = conv.in_channels
    r, s, stride, pad = conv.kernel_h, conv.kernel_w, conv.stride, conv.pad
    oh = conv_out_size(h, pad, r, stride)
    ow = conv_out_size(w, pad, s, stride)
    g = cols.reshape(c, r, s, oh, ow)
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(r):
        for j in range(s):
            out[:, i : i + oh * stride : stride, j : j + ow * stride : stride] += g[:, i, j]
    if pad:
        out = out[:, pad : pad + h, pad : pad + w]
    return out


def conv_forward(x, conv: ConvParams) -> np.ndarray:
    """Convolve an NCHW batch: weights-as-matrix GEMM against im2col columns."""
    x = _as_batch(x)
    n, c, h, w = x.shape
    if c != conv.in_channels:
        raise DimensionMismatch(
            f"conv expects {conv.in_channels} input channels, got {c}"
        )
    k = conv.out_channels
    oh = conv_out_size(h, conv.pad, conv.kernel_h, conv.stride)
    ow = conv_out_size(w, conv.pad, conv.kernel_w, conv.stride)
    w2 = conv.weights.reshape(k, -1)
    out_dtype = np.result_type(x.dtype, conv.weights.dtype)
    out = np.empty((n, k, oh, ow), dtype=out_dtype)
    for i in range(n):
        cols = im2col(x[i], conv)
        out[i] = gemm(w2, cols).reshape(k, oh, ow)
    out += conv.bias.astype(out_dtype)[None, :, None, None]
    return out


def conv_backward(x, conv: ConvParams, grad_out):
    """Gradients of conv_forward via the transposed im2col/GEMM path.

    Returns (grad_input, grad_weights, grad_bias).
    """
    x = _as_batch(x)
    n, _, h, w = x.shape
    k = conv.out_channels
    w2 = conv.weights.reshape(k, -1)
    dtype = np.result_type(x.dtype, grad_out.dtype)
    gw = np.zeros_like(w2, dtype=dtype)
    gx = np.empty(x.shape, dtype=dtype)
    for i in range(n):
        cols = im2col(x[i], conv)
        g2 = grad_out[i].reshape(k, -1)
        gw += gemm(g2, cols, trans_b=True)
        gcols = gemm(w2, g2, trans_a=True)
        gx[i] = _col2im(gcols, conv, h, w)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gx, gw.reshape(conv.weights.shape), gb


# ---------------------------------------------------------------------------
# pooling


def maxpool_forward(x, pool: PoolParams):
    """Max over each window; returns (output, window-local argmax indices).

    Ties go to the lowest linear index inside the window, which makes the
    backward routing deterministic.
    """
    x = _as_batch(x)
    n, c, h, w = x.shape
    if pool.window > h or pool.window > w:
        raise DimensionMismatch(
            f"pool window {pool.window} exceeds spatial dims ({h}, {w})"
        )
    oh = conv_out_size(h, 0, pool.window, pool.stride)
    ow = conv_out_size(w, 0, pool.window, pool.stride)
    win = sliding_window_view(x, (pool.window, pool.window), axis=(2, 3))
    win = win[:, :, :: pool.stride, :: pool.stride]
    flat = win.reshape(n, c, oh, ow, pool.window * pool.window)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), argmax.astype(np.int32)


def maxpool_backward(x_shape, pool: PoolParams, argmax, grad_out):
    """Route grad_out to the recorded argmax cell of each window."""
    if argmax is None:
        raise StateMissing("maxpool backward needs the recorded argmax indices")
    n, c, h, w = x_shape
    oh, ow = grad_out.shape[2], grad_out.shape[3]
    r = argmax // pool.window
    s = argmax % pool.window
    h_idx = np.arange(oh)[None, None, :, None] * pool.stride + r
    w_idx = np.arange(ow)[None, None, None, :] * pool.stride + s
    n_idx = np.arange(n)[:, None, None, None]
    c_idx = np.arange(c)[None, :, None, None]
    gx = np.zeros(x_shape, dtype=grad_out.dtype)
    np.add.at(gx, (n_idx, c_idx, h_idx, w_idx), grad_out)
    return gx


# ---------------------------------------------------------------------------
# elementwise and normalization layers


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def _channel_window_sum(a, local_size):
    """Sum over a centered channel window, clipped to valid channels."""
    c = a.shape[1]
    half = local_size // 2
    cs = np.cumsum(a, axis=1)
    hi = np.minimum(np.arange(c) + half, c - 1)
    lo = np.maximum(np.arange(c) - half, 0)
    out = cs[:, hi].copy()
    has_lo = lo >= 1
    if has_lo.any():
        out[:, has_lo] -= cs[:, lo[has_lo] - 1]
    return out


def lrn_forward(x, p: LrnParams):
    """Divisive normalization over a local channel neighborhood.

    out = x / (k + (alpha/local_size) * sum_window(x^2)) ** beta
    """
    x = _as_batch(x)
    wsum = _channel_window_sum(x * x, p.local_size)
    scale = p.k + (p.alpha / p.local_size) * wsum
    return x * np.power(scale, -p.beta)


def lrn_backward(x, p: LrnParams, grad_out):
    x = _as_batch(x)
    coeff = p.alpha / p.local_size
    scale = p.k + coeff * _channel_window_sum(x * x, p.local_size)
    # d out_c / d x_j couples channels whose windows contain j; the window
    # is symmetric so the reverse sum reuses the same clipped-window helper.
    inner = grad_out * x * np.power(scale, -p.beta - 1)
    gx = grad_out * np.power(scale, -p.beta)
    gx -= 2.0 * coeff * p.beta * x * _channel_window_sum(inner, p.local_size)
    return gx


# ---------------------------------------------------------------------------
# fully connected


def flatten_rows(x):
    """View an NCHW (or already 2-d) array as (N, D) rows."""
    x = np.asarray(x)
    if x.ndim == 2:
        return x
    return np.ascontiguousarray(x).reshape(x.shape[0], -1)


def fc_forward(x, weights, bias):
    """x @ weights.T + bias for (N, D) rows and (M, D) weights."""
    x = flatten_rows(x)
    if x.shape[1] != weights.shape[1]:
        raise DimensionMismatch(
            f"fc input dim {x.shape[1]} != weight cols {weights.shape[1]}"
        )
    out = gemm(x, weights, trans_b=True)
    out += bias.astype(out.dtype)
    return out


def fc_backward(x, weights, grad_out):
    """Returns (grad_input_rows, grad_weights, grad_bias)."""
    x = flatten_rows(x)
    gx = gemm(grad_out, weights)
    gw = gemm(grad_out, x, trans_a=True)
    gb = grad_out.sum(axis=0)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# dropout


def dropout_apply(x, state: DropoutState, rng=None):
    """Apply dropout per the half-rate convention used throughout this kit.

    Train mode zeroes each entry i.i.d. with probability ``rate`` and
    records the mask on ``state`` for backward; test mode multiplies every
    activation by 0.5 (no mask involved).
    """
    if state.rate != DROPOUT_RATE:
        raise DimensionMismatch(f"dropout rate is fixed at {DROPOUT_RATE}")
    x = np.asarray(x)
    if state.mode == "test":
        return x * x.dtype.type(0.5)
    if state.mode != "train":
        raise ValueError(f"unknown dropout mode {state.mode!r}")
    if rng is None:
        rng = np.random.default_rng(state.rng_seed)
    mask = (rng.random(x.shape) >= state.rate).astype(x.dtype)
    state.mask = mask
    return x * mask


def dropout_backward(state: DropoutState, grad_out):
    if state.mode == "test":
        return grad_out * grad_out.dtype.type(0.5)
    if state.mask is None:
        raise StateMissing("dropout backward needs the mask from forward")
    return grad_out * state.mask


# ---------------------------------------------------------------------------
# softmax


def softmax_forward(x):
    """Row-wise softmax with max subtraction for stability."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionMismatch(f"softmax expects (N, M) input, got {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, grad_out):
    """Gradient through softmax given its forward output y."""
    dot = (grad_out * y).sum(axis=1, keepdims=True)
    return y * (grad_out - dot)


# ---------------------------------------------------------------------------
# layer objects used by the network executor
#
# Layers are immutable after construction; per-call forward state is
# returned to the caller instead of being stored, so one layer instance can
# serve concurrent forward passes.


@dataclass
class ForwardContext:
    mode: str = "test"  # "train" | "test"
    rng: np.random.Generator | None = None


class Layer:
    kind = "other"

    def __init__(self, name):
        self.name = name

    def forward(self, x, ctx: ForwardContext):
        """Returns (output, state); state feeds backward()."""
        raise NotImplementedError

    def backward(self, x, state, grad_out):
        """Returns (grad_input, {param_name: grad})."""
        raise NotImplementedError

    def param_arrays(self):
        return {}


class ConvLayer(Layer):
    kind = "conv"

    def __init__(self, name, params: ConvParams, act=None):
        super().__init__(name)
        if act not in (None, "relu"):
            raise ValueError(f"unsupported conv activation {act!r}")
        self.params = params
        self.act = act

    def forward(self, x, ctx):
        y = conv_forward(x, self.params)
        if self.act == "relu":
            pre = y
            return relu_forward(y), pre
        return y, None

    def backward(self, x, state, grad_out):
        if self.act == "relu":
            if state is None:
                raise StateMissing(f"{self.name}: pre-activation missing")
            grad_out = relu_backward(state, grad_out)
        gx, gw, gb = conv_backward(x, self.params, grad_out)
        return gx, {"weights": gw, "bias": gb}

    def param_arrays(self):
        return {"weights": self.params.weights, "bias": self.params.bias}


class PoolLayer(Layer):
    kind = "pool"

    def __init__(self, name, params: PoolParams):
        super().__init__(name)
        self.params = params

    def forward(self, x, ctx):
        return maxpool_forward(x, self.params)

    def backward(self, x, state, grad_out):
        if state is None:
            raise StateMissing(f"{self.name}: pool argmax missing")
        return maxpool_backward(x.shape, self.params, state, grad_out), {}


class ReluLayer(Layer):
    kind = "neuron"

    def forward(self, x, ctx):
        return relu_forward(x), None

    def backward(self, x, state, grad_out):
        return relu_backward(x, grad_out), {}


class LrnLayer(Layer):
    kind = "other"

    def __init__(self, name, params: LrnParams):
        super().__init__(name)
        self.params = params

    def forward(self, x, ctx):
        return lrn_forward(x, self.params), None

    def backward(self, x, state, grad_out):
        return lrn_backward(x, self.params, grad_out), {}


class FcLayer(Layer):
    kind = "fc"

    def __init__(self, name, weights, bias, act=None):
        super().__init__(name)
        if act not in (None, "relu"):
            raise ValueError(f"unsupported fc activation {act!r}")
        self.weights = np.asarray(weights)
        self.bias = np.asarray(bias)
        self.act = act

    def forward(self, x, ctx):
        y = fc_forward(x, self.weights, self.bias)
        if self.act == "relu":
            pre = y
            return relu_forward(y), pre
        return y, None

    def backward(self, x, state, grad_out):
        if self.act == "relu":
            if state is None:
                raise StateMissing(f"{self.name}: pre-activation missing")
            grad_out = relu_backward(state, grad_out)
        gx, gw, gb = fc_backward(x, self.weights, grad_out)
        return gx.reshape(np.asarray(x).shape), {"weights": gw, "bias": gb}

    def param_arrays(self):
        return {"weights": self.weights, "bias": self.bias}


class DropoutLayer(Layer):
    kind = "neuron"

    def __init__(self, name, rate=DROPOUT_RATE, seed=None):
        super().__init__(name)
        self.rate = rate
        self.seed = seed

    def forward(self, x, ctx):
        state = DropoutState(mode=ctx.mode, rate=self.rate, rng_seed=self.seed)
        y = dropout_apply(x, state, rng=ctx.rng)
        return y, state

    def backward(self, x, state, grad_out):
        if state is None:
            raise StateMissing(f"{self.name}: dropout state missing")
        return dropout_backward(state, grad_out), {}


class SoftmaxLayer(Layer):
    kind = "other"

    def forward(self, x, ctx):
        y = softmax_forward(flatten_rows(x))
        return y, y

    def backward(self, x, state, grad_out):
        if state is None:
            raise StateMissing(f"{self.name}: softmax output missing")
        return softmax_backward(state, grad_out), {}
