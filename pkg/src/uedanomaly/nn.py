"""
Minimal layer kit for the autoencoder: convolution, transposed convolution,
max pooling, ReLU, an MSE loss and the Adam optimizer.

Convention: NCHW arrays (batch, channels, height, width). Convolution uses
the cross-correlation form (no kernel flip). Kernels of both convolution
kinds are stored as (out_ch, in_ch, k_h, k_w).

Every layer caches what it needs during ``forward`` and consumes that cache
in ``backward``, which returns the gradient w.r.t. the layer input and
stores parameter gradients in ``layer.grads``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StateError

CONV = "conv"
TRANSPOSE_CONV = "transpose-conv"


def _check_4d(x):
    x = np.asarray(x)
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"expected a non-empty 4-D feature map, got shape {x.shape}")
    return x


class Layer:
    """Base class. Parameter-free layers keep empty ``params``."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None
        # first layer of a network can skip the input gradient
        self.input_grad = True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a forward pass")
        cache, self._cache = self._cache, None
        return cache

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def astype(self, dtype):
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.zero_grad()
        return self

    def dims(self) -> tuple:
        """Architecture fingerprint entry for this layer."""
        return (type(self).__name__,)


class _ConvBase(Layer):
    kind = CONV

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True, rng=None):
        super().__init__()
        if stride < 1 or padding < 0 or kernel < 1:
            raise ShapeError("kernel and stride must be >= 1 and padding >= 0")
        self.in_ch, self.out_ch, self.kernel = int(in_ch), int(out_ch), int(kernel)
        self.stride, self.padding = int(stride), int(padding)
        rng = np.random.default_rng(0) if rng is None else rng
        limit = np.sqrt(6.0 / self.fan_in())
        shape = (self.out_ch, self.in_ch, self.kernel, self.kernel)
        self.params["weight"] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        if bias:
            self.params["bias"] = np.zeros(self.out_ch, dtype=np.float32)
        self.zero_grad()

    @property
    def has_bias(self):
        return "bias" in self.params

    def fan_in(self):
        return self.in_ch * self.kernel * self.kernel

    def dims(self):
        return (self.kind, self.in_ch, self.out_ch, self.kernel, self.stride,
                self.padding, int(self.has_bias))


class Conv2D(_ConvBase):
    """2-D convolution with symmetric zero padding.

    ``strategy`` forces one of the two equivalent lowerings ("im2col" or
    "shifted"); None picks the one with the smaller scratch buffer.
    """

    strategy = None

    def output_size(self, h):
        span = h + 2 * self.padding - self.kernel
        if span < 0 or span % self.stride:
            raise ShapeError(
                f"input size {h} with kernel {self.kernel}, padding {self.padding} "
                f"and stride {self.stride} gives a non-integral output size")
        return span // self.stride + 1

    def forward(self, x):
        x = _check_4d(x)
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"expected {self.in_ch} input channels, got {x.shape[1]}")
        n, _, h, w = x.shape
        ho, wo = self.output_size(h), self.output_size(w)
        p, k = self.padding, self.kernel
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        W = self.params["weight"].astype(x.dtype, copy=False)
        # pick the cheaper of two equivalent lowerings by scratch size
        im2col_size = n * ho * wo * self.in_ch * k * k
        shifted_size = self.out_ch * k * k * xp[0, 0].size * n
        strategy = self.strategy or ("im2col" if im2col_size <= shifted_size else "shifted")
        if strategy == "im2col":
            y, cache = self._forward_im2col(xp, W, ho, wo)
        else:
            y, cache = self._forward_shifted(xp, W, ho, wo)
        if self.has_bias:
            y += self.params["bias"].astype(x.dtype, copy=False)[None, :, None, None]
        self._cache = cache + (x.shape,)
        return y

    def _forward_im2col(self, xp, W, ho, wo):
        n = xp.shape[0]
        s, k = self.stride, self.kernel
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        y = cols @ W.reshape(self.out_ch, -1).T
        y = np.ascontiguousarray(y.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2))
        return y, ("im2col", cols, xp.shape)

    def _forward_shifted(self, xp, W, ho, wo):
        # products of every kernel tap with the whole padded input, then shift-add
        s, k = self.stride, self.kernel
        Wm = W.transpose(0, 2, 3, 1).reshape(-1, self.in_ch)
        prod = np.tensordot(Wm, xp, axes=(1, 1)).reshape(self.out_ch, k, k, *xp.shape[:1], *xp.shape[2:])
        y = np.zeros((self.out_ch, xp.shape[0], ho, wo), dtype=xp.dtype)
        for a in range(k):
            for b in range(k):
                y += prod[:, a, b, :, a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s]
        return np.ascontiguousarray(y.transpose(1, 0, 2, 3)), ("shifted", xp)

    def backward(self, dy):
        strategy, *cache, xshape = self._take_cache()
        if strategy == "im2col":
            dxp = self._backward_im2col(dy, *cache)
        else:
            dxp = self._backward_shifted(dy, *cache)
        if self.has_bias:
            self.grads["bias"] = dy.sum(axis=(0, 2, 3), dtype=np.float64).astype(dy.dtype)
        if dxp is None:
            return None
        p = self.padding
        if p:
            dxp = dxp[:, :, p:p + xshape[2], p:p + xshape[3]]
        return np.ascontiguousarray(dxp)

    def _backward_im2col(self, dy, cols, xp_shape):
        n, co, ho, wo = dy.shape
        s, k = self.stride, self.kernel
        W = self.params["weight"].astype(dy.dtype, copy=False)
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, co)
        self.grads["weight"] = (dy2.T @ cols).reshape(W.shape)
        if not self.input_grad:
            return None
        dcols = (dy2 @ W.reshape(co, -1)).reshape(n, ho, wo, self.in_ch, k, k)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for a in range(k):
            for b in range(k):
                dxp[:, :, a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s] += \
                    dcols[..., a, b].transpose(0, 3, 1, 2)
        return dxp

    def _backward_shifted(self, dy, xp):
        n, co, ho, wo = dy.shape
        s, k = self.stride, self.kernel
        W = self.params["weight"].astype(dy.dtype, copy=False)
        # dy placed at every tap offset inside the padded frame
        shifted = np.zeros((co, k, k, n) + xp.shape[2:], dtype=dy.dtype)
        dyt = dy.transpose(1, 0, 2, 3)
        for a in range(k):
            for b in range(k):
                shifted[:, a, b, :, a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s] = dyt
        shifted = shifted.reshape(co * k * k, n, *xp.shape[2:])
        dW = np.tensordot(shifted, xp, axes=([1, 2, 3], [0, 2, 3]))
        self.grads["weight"] = dW.reshape(co, k, k, self.in_ch).transpose(0, 3, 1, 2).copy()
        if not self.input_grad:
            return None
        Wm = W.transpose(0, 2, 3, 1).reshape(-1, self.in_ch)
        return np.tensordot(Wm, shifted, axes=(0, 0)).transpose(1, 0, 2, 3)


class ConvTranspose2D(_ConvBase):
    """Transposed convolution (no padding).

    Each input pixel stamps its value times the kernel into the output at
    ``stride`` spacing; overlapping stamps add. With ``stride == kernel``
    the stamps tile the output without overlap.
    """

    kind = TRANSPOSE_CONV

    def __init__(self, in_ch, out_ch, kernel, stride=1, bias=False, rng=None):
        super().__init__(in_ch, out_ch, kernel, stride=stride, padding=0, bias=bias, rng=rng)

    def fan_in(self):
        # inputs feeding one output pixel
        per_axis = -(-self.kernel // self.stride)
        return self.in_ch * per_axis * per_axis

    def output_size(self, h):
        return (h - 1) * self.stride + self.kernel

    def forward(self, x):
        x = _check_4d(x)
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"expected {self.in_ch} input channels, got {x.shape[1]}")
        n, _, h, w = x.shape
        s, k = self.stride, self.kernel
        W = self.params["weight"].astype(x.dtype, copy=False)
        if s == k:
            # disjoint blocks: one matmul, then interleave
            blocks = np.tensordot(x, W, axes=(1, 1))  # n, h, w, out, k, k
            y = blocks.transpose(0, 3, 1, 4, 2, 5).reshape(n, self.out_ch, h * k, w * k)
        else:
            y = np.zeros((n, self.out_ch, self.output_size(h), self.output_size(w)), dtype=x.dtype)
            for a in range(k):
                for b in range(k):
                    y[:, :, a:a + s * (h - 1) + 1:s, b:b + s * (w - 1) + 1:s] += \
                        np.tensordot(W[:, :, a, b], x, axes=(1, 1)).transpose(1, 0, 2, 3)
        if self.has_bias:
            y = y + self.params["bias"].astype(x.dtype, copy=False)[None, :, None, None]
        self._cache = x
        return np.ascontiguousarray(y)

    def backward(self, dy):
        x = self._take_cache()
        n, _, h, w = x.shape
        s, k = self.stride, self.kernel
        W = self.params["weight"].astype(dy.dtype, copy=False)
        if s == k:
            blocks = dy.reshape(n, self.out_ch, h, k, w, k)
            # dW[o, i, a, b] = sum_{n,h,w} blocks[n,o,h,a,w,b] * x[n,i,h,w]
            self.grads["weight"] = np.tensordot(blocks, x, axes=([0, 2, 4], [0, 2, 3])).transpose(0, 3, 1, 2)
            dx = np.tensordot(blocks, W, axes=([1, 3, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        else:
            dW = np.zeros_like(self.params["weight"], dtype=dy.dtype)
            dx = np.zeros_like(x, dtype=dy.dtype)
            for a in range(k):
                for b in range(k):
                    ds = dy[:, :, a:a + s * (h - 1) + 1:s, b:b + s * (w - 1) + 1:s]
                    dW[:, :, a, b] = np.tensordot(ds, x, axes=([0, 2, 3], [0, 2, 3]))
                    dx += np.tensordot(W[:, :, a, b], ds, axes=(0, 1)).transpose(1, 0, 2, 3)
            self.grads["weight"] = dW
        if self.has_bias:
            self.grads["bias"] = dy.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(dx)


class MaxPool2D(Layer):
    """Disjoint max pooling; trailing rows/cols that do not fill a window are dropped."""

    def __init__(self, window):
        super().__init__()
        if window < 1:
            raise ShapeError("pooling window must be >= 1")
        self.window = int(window)

    def dims(self):
        return ("pool", self.window)

    def forward(self, x):
        y, flat, shape = _maxpool(x, self.window)
        self._cache = flat, shape
        return y

    def backward(self, dy):
        flat, shape = self._take_cache()
        n, c, h, w = shape
        q = self.window
        ho, wo = h // q, w // q
        windows = np.zeros((n, c, ho, wo, q * q), dtype=dy.dtype)
        np.put_along_axis(windows, flat[..., None], dy[..., None], axis=-1)
        dx = np.zeros(shape, dtype=dy.dtype)
        dx[:, :, :ho * q, :wo * q] = (
            windows.reshape(n, c, ho, wo, q, q).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * q, wo * q))
        return dx


class ReLU(Layer):
    def dims(self):
        return ("relu",)

    def forward(self, x):
        y = np.maximum(x, 0)
        self._cache = y
        return y

    def backward(self, dy):
        y = self._take_cache()
        return dy * (y > 0)


def _maxpool(x, window):
    x = _check_4d(x)
    n, c, h, w = x.shape
    q = int(window)
    if q < 1:
        raise ShapeError("pooling window must be >= 1")
    if h < q or w < q:
        raise ShapeError(f"feature map {h}x{w} is smaller than the pooling window {q}")
    ho, wo = h // q, w // q
    win = (x[:, :, :ho * q, :wo * q].reshape(n, c, ho, q, wo, q)
           .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, q * q))
    flat = win.argmax(axis=-1)
    y = np.take_along_axis(win, flat[..., None], axis=-1)[..., 0]
    return y, flat, x.shape


def conv2d_forward(x, layer):
    """Functional convolution through a :class:`Conv2D` layer."""
    if layer.kind != CONV:
        raise ShapeError("conv2d_forward needs a conv layer")
    return layer.forward(x)


def transpose_conv2d_forward(x, layer):
    if layer.kind != TRANSPOSE_CONV:
        raise ShapeError("transpose_conv2d_forward needs a transpose-conv layer")
    return layer.forward(x)


def maxpool_forward(x, window):
    """Max pool with disjoint windows.

    Returns
    -------
    y : ndarray
        Pooled map of shape (N, C, H // window, W // window).
    argmax : ndarray of int
        Shape (N, C, H_out, W_out, 2); the (row, col) in ``x`` of each maximum.
    """
    y, flat, _ = _maxpool(x, window)
    q = int(window)
    ho, wo = y.shape[2:]
    rows = np.arange(ho)[:, None] * q + flat // q
    cols = np.arange(wo)[None, :] * q + flat % q
    return y, np.stack([rows, cols], axis=-1)


def relu_forward(x):
    x = np.asarray(x)
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def mse_loss(pred, target):
    """Mean of squared differences, accumulated in float64.

    Returns the scalar loss and its gradient w.r.t. ``pred``.
    """
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype, copy=False)


class Sequential:
    """Ordered stack of layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
            if dy is None:
                break
        return dy

    def parameters(self):
        """(layer index, name, array) for every trainable array, in layer order."""
        return [(i, name, arr) for i, layer in enumerate(self.layers)
                for name, arr in layer.params.items()]

    def gradients(self):
        return [self.layers[i].grads[name] for i, name, _ in self.parameters()]

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self


@dataclass
class AdamState:
    """Moment estimates for :func:`adam_step`; one entry per parameter array."""
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw):
        state = cls(**kw)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update in place.

    ``params`` and ``grads`` are parallel lists of arrays. Returns ``params``.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam moments must have equal length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch in Adam update: {p.shape} vs {g.shape}")
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params
