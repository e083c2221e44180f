"""Layers with explicit forward/backward passes.

All layers work on float64 NCHW arrays.  ``forward`` caches whatever the
matching ``backward`` needs; ``backward`` returns the input gradient and
stores parameter gradients in ``layer.grads`` (overwritten on every call).
"""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE, ShapeError, as_tensor

TRAIN = "train"
INFERENCE = "inference"
MODES = (TRAIN, INFERENCE)


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


NCHW = "NCHW"
CNHW = "CNHW"


def _check_layout(layout: str) -> str:
    if layout not in (NCHW, CNHW):
        raise ValueError(f"layout must be {NCHW!r} or {CNHW!r}, got {layout!r}")
    return layout


def _expect_ndim(x: np.ndarray, ndim: int, what: str) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{what} expects a {ndim}-D input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral conv output size: input {size}, kernel {k}, "
            f"stride {stride}, padding {pad}"
        )
    return span // stride + 1


def _pad(x: np.ndarray, pad: int, channels_first: bool = False) -> np.ndarray:
    """Zero-pad H and W; with ``channels_first`` the result is laid out C, N, H, W."""
    n, c, h, w = x.shape
    src = x.transpose(1, 0, 2, 3) if channels_first else x
    if pad == 0:
        return np.ascontiguousarray(src)
    shape = (c, n) if channels_first else (n, c)
    xp = np.zeros(shape + (h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    xp[:, :, pad : pad + h, pad : pad + w] = src
    return xp


def _im2col(xt: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of shape (C*k*k, N*ho*wo) from a padded C, N, H, W input."""
    c, n = xt.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im(cols, shape, k, stride, pad, ho, wo, channels_first=False) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(c, k, k, n, ho, wo)
    gp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    gx = gp[:, :, pad : pad + h, pad : pad + w]
    return gx if channels_first else np.ascontiguousarray(gx.transpose(1, 0, 2, 3))


class Conv2D:
    """Square-kernel cross-correlation without bias.

    Weights have shape ``(out_ch, in_ch, k, k)`` with ``k`` odd.  ``padding``
    defaults to ``(k - 1) // 2`` ("same" output size at stride 1).  A layer
    built with ``trainable=False`` reports zero weight gradients.

    ``layout="CNHW"`` makes the layer consume and produce channel-major
    activations, which saves a transpose per pass when convolutions are
    chained inside a network.
    """

    def __init__(self, weights, stride: int = 1, padding: int | None = None,
                 trainable: bool = True, layout: str = NCHW):
        self.layout = _check_layout(layout)
        weights = as_tensor(weights)
        _expect_ndim(weights, 4, "Conv2D weights")
        k = weights.shape[2]
        if weights.shape[3] != k or k % 2 == 0:
            raise ShapeError(f"conv kernel must be square with odd size, got {weights.shape}")
        if stride < 1:
            raise ValueError("stride must be positive")
        self.weights = weights
        self.stride = int(stride)
        self.padding = (k - 1) // 2 if padding is None else int(padding)
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        self.trainable = bool(trainable)
        self.grads = {"weight": np.zeros_like(weights)}
        self._cache = None

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weights}

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    def _geometry(self, shape):
        if len(shape) != 4:
            raise ShapeError(f"Conv2D expects a 4-D input, got shape {tuple(shape)}")
        n, c, h, w = shape
        if self.layout == CNHW:
            n, c = c, n
        k = self.kernel_size
        if c != self.in_channels:
            raise ShapeError(
                f"channel mismatch: input has {c} channels, kernel {self.weights.shape} expects {self.in_channels}"
            )
        if min(h, w) + 2 * self.padding < k:
            raise ShapeError(f"padded input {h}x{w} (padding {self.padding}) smaller than kernel {k}x{k}")
        return _out_size(h, k, self.stride, self.padding), _out_size(w, k, self.stride, self.padding)

    def _single_plane(self) -> bool:
        return self.in_channels == 1 and self.out_channels == 1 and self.stride == 1

    def forward(self, x: np.ndarray, mode: str = TRAIN) -> np.ndarray:
        ho, wo = self._geometry(x.shape)
        k, s = self.kernel_size, self.stride
        x = as_tensor(x)
        cnhw = self.layout == CNHW
        n = x.shape[1] if cnhw else x.shape[0]
        if self._single_plane():
            if cnhw:
                x = x.reshape(n, 1, *x.shape[2:])
            xp = _pad(x, self.padding)
            w = self.weights[0, 0]
            out = np.zeros((n, 1, ho, wo), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    out += w[i, j] * xp[:, :, i : i + ho, j : j + wo]
            self._cache = (x.shape, xp, ho, wo)
            return out.reshape(1, n, ho, wo) if cnhw else out
        if cnhw:
            xt = _pad(x.transpose(1, 0, 2, 3), self.padding, channels_first=True)
            shape = (n, x.shape[0]) + x.shape[2:]
        else:
            xt = _pad(x, self.padding, channels_first=True)
            shape = x.shape
        cols = _im2col(xt, k, s, ho, wo)
        out = (self.weights.reshape(self.out_channels, -1) @ cols).reshape(self.out_channels, n, ho, wo)
        self._cache = (shape, cols, ho, wo)
        if cnhw:
            return out
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = True):
        if self._cache is None:
            raise RuntimeError("Conv2D.backward called before forward")
        shape, saved, ho, wo = self._cache
        n = shape[0]
        cnhw = self.layout == CNHW
        expected = (self.out_channels, n, ho, wo) if cnhw else (n, self.out_channels, ho, wo)
        if grad_out.shape != expected:
            raise ShapeError(f"grad_out shape {grad_out.shape} does not match conv output {expected}")
        k, s, p = self.kernel_size, self.stride, self.padding

        if self._single_plane():
            xp = saved
            g = grad_out.reshape(n, 1, ho, wo)
            if self.trainable:
                gw = np.empty((k, k), dtype=DTYPE)
                for i in range(k):
                    for j in range(k):
                        gw[i, j] = np.vdot(g, xp[:, :, i : i + ho, j : j + wo])
                self.grads["weight"] = gw.reshape(self.weights.shape)
            else:
                self.grads["weight"] = np.zeros_like(self.weights)
            if not need_input_grad:
                return None
            w = self.weights[0, 0]
            gp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gp[:, :, i : i + ho, j : j + wo] += w[i, j] * g
            gx = np.ascontiguousarray(gp[:, :, p : p + shape[2], p : p + shape[3]])
            return gx.reshape(1, n, *gx.shape[2:]) if cnhw else gx

        cols = saved
        if cnhw:
            g2 = grad_out.reshape(self.out_channels, -1)
        else:
            g2 = grad_out.transpose(1, 0, 2, 3).reshape(self.out_channels, -1)
        if self.trainable:
            self.grads["weight"] = (g2 @ cols.T).reshape(self.weights.shape)
        else:
            self.grads["weight"] = np.zeros_like(self.weights)
        if not need_input_grad:
            return None
        gcols = self.weights.reshape(self.out_channels, -1).T @ g2
        return _col2im(gcols, shape, k, s, p, ho, wo, channels_first=cnhw)


def conv_forward(layer: Conv2D, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def conv_backward(layer: Conv2D, x: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weights)`` for ``sum(grad_out * conv(x))``."""
    layer.forward(x)
    grad_input = layer.backward(grad_out)
    return grad_input, layer.grads["weight"]


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNorm2D:
    """Per-channel batch normalization with running statistics.

    Running statistics follow ``running = m * running + (1 - m) * batch``
    with the biased batch variance, the same variance used to normalize.
    """

    def __init__(self, channels: int, epsilon: float = 1e-5, momentum: float = 0.9,
                 layout: str = NCHW):
        self.layout = _check_layout(layout)
        if not 0.0 < momentum < 1.0:
            raise ValueError("running momentum must lie in (0, 1)")
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.gamma = np.ones(channels, dtype=DTYPE)
        self.beta = np.zeros(channels, dtype=DTYPE)
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.grads = {"gamma": np.zeros(channels), "beta": np.zeros(channels)}
        self._cache = None

    @property
    def _sum(self) -> str:
        return "cnhw->c" if self.layout == CNHW else "nchw->c"

    @property
    def _dot(self) -> str:
        return "cnhw,cnhw->c" if self.layout == CNHW else "nchw,nchw->c"

    @property
    def _bcast(self):
        return (slice(None), None, None, None) if self.layout == CNHW else (slice(None), None, None)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def forward(self, x: np.ndarray, mode: str = TRAIN, update_running: bool = True) -> np.ndarray:
        _check_mode(mode)
        _expect_ndim(x, 4, "BatchNorm2D")
        ch_axis = 0 if self.layout == CNHW else 1
        if x.shape[ch_axis] != self.channels:
            raise ShapeError(f"BatchNorm2D has {self.channels} channels, input shape {x.shape}")
        if mode == TRAIN:
            if x.shape[1 - ch_axis] < 2:
                raise ValueError("batch normalization in train mode needs a batch of at least 2")
            m = x.size // self.channels
            mean = np.einsum(self._sum, x) / m
            var = np.maximum(np.einsum(self._dot, x, x) / m - mean * mean, 0.0)
            if update_running:
                r = self.momentum
                self.running_mean *= r
                self.running_mean += (1.0 - r) * mean
                self.running_var *= r
                self.running_var += (1.0 - r) * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        scale = self.gamma * inv_std
        out = x * scale[self._bcast]
        out += (self.beta - mean * scale)[self._bcast]
        self._cache = (mode, x, mean.copy(), inv_std)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("BatchNorm2D.backward called before forward")
        mode, x, mean, inv_std = self._cache
        if grad_out.shape != x.shape:
            raise ShapeError(f"grad_out shape {grad_out.shape} does not match {x.shape}")
        # sum(g * xhat) expanded so that xhat is never materialised
        sum_g = np.einsum(self._sum, grad_out)
        sum_gx = np.einsum(self._dot, grad_out, x)
        sum_gxhat = inv_std * (sum_gx - mean * sum_g)
        self.grads = {"gamma": sum_gxhat, "beta": sum_g}
        scale = self.gamma * inv_std
        dx = grad_out * scale[self._bcast]
        if mode == INFERENCE:
            return dx
        m = x.size // self.channels
        k1 = scale * inv_std * sum_gxhat / m
        k0 = -scale * sum_g / m + k1 * mean
        dx -= x * k1[self._bcast]
        dx += k0[self._bcast]
        return dx


def batchnorm_forward(layer: BatchNorm2D, x: np.ndarray, mode: str = TRAIN) -> np.ndarray:
    return layer.forward(x, mode)


# ---------------------------------------------------------------------------
# stateless layers
# ---------------------------------------------------------------------------

class ReLU:
    params: dict = {}

    def __init__(self):
        self.grads = {}
        self._mask = None

    def forward(self, x: np.ndarray, mode: str = TRAIN) -> np.ndarray:
        out = np.maximum(x, 0.0)
        self._mask = out > 0
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if grad_out.shape != self._mask.shape:
            raise ShapeError(f"grad_out shape {grad_out.shape} does not match {self._mask.shape}")
        return grad_out * self._mask


class AvgPool2D:
    """Average pooling; trailing rows/columns that do not fill a window are dropped."""

    params: dict = {}

    def __init__(self, window: int = 2, stride: int | None = None):
        if window < 1:
            raise ValueError("window must be positive")
        self.window = int(window)
        self.stride = self.window if stride is None else int(stride)
        if self.stride < 1:
            raise ValueError("stride must be positive")
        self.grads = {}
        self._shape = None

    def _geometry(self, shape):
        if len(shape) != 4:
            raise ShapeError(f"AvgPool2D expects a 4-D input, got shape {tuple(shape)}")
        h, w = shape[2:]
        if h < self.window or w < self.window:
            raise ShapeError(f"input {h}x{w} smaller than pooling window {self.window}")
        return (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1

    def forward(self, x: np.ndarray, mode: str = TRAIN) -> np.ndarray:
        ho, wo = self._geometry(x.shape)
        self._shape = x.shape
        k, s = self.window, self.stride
        n, c = x.shape[:2]
        out = np.zeros((n, c, ho, wo), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                out += x[:, :, i : i + s * ho : s, j : j + s * wo : s]
        return out / (k * k)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        shape = self._shape
        ho, wo = self._geometry(shape)
        n, c = shape[:2]
        if grad_out.shape != (n, c, ho, wo):
            raise ShapeError(f"grad_out shape {grad_out.shape} does not match pool output {(n, c, ho, wo)}")
        k, s = self.window, self.stride
        gx = np.zeros(shape, dtype=DTYPE)
        g = grad_out / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + s * ho : s, j : j + s * wo : s] += g
        return gx


class GlobalAvgPool:
    """Spatial mean per channel: (N, C, H, W) -> (N, C)."""

    params: dict = {}

    def __init__(self, layout: str = NCHW):
        self.layout = _check_layout(layout)
        self.grads = {}
        self._shape = None

    def forward(self, x: np.ndarray, mode: str = TRAIN) -> np.ndarray:
        _expect_ndim(x, 4, "GlobalAvgPool")
        self._shape = x.shape
        out = x.mean(axis=(2, 3))
        return np.ascontiguousarray(out.T) if self.layout == CNHW else out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        a, b, h, w = self._shape
        expected = (b, a) if self.layout == CNHW else (a, b)
        if grad_out.shape != expected:
            raise ShapeError(f"grad_out shape {grad_out.shape} does not match {expected}")
        g = grad_out.T if self.layout == CNHW else grad_out
        return np.broadcast_to(g[:, :, None, None] / (h * w), self._shape).copy()


class Dense:
    """Fully connected layer ``y = x @ W.T + b`` with W of shape (n_out, n_in)."""

    def __init__(self, weights, biases):
        self.weights = as_tensor(weights)
        self.biases = as_tensor(biases)
        _expect_ndim(self.weights, 2, "Dense weights")
        if self.biases.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias shape {self.biases.shape} does not match weights {self.weights.shape}")
        self.grads = {"weight": np.zeros_like(self.weights), "bias": np.zeros_like(self.biases)}
        self._x = None

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weights, "bias": self.biases}

    @property
    def n_inputs(self) -> int:
        return self.weights.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.weights.shape[0]

    def forward(self, x: np.ndarray, mode: str = TRAIN) -> np.ndarray:
        _expect_ndim(x, 2, "Dense")
        if x.shape[1] != self.n_inputs:
            raise ShapeError(f"Dense expects {self.n_inputs} input features, got shape {x.shape}")
        self._x = x
        return x @ self.weights.T + self.biases

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if grad_out.shape != (self._x.shape[0], self.n_outputs):
            raise ShapeError(f"grad_out shape {grad_out.shape} does not match {(self._x.shape[0], self.n_outputs)}")
        self.grads = {"weight": grad_out.T @ self._x, "bias": grad_out.sum(axis=0)}
        return grad_out @ self.weights


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` and its gradient w.r.t. ``logits``."""
    _expect_ndim(logits, 2, "softmax_cross_entropy")
    labels = np.asarray(labels)
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if n and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    rows = np.arange(n)
    loss = -float(log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return loss, grad / n
