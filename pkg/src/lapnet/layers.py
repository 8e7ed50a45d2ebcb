"""Primitive layers with hand-written forward and backward passes.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``. Convolution is cross-correlation (no kernel flip).
Summation order inside each op is fixed so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, shape_of


class MissingCacheError(RuntimeError):
    pass


@dataclass
class ConvParams:
    kernel: np.ndarray  # (C_out, C_in // groups, k, k)
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ShapeError(f"kernel must be (C_out, C_in/groups, k, k), got {self.kernel.shape}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ValueError("stride and groups must be positive, padding non-negative")
        c_out = self.kernel.shape[0]
        if self.groups > 1:
            if self.kernel.shape[1] != 1 or c_out != self.groups:
                raise ValueError("only depthwise grouping (groups == C_in == C_out) is supported")
        if self.bias is not None and self.bias.shape != (c_out,):
            raise ShapeError(f"bias must have shape ({c_out},), got {self.bias.shape}")

    @property
    def ksize(self) -> int:
        return self.kernel.shape[2]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def depthwise(self) -> bool:
        return self.groups > 1


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def init(cls, c: int, epsilon: float = 1e-5, momentum: float = 0.1) -> "BatchNormParams":
        return cls(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), epsilon, momentum)


@dataclass
class LinearParams:
    weight: np.ndarray  # (out_features, in_features)
    bias: np.ndarray | None = None


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x: np.ndarray, p: ConvParams):
    n, c, h, w = shape_of(x)
    if c != p.in_channels:
        raise ShapeError(f"conv expects {p.in_channels} input channels, got {c} (input {x.shape})")
    k, s = p.ksize, p.stride
    ho, wo = conv_output_size(h, k, s, p.padding), conv_output_size(w, k, s, p.padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} too small for kernel {k} with padding {p.padding}")
    xp = _pad(x, p.padding)
    if p.depthwise:
        out = np.zeros((n, c, ho, wo), dtype=DTYPE)
        kern = p.kernel[:, 0]
        for i in range(k):
            for j in range(k):
                out += kern[None, :, i, j, None, None] * xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    elif k == 1 and s == 1:
        out = np.tensordot(p.kernel[:, :, 0, 0], xp, axes=(1, 1)).transpose(1, 0, 2, 3)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        out = np.tensordot(win, p.kernel, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    return out, (x.shape, xp, p)


def conv2d_backward(dout: np.ndarray, cache):
    """Return ``(dx, dkernel, dbias)``; ``dbias`` is None when the layer has no bias."""
    if cache is None:
        raise MissingCacheError("conv2d_backward called before forward")
    x_shape, xp, p = cache
    n, c, ho, wo = dout.shape
    k, s, pad = p.ksize, p.stride, p.padding
    dxp = np.zeros_like(xp)
    if p.depthwise:
        kern = p.kernel[:, 0]
        dk = np.zeros_like(p.kernel)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + s * ho, s), slice(j, j + s * wo, s))
                dk[:, 0, i, j] = np.einsum("nchw,nchw->c", dout, xp[sl])
                dxp[sl] += kern[None, :, i, j, None, None] * dout
    elif k == 1 and s == 1:
        w2 = p.kernel[:, :, 0, 0]
        dk = np.tensordot(dout, xp, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        dxp = np.ascontiguousarray(np.tensordot(w2, dout, axes=(0, 1)).transpose(1, 0, 2, 3))
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        dk = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
        dwin = np.tensordot(dout, p.kernel, axes=(1, 0))  # (N, Ho, Wo, C_in, k, k)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + x_shape[2], pad:pad + x_shape[3]] if pad else dxp
    db = dout.sum(axis=(0, 2, 3)) if p.bias is not None else None
    return np.ascontiguousarray(dx), dk, db


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, mode: str = "train"):
    n, c, h, w = shape_of(x)
    if c != p.gamma.shape[0]:
        raise ShapeError(f"batchnorm expects {p.gamma.shape[0]} channels, got {c}")
    if mode == "train":
        m = n * h * w
        if m == 0:
            raise ShapeError("batchnorm in train mode needs a non-empty batch")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        unbiased = var * m / (m - 1) if m > 1 else var
        p.running_mean *= 1.0 - p.momentum
        p.running_mean += p.momentum * mu
        p.running_var *= 1.0 - p.momentum
        p.running_var += p.momentum * unbiased
    elif mode == "eval":
        mu, var = p.running_mean, p.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = p.gamma[None, :, None, None] * xhat + p.beta[None, :, None, None]
    return out, (xhat, inv_std, p.gamma, mode)


def batchnorm_backward(dout: np.ndarray, cache):
    """Return ``(dx, dgamma, dbeta)``."""
    if cache is None:
        raise MissingCacheError("batchnorm_backward called before forward")
    xhat, inv_std, gamma, mode = cache
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    g = (gamma * inv_std)[None, :, None, None]
    if mode == "eval":
        return dout * g, dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = g * (dout - dbeta[None, :, None, None] / m - xhat * dgamma[None, :, None, None] / m)
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def elu_forward(x, alpha: float = 1.0):
    out = np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))
    return out, (x, out, alpha)


def elu_backward(dout, cache):
    x, out, alpha = cache
    return dout * np.where(x > 0, 1.0, out + alpha)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function; saturates to exactly 0 or 1 only for |x| beyond ~37."""
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid_forward(x):
    out = sigmoid(x)
    return out, out


def sigmoid_backward(dout, cache):
    return dout * cache * (1.0 - cache)


def activation_forward(x, kind: str, alpha: float = 1.0):
    if kind == "relu":
        return relu_forward(x)
    if kind == "elu":
        return elu_forward(x, alpha)
    if kind == "identity":
        return x, None
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(dout, cache, kind: str):
    if kind == "relu":
        return relu_backward(dout, cache)
    if kind == "elu":
        return elu_backward(dout, cache)
    return dout


def maxpool2d_forward(x: np.ndarray):
    """2x2 max pooling with stride 2. The cache holds the flat argmax within each window."""
    n, c, h, w = shape_of(x)
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2d_backward(dout, cache):
    x_shape, idx = cache
    n, c, h, w = x_shape
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    return dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


def upsample_nearest(x: np.ndarray, factor: int = 2) -> np.ndarray:
    shape_of(x)
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_backward(dout: np.ndarray, factor: int = 2) -> np.ndarray:
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def linear_forward(x: np.ndarray, p: LinearParams):
    """``x`` is (batch, in_features)."""
    if x.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"linear expects (*, {p.weight.shape[1]}), got {x.shape}")
    out = x @ p.weight.T
    if p.bias is not None:
        out = out + p.bias
    return out, (x, p)


def linear_backward(dout, cache):
    x, p = cache
    dw = dout.T @ x
    db = dout.sum(axis=0) if p.bias is not None else None
    return dout @ p.weight, dw, db


def depthwise_separable_forward(x, depthwise: ConvParams, pointwise: ConvParams,
                                bn: BatchNormParams | None = None, activation: str = "identity",
                                mode: str = "train", alpha: float = 1.0):
    """Depthwise conv, optional batchnorm + activation, then pointwise 1x1 conv."""
    if not depthwise.depthwise and depthwise.in_channels != 1:
        raise ValueError("first stage must be a depthwise convolution")
    if pointwise.ksize != 1 or pointwise.groups != 1:
        raise ValueError("second stage must be a pointwise (1x1) convolution")
    h, c_dw = conv2d_forward(x, depthwise)
    c_bn = None
    if bn is not None:
        h, c_bn = batchnorm_forward(h, bn, mode)
    h, c_act = activation_forward(h, activation, alpha)
    out, c_pw = conv2d_forward(h, pointwise)
    return out, (c_dw, c_bn, c_act, activation, c_pw)


def depthwise_separable_backward(dout, cache):
    """Return ``(dx, grads)`` with grads keyed ``dw_kernel``, ``pw_kernel``, ... ."""
    c_dw, c_bn, c_act, activation, c_pw = cache
    grads = {}
    d, grads["pw_kernel"], grads["pw_bias"] = conv2d_backward(dout, c_pw)
    d = activation_backward(d, c_act, activation)
    if c_bn is not None:
        d, grads["bn_gamma"], grads["bn_beta"] = batchnorm_backward(d, c_bn)
    dx, grads["dw_kernel"], grads["dw_bias"] = conv2d_backward(d, c_dw)
    return dx, grads


# ---------------------------------------------------------------------------
# Stateful wrappers used to assemble networks.


class Module:
    """Base for layers that own parameters and cache their last forward pass."""

    def __init__(self):
        self.training = True

    def children(self) -> list[tuple[str, "Module"]]:
        return []

    def own_params(self) -> dict[str, np.ndarray]:
        return {}

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_parameters(self, prefix: str = ""):
        for k, v in self.own_params().items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for k, v in self.own_buffers().items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def named_grads(self, prefix: str = ""):
        for k, v in getattr(self, "grads", {}).items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_grads(f"{prefix}{name}.")

    def zero_grad(self):
        for _, g in self.named_grads():
            g[...] = 0.0

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(v.size for _, v in self.named_parameters())

    def __call__(self, x):
        return self.forward(x)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=None, groups=1, bias=True):
        super().__init__()
        if padding is None:
            padding = (k - 1) // 2
        fan_in = (c_in // groups) * k * k
        kernel = he_normal(rng, (c_out, c_in // groups, k, k), fan_in)
        self.p = ConvParams(kernel, np.zeros(c_out) if bias else None, stride, padding, groups)
        self.grads = {name: np.zeros_like(v) for name, v in self.own_params().items()}
        self.cache = None

    def own_params(self):
        d = {"weight": self.p.kernel}
        if self.p.bias is not None:
            d["bias"] = self.p.bias
        return d

    def forward(self, x):
        out, self.cache = conv2d_forward(x, self.p)
        return out

    def backward(self, dout):
        dx, dk, db = conv2d_backward(dout, self.cache)
        self.grads["weight"] += dk
        if db is not None:
            self.grads["bias"] += db
        return dx


class BatchNorm2d(Module):
    def __init__(self, c, epsilon=1e-5, momentum=0.1):
        super().__init__()
        self.p = BatchNormParams.init(c, epsilon, momentum)
        self.grads = {"weight": np.zeros(c), "bias": np.zeros(c)}
        self.cache = None

    def own_params(self):
        return {"weight": self.p.gamma, "bias": self.p.beta}

    def own_buffers(self):
        return {"running_mean": self.p.running_mean, "running_var": self.p.running_var}

    def forward(self, x):
        out, self.cache = batchnorm_forward(x, self.p, "train" if self.training else "eval")
        return out

    def backward(self, dout):
        dx, dg, db = batchnorm_backward(dout, self.cache)
        self.grads["weight"] += dg
        self.grads["bias"] += db
        return dx


class Activation(Module):
    def __init__(self, kind: str, alpha: float = 1.0):
        super().__init__()
        self.kind, self.alpha = kind, alpha
        self.cache = None

    def forward(self, x):
        out, self.cache = activation_forward(x, self.kind, self.alpha)
        return out

    def backward(self, dout):
        return activation_backward(dout, self.cache, self.kind)


class MaxPool2d(Module):
    def forward(self, x):
        out, self.cache = maxpool2d_forward(x)
        return out

    def backward(self, dout):
        return maxpool2d_backward(dout, self.cache)


class Upsample(Module):
    def forward(self, x):
        return upsample_nearest(x)

    def backward(self, dout):
        return upsample_backward(dout)


class Sequential(Module):
    def __init__(self, *layers: Module, names: list[str] | None = None):
        super().__init__()
        self.layers = list(layers)
        self.names = names or [str(i) for i in range(len(layers))]

    def children(self):
        return list(zip(self.names, self.layers))

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def conv_bn_act(c_in, c_out, k, rng, activation, stride=1, groups=1, alpha=1.0) -> Sequential:
    """Bias-free conv followed by batchnorm and an activation (``identity`` to skip it)."""
    layers = [Conv2d(c_in, c_out, k, rng, stride=stride, groups=groups, bias=False), BatchNorm2d(c_out)]
    names = ["conv", "bn"]
    if activation != "identity":
        layers.append(Activation(activation, alpha))
        names.append("act")
    return Sequential(*layers, names=names)
