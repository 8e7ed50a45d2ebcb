"""Convolutional block attention: channel gate then spatial gate, applied in sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .tensor import ShapeError, elementwise_mul, reduce, shape_of


@dataclass
class ChannelAttentionParams:
    """Shared two-layer MLP (C -> C/r -> C) applied to both pooled descriptors."""

    fc1: L.LinearParams
    fc2: L.LinearParams
    hidden_activation: str = "relu"

    @property
    def channels(self) -> int:
        return self.fc1.weight.shape[1]

    @property
    def hidden(self) -> int:
        return self.fc1.weight.shape[0]


@dataclass
class SpatialAttentionParams:
    conv: L.ConvParams

    def __post_init__(self):
        if self.conv.kernel.shape != (1, 2, 7, 7) or self.conv.padding != 3:
            raise ShapeError("spatial attention needs a 7x7 kernel on 2 channels with padding 3")


def init_channel_params(c: int, reduction: int, rng: np.random.Generator,
                        hidden_activation: str = "relu") -> ChannelAttentionParams:
    if reduction < 1 or c % reduction:
        raise ValueError(f"reduction ratio {reduction} must divide channel count {c}")
    hid = c // reduction
    return ChannelAttentionParams(
        L.LinearParams(L.he_normal(rng, (hid, c), c), np.zeros(hid)),
        L.LinearParams(L.he_normal(rng, (c, hid), hid), np.zeros(c)),
        hidden_activation,
    )


def init_spatial_params(rng: np.random.Generator) -> SpatialAttentionParams:
    return SpatialAttentionParams(L.ConvParams(L.he_normal(rng, (1, 2, 7, 7), 98), np.zeros(1), 1, 3))


def _mlp_forward(v, p: ChannelAttentionParams):
    h, c1 = L.linear_forward(v, p.fc1)
    a, ca = L.activation_forward(h, p.hidden_activation)
    out, c2 = L.linear_forward(a, p.fc2)
    return out, (c1, ca, c2)


def _mlp_backward(dout, cache, p: ChannelAttentionParams, grads):
    c1, ca, c2 = cache
    da, dw2, db2 = L.linear_backward(dout, c2)
    dh = L.activation_backward(da, ca, p.hidden_activation)
    dv, dw1, db1 = L.linear_backward(dh, c1)
    grads["fc1.weight"] += dw1
    grads["fc1.bias"] += db1
    grads["fc2.weight"] += dw2
    grads["fc2.bias"] += db2
    return dv


# Saturated sigmoids round to 0 or 1 in f64; clamp so gates stay strictly inside (0, 1).
_GATE_LO, _GATE_HI = np.finfo(np.float64).tiny, np.nextafter(1.0, 0.0)


def _gate(logits):
    return np.clip(L.sigmoid(logits), _GATE_LO, _GATE_HI)


def _spatial_mean(f):
    """Mean over sorted pixel values, so the result does not depend on pixel order."""
    n, c, _, _ = shape_of(f)
    return np.sort(np.ascontiguousarray(f).reshape(n, c, -1), axis=2).mean(axis=2)


def _channel_forward(f, p):
    n, c, _, _ = shape_of(f)
    if c != p.channels:
        raise ShapeError(f"channel attention expects {p.channels} channels, got {c}")
    avg = _spatial_mean(f)
    mx = reduce(f, "hw", "max").reshape(n, c)
    z_avg, c_avg = _mlp_forward(avg, p)
    z_max, c_max = _mlp_forward(mx, p)
    gate = _gate(z_avg + z_max).reshape(n, c, 1, 1)
    return gate, (c_avg, c_max)


def channel_attention(f: np.ndarray, p: ChannelAttentionParams) -> np.ndarray:
    """Per-channel gate in (0, 1), shape N x C x 1 x 1."""
    return _channel_forward(f, p)[0]


def apply_channel_attention(f: np.ndarray, gate: np.ndarray) -> np.ndarray:
    n, c, _, _ = shape_of(f)
    if shape_of(gate) not in ((n, c, 1, 1), (1, c, 1, 1)):
        raise ShapeError(f"channel gate must be {n}x{c}x1x1, got {gate.shape}")
    return elementwise_mul(f, gate)


def _pooled_maps(f):
    return np.concatenate([reduce(f, "c", "mean"), reduce(f, "c", "max")], axis=1)


def spatial_attention(f: np.ndarray, p: SpatialAttentionParams) -> np.ndarray:
    """Per-pixel gate in (0, 1), shape N x 1 x H x W."""
    logits, _ = L.conv2d_forward(_pooled_maps(f), p.conv)
    return _gate(logits)


def cbam_forward(f: np.ndarray, cp: ChannelAttentionParams, sp: SpatialAttentionParams):
    """Return ``(refined, cache)`` where refined = spatial_gate(F') * F' and F' = channel_gate(F) * F."""
    gate_c, c_ch = _channel_forward(f, cp)
    f1 = apply_channel_attention(f, gate_c)
    pooled = _pooled_maps(f1)
    logits, c_conv = L.conv2d_forward(pooled, sp.conv)
    gate_s = _gate(logits)
    out = elementwise_mul(f1, gate_s)
    return out, (f, gate_c, c_ch, f1, c_conv, gate_s)


def new_grads(cp: ChannelAttentionParams, sp: SpatialAttentionParams) -> dict[str, np.ndarray]:
    return {
        "fc1.weight": np.zeros_like(cp.fc1.weight), "fc1.bias": np.zeros_like(cp.fc1.bias),
        "fc2.weight": np.zeros_like(cp.fc2.weight), "fc2.bias": np.zeros_like(cp.fc2.bias),
        "spatial.weight": np.zeros_like(sp.conv.kernel), "spatial.bias": np.zeros_like(sp.conv.bias),
    }


def cbam_backward(dout: np.ndarray, cache, cp: ChannelAttentionParams, sp: SpatialAttentionParams,
                  grads: dict[str, np.ndarray] | None = None):
    """Return ``(dF, grads)``; parameter gradients are accumulated into `grads`."""
    if cache is None:
        raise L.MissingCacheError("cbam_backward called before forward")
    if grads is None:
        grads = new_grads(cp, sp)
    f, gate_c, (c_avg, c_max), f1, c_conv, gate_s = cache
    n, c, h, w = f.shape

    # spatial gate
    d_f1 = dout * gate_s
    d_gs = (dout * f1).sum(axis=1, keepdims=True)
    d_logits = d_gs * gate_s * (1.0 - gate_s)
    d_pooled, dk, db = L.conv2d_backward(d_logits, c_conv)
    grads["spatial.weight"] += dk
    grads["spatial.bias"] += db
    d_f1 += d_pooled[:, :1] / c
    d_f1 += _first_max_mask(f1, axis=1) * d_pooled[:, 1:2]

    # channel gate
    df = d_f1 * gate_c
    d_gc = (d_f1 * f).sum(axis=(2, 3))
    dz = d_gc * (gate_c * (1.0 - gate_c)).reshape(n, c)
    d_avg = _mlp_backward(dz, c_avg, cp, grads)
    d_max = _mlp_backward(dz, c_max, cp, grads)
    df += d_avg[:, :, None, None] / (h * w)
    mask = _first_max_mask(f.reshape(n, c, h * w), axis=2).reshape(f.shape)
    df += mask * d_max[:, :, None, None]
    return df, grads


def _first_max_mask(a, axis):
    # max-pool gradient goes to the first maximal element only
    arg = np.expand_dims(a.argmax(axis=axis), axis)
    shape = [1] * a.ndim
    shape[axis] = a.shape[axis]
    return (np.arange(a.shape[axis]).reshape(shape) == arg).astype(a.dtype)


class CBAM(L.Module):
    def __init__(self, c: int, reduction: int, rng: np.random.Generator, hidden_activation: str = "relu"):
        super().__init__()
        self.cp = init_channel_params(c, reduction, rng, hidden_activation)
        self.sp = init_spatial_params(rng)
        self.grads = new_grads(self.cp, self.sp)
        self.cache = None

    def own_params(self):
        return {
            "fc1.weight": self.cp.fc1.weight, "fc1.bias": self.cp.fc1.bias,
            "fc2.weight": self.cp.fc2.weight, "fc2.bias": self.cp.fc2.bias,
            "spatial.weight": self.sp.conv.kernel, "spatial.bias": self.sp.conv.bias,
        }

    def forward(self, x):
        out, self.cache = cbam_forward(x, self.cp, self.sp)
        return out

    def backward(self, dout):
        dx, _ = cbam_backward(dout, self.cache, self.cp, self.sp, self.grads)
        return dx
