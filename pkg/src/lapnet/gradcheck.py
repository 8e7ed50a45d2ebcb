"""Central finite-difference checks of every hand-written backward pass.

Each check builds a scalar loss ``sum(out * R)`` with a fixed random ``R`` (or
the heatmap MSE for the loss and network checks), perturbs sampled entries of
the input and of every parameter by ``+-step`` and compares the numeric slope
to the analytic gradient with ``|a - fd| / max(1, |a|)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .cbam import CBAM, _channel_forward, _first_max_mask, _mlp_backward, init_channel_params
from .heatmap import mse_loss
from .network import PRESETS, Bottleneck, BottleneckSpec, Hourglass, LAPNet

STEP = 1e-5
LAYER_TOL = 1e-6
NETWORK_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    group: str
    max_rel_error: float
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _sample(size: int, count: int, rng) -> np.ndarray:
    if size <= count:
        return np.arange(size)
    return np.sort(rng.choice(size, count, replace=False))


def finite_difference_check(loss_fn: Callable[[], float], targets, rng, samples: int = 16,
                            step: float = STEP) -> tuple[float, int]:
    """Return ``(max relative error, entries checked)`` over sampled entries of each target.

    `targets` is a list of ``(array, analytic_grad)``; arrays are perturbed in place and restored.
    """
    worst, count = 0.0, 0
    for arr, grad in targets:
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in _sample(flat.size, samples, rng):
            old = flat[i]
            flat[i] = old + step
            fp = loss_fn()
            flat[i] = old - step
            fm = loss_fn()
            flat[i] = old
            fd = (fp - fm) / (2.0 * step)
            worst = max(worst, abs(gflat[i] - fd) / max(1.0, abs(gflat[i])))
            count += 1
    return worst, count


def _module_targets(module: L.Module, x: np.ndarray, rng):
    out = module.forward(x)
    r = rng.normal(size=out.shape)
    module.zero_grad()
    module.forward(x)
    dx = module.backward(r)
    grads = dict(module.named_grads())
    targets = [(x, dx)] + [(p, grads[name]) for name, p in module.named_parameters()]
    return (lambda: float(np.sum(module.forward(x) * r))), targets


class _Linear(L.Module):
    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.p = L.LinearParams(rng.normal(size=(c_out, c_in)), rng.normal(size=c_out))
        self.grads = {"weight": np.zeros((c_out, c_in)), "bias": np.zeros(c_out)}

    def own_params(self):
        return {"weight": self.p.weight, "bias": self.p.bias}

    def forward(self, x):
        out, self.cache = L.linear_forward(x, self.p)
        return out

    def backward(self, dout):
        dx, dw, db = L.linear_backward(dout, self.cache)
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx


class _Sigmoid(L.Module):
    def forward(self, x):
        out, self.cache = L.sigmoid_forward(x)
        return out

    def backward(self, dout):
        return L.sigmoid_backward(dout, self.cache)


class _Separable(L.Module):
    """Functional depthwise-separable op with batchnorm and ELU between the two stages."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.dw = L.ConvParams(rng.normal(size=(c_in, 1, 3, 3)), rng.normal(size=c_in), 1, 1, c_in)
        self.pw = L.ConvParams(rng.normal(size=(c_out, c_in, 1, 1)), rng.normal(size=c_out))
        self.bn = L.BatchNormParams.init(c_in)
        self.bn.gamma[:] = rng.uniform(0.5, 1.5, c_in)
        self.grads = {k: np.zeros_like(v) for k, v in self.own_params().items()}

    def own_params(self):
        return {"dw_kernel": self.dw.kernel, "dw_bias": self.dw.bias, "bn_gamma": self.bn.gamma,
                "bn_beta": self.bn.beta, "pw_kernel": self.pw.kernel, "pw_bias": self.pw.bias}

    def forward(self, x):
        out, self.cache = L.depthwise_separable_forward(x, self.dw, self.pw, self.bn, "elu")
        return out

    def backward(self, dout):
        dx, g = L.depthwise_separable_backward(dout, self.cache)
        for k, v in g.items():
            self.grads[k] += v
        return dx


class _ChannelGate(L.Module):
    """Channel attention gate on its own, differentiated directly."""

    def __init__(self, c, r, rng, hidden="relu"):
        super().__init__()
        self.cp = init_channel_params(c, r, rng, hidden)
        self.grads = {k: np.zeros_like(v) for k, v in self.own_params().items()}

    def own_params(self):
        return {"fc1.weight": self.cp.fc1.weight, "fc1.bias": self.cp.fc1.bias,
                "fc2.weight": self.cp.fc2.weight, "fc2.bias": self.cp.fc2.bias}

    def forward(self, x):
        gate, caches = _channel_forward(x, self.cp)
        self.cache = (x, gate, caches)
        return gate

    def backward(self, dout):
        x, gate, (c_avg, c_max) = self.cache
        n, c, h, w = x.shape
        dz = (dout * gate * (1.0 - gate)).reshape(n, c)
        d_avg = _mlp_backward(dz, c_avg, self.cp, self.grads)
        d_max = _mlp_backward(dz, c_max, self.cp, self.grads)
        mask = _first_max_mask(x.reshape(n, c, h * w), axis=2).reshape(x.shape)
        return d_avg[:, :, None, None] / (h * w) + mask * d_max[:, :, None, None]


def _normal(rng, *shape):
    return rng.normal(size=shape)


def _layer_cases(rng):
    def conv(c_in, c_out, k, stride=1, groups=1, bias=True):
        m = L.Conv2d(c_in, c_out, k, rng, stride=stride, groups=groups, bias=bias)
        if bias:
            m.p.bias[:] = rng.normal(size=c_out)
        return m

    bn = L.BatchNorm2d(3)
    bn.p.gamma[:] = rng.uniform(0.5, 1.5, 3)
    bn.p.beta[:] = rng.normal(size=3)
    bn_eval = L.BatchNorm2d(3)
    bn_eval.p.running_mean[:] = rng.normal(size=3)
    bn_eval.p.running_var[:] = rng.uniform(0.5, 2.0, 3)
    bn_eval.eval()
    return [
        ("conv3x3", conv(3, 4, 3), _normal(rng, 2, 3, 6, 6)),
        ("conv7x7_stride2", conv(2, 3, 7, stride=2), _normal(rng, 2, 2, 10, 10)),
        ("conv1x1", conv(5, 4, 1), _normal(rng, 2, 5, 4, 4)),
        ("conv_depthwise", conv(4, 4, 3, groups=4), _normal(rng, 2, 4, 5, 5)),
        ("batchnorm_train", bn, _normal(rng, 4, 3, 3, 3)),
        ("batchnorm_eval", bn_eval, _normal(rng, 2, 3, 3, 3)),
        ("relu", L.Activation("relu"), _normal(rng, 2, 3, 4, 4)),
        ("elu", L.Activation("elu"), _normal(rng, 2, 3, 4, 4)),
        ("sigmoid", _Sigmoid(), 3.0 * _normal(rng, 2, 3, 4, 4)),
        ("maxpool", L.MaxPool2d(), _normal(rng, 2, 3, 4, 6)),
        ("upsample", L.Upsample(), _normal(rng, 2, 3, 3, 2)),
        ("linear", _Linear(6, 4, rng), _normal(rng, 3, 6)),
        ("depthwise_separable", _Separable(4, 6, rng), _normal(rng, 2, 4, 5, 5)),
    ]


def _cbam_cases(rng):
    def randomize(m):
        for _, p in m.named_parameters():
            p[...] = 0.5 * rng.normal(size=p.shape)
        return m

    return [
        ("channel_gate", randomize(_ChannelGate(8, 2, rng)), _normal(rng, 2, 8, 4, 5)),
        ("cbam_relu", randomize(CBAM(8, 2, rng)), _normal(rng, 2, 8, 5, 4)),
        ("cbam_elu", randomize(CBAM(8, 4, rng, "elu")), _normal(rng, 2, 8, 4, 4)),
    ]


def _block_cases(rng):
    return [
        ("bottleneck_lightweight", Bottleneck(BottleneckSpec("lightweight", 8, 4, 8, "elu"), rng),
         _normal(rng, 2, 8, 4, 4)),
        ("bottleneck_lightweight_skip", Bottleneck(BottleneckSpec("lightweight", 4, 4, 8, "elu"), rng),
         _normal(rng, 2, 4, 4, 4)),
        ("bottleneck_standard", Bottleneck(BottleneckSpec("standard", 8, 4, 8, "relu"), rng),
         _normal(rng, 2, 8, 4, 4)),
    ]


def _hourglass_cases(rng):
    cfg = PRESETS["toy"].replace(channels=8, reduction_ratio=2)
    return [("hourglass_depth1", Hourglass(1, cfg, rng), _normal(rng, 2, 8, 4, 4))]


def _loss_check(rng, samples):
    pred, gt = _normal(rng, 2, 3, 5, 5), _normal(rng, 2, 3, 5, 5)
    vis = np.array([[True, False, True], [True, True, True]])
    _, grad = mse_loss(pred, gt, vis)
    return finite_difference_check(lambda: mse_loss(pred, gt, vis)[0], [(pred, grad)], rng, samples)


def _network_check(rng, samples):
    cfg = PRESETS["toy"].replace(input_h=32, input_w=32)
    net = LAPNet(cfg, seed=int(rng.integers(1 << 31)))
    x = _normal(rng, 2, cfg.in_channels, 32, 32)
    target = rng.uniform(0, 1, size=(2, cfg.num_keypoints) + cfg.heatmap_size)

    def loss():
        return sum(mse_loss(hm, target)[0] for hm in net.forward(x))

    net.zero_grad()
    dx = net.backward([mse_loss(hm, target)[1] for hm in net.forward(x)])
    grads = dict(net.named_grads())
    targets = [(x, dx)] + [(p, grads[name]) for name, p in net.named_parameters()]
    return finite_difference_check(loss, targets, rng, max(2, samples // 4))


GROUPS = ("layers", "cbam", "bottleneck", "hourglass", "loss", "network")


def run_gradchecks(module: str | None = None, seed: int = 0, samples: int = 16) -> list[CheckResult]:
    """Run every check whose name or group equals `module` (all when None), in a fixed order."""
    def wanted(name, group):
        return module is None or module in (name, group)

    results = []
    builders = [("layers", _layer_cases), ("cbam", _cbam_cases), ("bottleneck", _block_cases),
                ("hourglass", _hourglass_cases)]
    for group, build in builders:
        rng = np.random.default_rng([seed, GROUPS.index(group)])
        for name, mod, x in build(rng):
            if not wanted(name, group):
                continue
            loss_fn, targets = _module_targets(mod, x, rng)
            err, n = finite_difference_check(loss_fn, targets, rng, samples)
            results.append(CheckResult(name, group, err, LAYER_TOL, n))
    for name, group, fn, tol in (("mse_loss", "loss", _loss_check, LAYER_TOL),
                                 ("toy_network", "network", _network_check, NETWORK_TOL)):
        if wanted(name, group):
            err, n = fn(np.random.default_rng([seed, GROUPS.index(group)]), samples)
            results.append(CheckResult(name, group, err, tol, n))
    if module is not None and not results:
        known = sorted(set(GROUPS) | {r for r in check_names()})
        raise KeyError(f"no gradient check named {module!r}; choose from {', '.join(known)}")
    return results


def check_names() -> list[str]:
    rng = np.random.default_rng(0)
    names = [n for b in (_layer_cases, _cbam_cases, _block_cases, _hourglass_cases) for n, _, _ in b(rng)]
    return names + ["mse_loss", "toy_network"]


def render_results(results: list[CheckResult]) -> str:
    lines = ["check\tgroup\tmax_rel_error\ttolerance\tentries\tstatus"]
    for r in results:
        lines.append(f"{r.name}\t{r.group}\t{r.max_rel_error:.3e}\t{r.tolerance:.0e}\t{r.checked}\t"
                     f"{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
