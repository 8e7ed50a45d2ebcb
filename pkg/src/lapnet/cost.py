"""Analytic parameter and FLOP counting.

A FLOP here is one multiply-accumulate, as in the usual convolution cost
formulas (kernel element times output position). For a square ``K x K``
output map the standard-conv cost is ``K^2 * C_in * C_out * D_k^2``; on
non-square maps ``K^2`` is replaced by ``H_out * W_out``.

Convolution weights are counted with those formulas. Biases, batchnorm and
linear layers are itemized as separate records so the totals equal the number
of trainable scalars of an instantiated network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .network import NetworkConfig


def params_standard(dk: int, c_in: int, c_out: int) -> int:
    return dk * dk * c_in * c_out


def params_depthwise(dk: int, c_in: int) -> int:
    return dk * dk * c_in


def params_pointwise(c_in: int, c_out: int) -> int:
    return 1 * 1 * c_in * c_out


def params_depthwise_separable(dk: int, c_in: int, c_out: int) -> int:
    return params_depthwise(dk, c_in) + params_pointwise(c_in, c_out)


def flops_standard(k: int, dk: int, c_in: int, c_out: int, k_w: int | None = None) -> int:
    """``k`` is the output side; pass `k_w` for a non-square ``k x k_w`` output."""
    return k * (k if k_w is None else k_w) * c_in * c_out * dk * dk


def flops_single_channel(k: int, dk: int, k_w: int | None = None) -> int:
    return k * (k if k_w is None else k_w) * 1 * dk * dk


def flops_depthwise(k: int, dk: int, c_in: int, k_w: int | None = None) -> int:
    """All depthwise filters together: one single-channel pass per input channel."""
    return c_in * flops_single_channel(k, dk, k_w)


def flops_pointwise(k: int, c_in: int, c_out: int, k_w: int | None = None) -> int:
    return k * (k if k_w is None else k_w) * c_in * c_out


def flops_depthwise_separable(k: int, dk: int, c_in: int, c_out: int, k_w: int | None = None) -> int:
    area = k * (k if k_w is None else k_w)
    return area * c_in * (c_out + dk * dk)


@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    flops: int

    def __post_init__(self):
        if self.params < 0 or self.flops < 0:
            raise ValueError(f"negative cost for {self.name}")


@dataclass
class CostReport:
    name: str
    input_hw: tuple[int, int]
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(layer.flops for layer in self.layers)

    def subtotal(self, kinds) -> tuple[int, int]:
        sel = [layer for layer in self.layers if layer.kind in kinds]
        return sum(x.params for x in sel), sum(x.flops for x in sel)

    def by_prefix(self, depth: int = 1) -> dict[str, tuple[int, int]]:
        """Totals grouped by the first `depth` components of the layer name."""
        out: dict[str, list[int]] = {}
        for layer in self.layers:
            key = ".".join(layer.name.split(".")[:depth])
            acc = out.setdefault(key, [0, 0])
            acc[0] += layer.params
            acc[1] += layer.flops
        return {k: (v[0], v[1]) for k, v in out.items()}


CONV_KINDS = ("conv", "depthwise", "pointwise")


class _Walker:
    def __init__(self, cfg: NetworkConfig, elementwise: bool):
        self.cfg = cfg
        self.elementwise = elementwise
        self.layers: list[LayerCost] = []

    def add(self, name, kind, params, flops=0):
        self.layers.append(LayerCost(name, kind, params, flops))

    def elem(self, name, count):
        if self.elementwise:
            self.add(name, "elementwise", 0, count)

    def conv(self, name, c_in, c_out, k, h, w, bias=False, groups=1, stride=1):
        ho, wo = (h + 2 * ((k - 1) // 2) - k) // stride + 1, (w + 2 * ((k - 1) // 2) - k) // stride + 1
        if groups > 1:
            self.add(f"{name}.weight", "depthwise", params_depthwise(k, c_in), flops_depthwise(ho, k, c_in, wo))
        elif k == 1:
            self.add(f"{name}.weight", "pointwise", params_pointwise(c_in, c_out),
                     flops_pointwise(ho, c_in, c_out, wo))
        else:
            self.add(f"{name}.weight", "conv", params_standard(k, c_in, c_out),
                     flops_standard(ho, k, c_in, c_out, wo))
        if bias:
            self.add(f"{name}.bias", "bias", c_out, 0)
            self.elem(f"{name}.bias_add", c_out * ho * wo)
        return ho, wo

    def conv_bn_act(self, name, c_in, c_out, k, h, w, act=True, groups=1, stride=1):
        ho, wo = self.conv(f"{name}.conv", c_in, c_out, k, h, w, groups=groups, stride=stride)
        self.add(f"{name}.bn", "batchnorm", 2 * c_out, 0)
        self.elem(f"{name}.bn_apply", c_out * ho * wo)
        if act:
            self.elem(f"{name}.act", c_out * ho * wo)
        return ho, wo

    def bottleneck(self, name, c_in, c_out, h, w):
        cfg, mid = self.cfg, c_out // 2
        self.conv_bn_act(f"{name}.reduce", c_in, mid, 1, h, w)
        if cfg.block_kind == "standard":
            self.conv_bn_act(f"{name}.spatial", mid, mid, 3, h, w)
        else:
            self.conv_bn_act(f"{name}.dw", mid, mid, 3, h, w, act=cfg.dw_activation, groups=mid)
            self.conv_bn_act(f"{name}.pw", mid, mid, 1, h, w)
        self.conv_bn_act(f"{name}.expand", mid, c_out, 1, h, w, act=False)
        if c_in != c_out:
            self.conv_bn_act(f"{name}.skip", c_in, c_out, 1, h, w, act=False)
        self.elem(f"{name}.residual_add", c_out * h * w)
        self.elem(f"{name}.act", c_out * h * w)

    def blocks(self, name, c_in, c_out, h, w):
        for i in range(self.cfg.blocks_per_level):
            self.bottleneck(f"{name}.{i}", c_in if i == 0 else c_out, c_out, h, w)

    def cbam(self, name, c, h, w):
        hid = c // self.cfg.reduction_ratio
        # the shared MLP runs once per pooled descriptor (avg and max)
        self.add(f"{name}.fc1.weight", "linear", c * hid, 2 * c * hid)
        self.add(f"{name}.fc1.bias", "bias", hid, 0)
        self.add(f"{name}.fc2.weight", "linear", hid * c, 2 * hid * c)
        self.add(f"{name}.fc2.bias", "bias", c, 0)
        self.add(f"{name}.spatial.weight", "conv", params_standard(7, 2, 1), flops_standard(h, 7, 2, 1, w))
        self.add(f"{name}.spatial.bias", "bias", 1, 0)
        self.elem(f"{name}.pool_and_gate", 5 * c * h * w)

    def hourglass(self, name, depth, h, w):
        c = self.cfg.channels
        self.blocks(f"{name}.up1", c, c, h, w)
        self.elem(f"{name}.pool", c * h * w)
        self.blocks(f"{name}.low1", c, c, h // 2, w // 2)
        if depth > 1:
            self.hourglass(f"{name}.low2", depth - 1, h // 2, w // 2)
        else:
            self.blocks(f"{name}.low2", c, c, h // 2, w // 2)
        self.blocks(f"{name}.low3", c, c, h // 2, w // 2)
        self.elem(f"{name}.merge", c * h * w)
        if self.cfg.cbam_inside:
            self.cbam(f"{name}.cbam", c, h, w)

    def network(self, h, w):
        cfg = self.cfg
        s0, s1 = cfg.stem_channels
        c, j = cfg.channels, cfg.num_keypoints
        h, w = self.conv_bn_act("stem.conv", cfg.in_channels, s0, 7, h, w, stride=2)
        self.blocks("stem.block1", s0, s1, h, w)
        self.elem("stem.pool", s1 * h * w)
        h, w = h // 2, w // 2
        self.blocks("stem.block2", s1, s1, h, w)
        self.blocks("stem.block3", s1, c, h, w)
        for i in range(cfg.stacks):
            p = f"stack{i}"
            self.hourglass(f"{p}.hg", cfg.depth, h, w)
            self.blocks(f"{p}.res", c, c, h, w)
            self.conv_bn_act(f"{p}.lin", c, c, 1, h, w)
            if cfg.cbam_between_stacks:
                self.cbam(f"{p}.cbam", c, h, w)
            self.conv(f"{p}.head", c, j, 1, h, w, bias=True)
            if i < cfg.stacks - 1:
                self.conv(f"{p}.merge_feat", c, c, 1, h, w, bias=True)
                self.conv(f"{p}.merge_hm", j, c, 1, h, w, bias=True)
                self.elem(f"{p}.merge_add", 2 * c * h * w)


def count_network(cfg: NetworkConfig, input_hw: tuple[int, int] | None = None,
                  include_elementwise: bool = False, name: str = "network") -> CostReport:
    """Walk the architecture described by `cfg` and cost every layer at the given input size."""
    h, w = input_hw or (cfg.input_h, cfg.input_w)
    if (h, w) != (cfg.input_h, cfg.input_w):
        cfg = cfg.replace(input_h=h, input_w=w)  # re-validates divisibility
    walker = _Walker(cfg, include_elementwise)
    walker.network(h, w)
    return CostReport(name, (h, w), walker.layers)


def reduction_percent(ours: float, baseline: float) -> float:
    if baseline <= 0:
        raise ValueError("baseline total must be positive")
    return 100.0 * (1.0 - ours / baseline)


@dataclass
class Comparison:
    params_ours: float
    params_baseline: float
    flops_ours: float
    flops_baseline: float

    @property
    def params_reduction(self) -> float:
        return reduction_percent(self.params_ours, self.params_baseline)

    @property
    def flops_reduction(self) -> float:
        return reduction_percent(self.flops_ours, self.flops_baseline)


def compare(ours: CostReport, baseline: CostReport) -> Comparison:
    return Comparison(ours.total_params, baseline.total_params, ours.total_flops, baseline.total_flops)


# Reference two-stack totals (parameters, FLOPs) used for the self-check.
REFERENCE_TOTALS = {
    "lap2": (2.30e6, 3.7e9),
    "hourglass2-standard": (6.70e6, 9.08e9),
}


def reference_comparison() -> Comparison:
    (pa, fa), (pb, fb) = REFERENCE_TOTALS["lap2"], REFERENCE_TOTALS["hourglass2-standard"]
    return Comparison(pa, pb, fa, fb)


# ---------------------------------------------------------------------------
# Rendering.


def render_table(report: CostReport, depth: int = 2) -> str:
    rows = report.by_prefix(depth)
    width = max([len(k) for k in rows] + [10])
    lines = [f"{report.name} @ {report.input_hw[0]}x{report.input_hw[1]}",
             f"{'block':<{width}}  {'params':>12}  {'MACs':>16}"]
    for k, (p, f) in rows.items():
        lines.append(f"{k:<{width}}  {p:>12,}  {f:>16,}")
    conv_p, conv_f = report.subtotal(CONV_KINDS)
    lines.append(f"{'conv weights':<{width}}  {conv_p:>12,}  {conv_f:>16,}")
    lines.append(f"{'total':<{width}}  {report.total_params:>12,}  {report.total_flops:>16,}")
    return "\n".join(lines)


def render_comparison(cmp: Comparison, label: str = "comparison") -> str:
    return (f"{label}: params {cmp.params_ours:,.0f} vs {cmp.params_baseline:,.0f} "
            f"-> {cmp.params_reduction:.2f}% fewer; "
            f"MACs {cmp.flops_ours:,.0f} vs {cmp.flops_baseline:,.0f} -> {cmp.flops_reduction:.2f}% fewer")


def render_tsv(report: CostReport, comparisons: dict[str, Comparison] | None = None) -> str:
    """Tab-separated document: layer records, then totals, then optional comparison records."""
    lines = ["record\tname\ttype\tparams\tflops"]
    for layer in report.layers:
        lines.append(f"layer\t{layer.name}\t{layer.kind}\t{layer.params}\t{layer.flops}")
    conv_p, conv_f = report.subtotal(CONV_KINDS)
    lines.append(f"total\tconv_weights\tsubtotal\t{conv_p}\t{conv_f}")
    other_p, other_f = report.total_params - conv_p, report.total_flops - conv_f
    lines.append(f"total\tother\tsubtotal\t{other_p}\t{other_f}")
    lines.append(f"total\t{report.name}\ttotal\t{report.total_params}\t{report.total_flops}")
    for label, cmp in (comparisons or {}).items():
        lines.append(f"compare\t{label}\tparams_reduction_pct\t{cmp.params_reduction:.2f}\t")
        lines.append(f"compare\t{label}\tflops_reduction_pct\t\t{cmp.flops_reduction:.2f}")
    return "\n".join(lines) + "\n"
