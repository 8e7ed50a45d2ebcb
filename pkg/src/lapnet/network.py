"""Bottleneck blocks, the recursive hourglass and the stacked network with intermediate supervision."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers as L
from .cbam import CBAM


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BottleneckSpec:
    kind: str  # "standard" | "lightweight"
    in_channels: int
    mid_channels: int
    out_channels: int
    activation: str = "elu"
    dw_activation: bool = True  # bn + activation between depthwise and pointwise stages


@dataclass(frozen=True)
class NetworkConfig:
    stacks: int = 2
    depth: int = 4
    channels: int = 256
    block_kind: str = "lightweight"
    activation: str = "elu"
    cbam_between_stacks: bool = True
    cbam_inside: bool = True
    reduction_ratio: int = 16
    num_keypoints: int = 17
    input_h: int = 256
    input_w: int = 192
    in_channels: int = 3
    stem_channels: tuple[int, int] = (64, 128)
    blocks_per_level: int = 1
    cbam_hidden_activation: str = "relu"
    dw_activation: bool = True
    schema: str = "coco17"

    def __post_init__(self):
        self.validate()

    @property
    def heatmap_size(self) -> tuple[int, int]:
        return self.input_h // 4, self.input_w // 4

    def validate(self):
        positive = ("stacks", "depth", "channels", "reduction_ratio", "num_keypoints",
                    "input_h", "input_w", "in_channels", "blocks_per_level")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.block_kind not in ("standard", "lightweight"):
            raise ConfigError(f"block_kind must be standard or lightweight, got {self.block_kind!r}")
        if self.activation not in ("relu", "elu"):
            raise ConfigError(f"activation must be relu or elu, got {self.activation!r}")
        unit = 4 * 2 ** self.depth
        if self.input_h % unit or self.input_w % unit:
            raise ConfigError(
                f"input {self.input_h}x{self.input_w} must be divisible by {unit} for depth {self.depth}")
        if (self.cbam_inside or self.cbam_between_stacks) and self.channels % self.reduction_ratio:
            raise ConfigError(f"reduction_ratio {self.reduction_ratio} must divide channels {self.channels}")
        if len(self.stem_channels) != 2 or min(self.stem_channels) < 2:
            raise ConfigError("stem_channels needs two widths >= 2")
        from .heatmap import SCHEMAS, schema_for  # local import: heatmap does not depend on network
        if self.schema in SCHEMAS and schema_for(self.schema, self.num_keypoints).num_joints != self.num_keypoints:
            raise ConfigError(f"schema {self.schema} has {SCHEMAS[self.schema].num_joints} joints, "
                              f"config asks for {self.num_keypoints}")

    def replace(self, **kw) -> "NetworkConfig":
        return dataclasses.replace(self, **kw)


PRESETS: dict[str, NetworkConfig] = {
    # Widths chosen so the counted total lands close to 2.30M (see README).
    "lap2": NetworkConfig(channels=224, stem_channels=(64, 192)),
    "hourglass2-standard": NetworkConfig(
        channels=256, block_kind="standard", activation="relu",
        cbam_between_stacks=False, cbam_inside=False),
    "toy": NetworkConfig(
        stacks=1, depth=2, channels=32, reduction_ratio=8, num_keypoints=4, input_h=64, input_w=64,
        in_channels=1, stem_channels=(8, 16), schema="toy"),
}


def build_lap_config(preset: str) -> NetworkConfig:
    try:
        return PRESETS[preset]
    except KeyError:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# Textual key = value config files.


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(like, tuple):
        return tuple(int(x) for x in raw.split(","))
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def read_keyvalues(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def config_from_mapping(values: dict[str, str], base: NetworkConfig | None = None) -> NetworkConfig:
    base = base or NetworkConfig()
    fields = {f.name for f in dataclasses.fields(NetworkConfig)}
    unknown = set(values) - fields
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        kw = {k: _parse_value(v, getattr(base, k)) for k, v in values.items()}
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return base.replace(**kw)


def config_to_text(cfg: NetworkConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))


def config_from_text(text: str) -> NetworkConfig:
    values = read_keyvalues(text)
    base = None
    if "preset" in values:
        base = build_lap_config(values.pop("preset"))
    return config_from_mapping(values, base)


def load_config(path_or_preset: str | Path) -> NetworkConfig:
    """Read a config file, or resolve a preset name when no such file exists."""
    p = Path(path_or_preset)
    if p.is_file():
        return config_from_text(p.read_text())
    if str(path_or_preset) in PRESETS:
        return PRESETS[str(path_or_preset)]
    raise ConfigError(f"no config file or preset named {str(path_or_preset)!r}")


def save_config(cfg: NetworkConfig, path: str | Path):
    Path(path).write_text(config_to_text(cfg))


# ---------------------------------------------------------------------------
# Modules.


class Bottleneck(L.Module):
    """1x1 reduce, spatial 3x3 (standard or depthwise-separable), 1x1 expand, plus a skip path."""

    def __init__(self, spec: BottleneckSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        act, cin, mid, cout = spec.activation, spec.in_channels, spec.mid_channels, spec.out_channels
        stages = [("reduce", L.conv_bn_act(cin, mid, 1, rng, act))]
        if spec.kind == "standard":
            stages.append(("spatial", L.conv_bn_act(mid, mid, 3, rng, act)))
        elif spec.kind == "lightweight":
            stages.append(("dw", L.conv_bn_act(mid, mid, 3, rng, act if spec.dw_activation else "identity",
                                               groups=mid)))
            stages.append(("pw", L.conv_bn_act(mid, mid, 1, rng, act)))
        else:
            raise ConfigError(f"unknown block kind {spec.kind!r}")
        stages.append(("expand", L.conv_bn_act(mid, cout, 1, rng, "identity")))
        self.main = L.Sequential(*(m for _, m in stages), names=[n for n, _ in stages])
        self.skip = None if cin == cout else L.conv_bn_act(cin, cout, 1, rng, "identity")
        self.act = L.Activation(act)

    def children(self):
        kids = self.main.children()
        if self.skip is not None:
            kids.append(("skip", self.skip))
        return kids

    def forward(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise L.ShapeError(f"bottleneck expects {self.spec.in_channels} channels, got {x.shape[1]}")
        s = x if self.skip is None else self.skip.forward(x)
        return self.act.forward(self.main.forward(x) + s)

    def backward(self, dout):
        d = self.act.backward(dout)
        dx = self.main.backward(d)
        return dx + (d if self.skip is None else self.skip.backward(d))


def bottleneck_forward(x: np.ndarray, block: Bottleneck) -> np.ndarray:
    return block.forward(x)


def _blocks(n: int, c_in: int, c_out: int, cfg: NetworkConfig, rng) -> L.Sequential:
    specs = [BottleneckSpec(cfg.block_kind, c_in if i == 0 else c_out, c_out // 2, c_out,
                            cfg.activation, cfg.dw_activation) for i in range(n)]
    return L.Sequential(*(Bottleneck(s, rng) for s in specs))


class Hourglass(L.Module):
    """One recursion level: skip branch at this resolution plus pooled branch, merged by addition."""

    def __init__(self, depth: int, cfg: NetworkConfig, rng: np.random.Generator):
        super().__init__()
        c, nb = cfg.channels, cfg.blocks_per_level
        self.depth = depth
        self.up1 = _blocks(nb, c, c, cfg, rng)
        self.pool = L.MaxPool2d()
        self.low1 = _blocks(nb, c, c, cfg, rng)
        self.low2 = Hourglass(depth - 1, cfg, rng) if depth > 1 else _blocks(nb, c, c, cfg, rng)
        self.low3 = _blocks(nb, c, c, cfg, rng)
        self.up = L.Upsample()
        self.cbam = CBAM(c, cfg.reduction_ratio, rng, cfg.cbam_hidden_activation) if cfg.cbam_inside else None

    def children(self):
        kids = [("up1", self.up1), ("low1", self.low1), ("low2", self.low2), ("low3", self.low3)]
        if self.cbam is not None:
            kids.append(("cbam", self.cbam))
        return kids

    def forward(self, x):
        if x.shape[2] % 2 ** self.depth or x.shape[3] % 2 ** self.depth:
            raise L.ShapeError(f"hourglass of depth {self.depth} needs dims divisible by "
                               f"{2 ** self.depth}, got {x.shape[2]}x{x.shape[3]}")
        up1 = self.up1.forward(x)
        low = self.low3.forward(self.low2.forward(self.low1.forward(self.pool.forward(x))))
        out = up1 + self.up.forward(low)
        return out if self.cbam is None else self.cbam.forward(out)

    def backward(self, dout):
        if self.cbam is not None:
            dout = self.cbam.backward(dout)
        d_low = self.up.backward(dout)
        d_low = self.pool.backward(self.low1.backward(self.low2.backward(self.low3.backward(d_low))))
        return self.up1.backward(dout) + d_low


class Stack(L.Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator, last: bool):
        super().__init__()
        c, j = cfg.channels, cfg.num_keypoints
        self.hg = Hourglass(cfg.depth, cfg, rng)
        self.res = _blocks(cfg.blocks_per_level, c, c, cfg, rng)
        self.lin = L.conv_bn_act(c, c, 1, rng, cfg.activation)
        self.cbam = CBAM(c, cfg.reduction_ratio, rng, cfg.cbam_hidden_activation) if cfg.cbam_between_stacks else None
        self.head = L.Conv2d(c, j, 1, rng)
        self.merge_feat = None if last else L.Conv2d(c, c, 1, rng)
        self.merge_hm = None if last else L.Conv2d(j, c, 1, rng)

    def children(self):
        kids = [("hg", self.hg), ("res", self.res), ("lin", self.lin)]
        if self.cbam is not None:
            kids.append(("cbam", self.cbam))
        kids.append(("head", self.head))
        if self.merge_feat is not None:
            kids += [("merge_feat", self.merge_feat), ("merge_hm", self.merge_hm)]
        return kids

    def forward(self, x):
        y = self.lin.forward(self.res.forward(self.hg.forward(x)))
        if self.cbam is not None:
            y = self.cbam.forward(y)
        hm = self.head.forward(y)
        nxt = None if self.merge_feat is None else x + self.merge_feat.forward(y) + self.merge_hm.forward(hm)
        return hm, nxt

    def backward(self, d_hm, d_next):
        dx = 0.0
        dy = 0.0
        if self.merge_feat is not None and d_next is not None:
            dx = d_next
            dy = self.merge_feat.backward(d_next)
            d_hm = d_hm + self.merge_hm.backward(d_next)
        dy = dy + self.head.backward(d_hm)
        if self.cbam is not None:
            dy = self.cbam.backward(dy)
        return dx + self.hg.backward(self.res.backward(self.lin.backward(dy)))


class LAPNet(L.Module):
    """Stem, then `stacks` hourglass stacks each emitting a heatmap tensor."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        s0, s1 = cfg.stem_channels
        stem = [
            L.conv_bn_act(cfg.in_channels, s0, 7, rng, cfg.activation, stride=2),
            _blocks(1, s0, s1, cfg, rng),
            L.MaxPool2d(),
            _blocks(1, s1, s1, cfg, rng),
            _blocks(1, s1, cfg.channels, cfg, rng),
        ]
        self.stem = L.Sequential(*stem, names=["conv", "block1", "pool", "block2", "block3"])
        self.stacks = [Stack(cfg, rng, last=i == cfg.stacks - 1) for i in range(cfg.stacks)]

    def children(self):
        return [("stem", self.stem)] + [(f"stack{i}", s) for i, s in enumerate(self.stacks)]

    def forward(self, x) -> list[np.ndarray]:
        n, c, h, w = x.shape
        if (c, h, w) != (self.cfg.in_channels, self.cfg.input_h, self.cfg.input_w):
            raise L.ShapeError(f"expected input {self.cfg.in_channels}x{self.cfg.input_h}x{self.cfg.input_w}, "
                               f"got {c}x{h}x{w}")
        x = self.stem.forward(x)
        heatmaps = []
        for stack in self.stacks:
            hm, x = stack.forward(x)
            heatmaps.append(hm)
        return heatmaps

    def backward(self, d_heatmaps: list[np.ndarray]) -> np.ndarray:
        d_next = None
        for stack, d_hm in zip(reversed(self.stacks), reversed(d_heatmaps)):
            d_next = stack.backward(d_hm, d_next)
        return self.stem.backward(d_next)

    def state_dict(self) -> dict[str, np.ndarray]:
        """Trainable parameters and batchnorm buffers, keyed by dotted name."""
        d = dict(self.named_parameters())
        d.update(self.named_buffers())
        return d

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = self.state_dict()
        missing, extra = set(own) - set(state), set(state) - set(own)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, v in own.items():
            if v.shape != state[k].shape:
                raise ConfigError(f"shape mismatch for {k}: network {v.shape}, state {state[k].shape}")
            v[...] = state[k]


def network_forward(x: np.ndarray, net: LAPNet) -> list[np.ndarray]:
    return net.forward(x)
