"""Training loop with intermediate supervision, validation and checkpointing."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .data import AugmentConfig, ToyDatasetSpec, augment, generate_toy_sample, split_indices
from .heatmap import DEFAULT_SIGMA, KeypointSet, decode, encode, mse_loss, schema_for
from .metrics import EvalResult, evaluate
from .network import ConfigError, LAPNet, NetworkConfig, read_keyvalues
from .optim import AdamState, PlateauScheduler, adam_step

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 40
    factor: float = 0.2
    patience: int = 5
    min_delta: float = 1e-6
    seed: int = 0
    sigma: float = DEFAULT_SIGMA
    init_seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: ToyDatasetSpec = field(default_factory=ToyDatasetSpec)

    def __post_init__(self):
        if self.lr < 0 or not 0 < self.factor < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("need lr >= 0, 0 < factor < 1, patience >= 1 and batch_size >= 1")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


TRAIN_PRESETS = {
    # optimizer settings used for the full-size two-stack runs
    "full": TrainConfig(),
    "toy": TrainConfig(lr=2e-3, epochs=15, patience=3, data=ToyDatasetSpec()),
}


def _flatten(obj, prefix=""):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            yield from _flatten(v, f"{prefix}{f.name}.")
        else:
            yield prefix + f.name, v


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    return repr(v)


def train_config_to_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in _flatten(cfg))


def _coerce(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(like, tuple):
        return tuple((float if isinstance(like[0], float) else int)(x) for x in raw.split(","))
    return float(raw) if isinstance(like, float) else int(raw)


def train_config_from_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values = read_keyvalues(text)
    base = base or TrainConfig()
    if "preset" in values:
        name = values.pop("preset")
        if name not in TRAIN_PRESETS:
            raise ConfigError(f"unknown training preset {name!r}")
        base = TRAIN_PRESETS[name]
    groups: dict[str, dict] = {"": {}, "augment": {}, "data": {}}
    for key, raw in values.items():
        group, _, name = key.rpartition(".")
        if group not in groups:
            raise ConfigError(f"unknown training config key {key!r}")
        target = base if not group else getattr(base, group)
        if not hasattr(target, name) or dataclasses.is_dataclass(getattr(target, name)):
            raise ConfigError(f"unknown training config key {key!r}")
        try:
            groups[group][name] = _coerce(raw, getattr(target, name))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    return base.replace(augment=dataclasses.replace(base.augment, **groups["augment"]),
                        data=dataclasses.replace(base.data, **groups["data"]), **groups[""])


def load_train_config(path_or_preset) -> TrainConfig:
    p = Path(path_or_preset)
    if p.is_file():
        return train_config_from_text(p.read_text())
    if str(path_or_preset) in TRAIN_PRESETS:
        return TRAIN_PRESETS[str(path_or_preset)]
    raise ConfigError(f"no training config file or preset named {str(path_or_preset)!r}")


def dataset_spec_from_text(text: str, base: ToyDatasetSpec | None = None) -> ToyDatasetSpec:
    base = base or ToyDatasetSpec()
    values = read_keyvalues(text)
    kw = {}
    for key, raw in values.items():
        if not hasattr(base, key) or key == "margin":
            raise ConfigError(f"unknown dataset key {key!r}")
        try:
            kw[key] = _coerce(raw, getattr(base, key))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    return dataclasses.replace(base, **kw)


def load_dataset_spec(path_or_name) -> ToyDatasetSpec:
    """A key = value dataset file, or ``toy`` for the default synthetic set."""
    p = Path(path_or_name)
    if p.is_file():
        return dataset_spec_from_text(p.read_text())
    if str(path_or_name) == "toy":
        return ToyDatasetSpec()
    raise ConfigError(f"no dataset spec file named {str(path_or_name)!r}")


# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W)
    keypoints: list[KeypointSet]  # image pixel coordinates
    indices: list[int]


def load_toy(spec: ToyDatasetSpec, indices=None) -> Dataset:
    indices = list(range(spec.num_samples)) if indices is None else list(indices)
    samples = [generate_toy_sample(spec, i) for i in indices]
    return Dataset(np.stack([s[0] for s in samples]), [s[1] for s in samples], indices)


def heatmap_targets(kps: list[KeypointSet], cfg: NetworkConfig, sigma: float):
    h, w = cfg.heatmap_size
    stride = cfg.input_h / h
    scaled = [k.scaled(1.0 / stride) for k in kps]
    return encode(scaled, h, w, sigma).maps, np.array([k.visible for k in kps])


def stacked_loss(heatmaps, target, vis) -> tuple[float, list[np.ndarray], list[float]]:
    """Unweighted sum of per-stack MSE, its per-stack gradients and the per-stack losses."""
    losses, grads = [], []
    for hm in heatmaps:
        loss, g = mse_loss(hm, target, vis)
        losses.append(loss)
        grads.append(g)
    return sum(losses), grads, losses


def predict(net: LAPNet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Final-stack heatmaps in eval mode."""
    net.eval()
    out = [net.forward(images[i:i + batch_size])[-1] for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def predict_keypoints(net: LAPNet, images: np.ndarray, batch_size: int = 16) -> list[KeypointSet]:
    """Decoded keypoints in image pixel coordinates, with peak confidences."""
    stride = net.cfg.input_h / net.cfg.heatmap_size[0]
    return [k.scaled(stride) for k in decode(predict(net, images, batch_size))]


def evaluate_model(net: LAPNet, data: Dataset, batch_size: int = 16) -> EvalResult:
    cfg = net.cfg
    schema = schema_for(cfg.schema, cfg.num_keypoints)
    preds = predict_keypoints(net, data.images, batch_size)
    area = float(cfg.input_h * cfg.input_w)
    diag = float(np.hypot(cfg.input_h, cfg.input_w))
    return evaluate(preds, data.keypoints, area, schema.oks_k, diag)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_loss_last: float
    lr: float
    seconds: float

    def line(self, record_time: bool) -> str:
        secs = f"{self.seconds:.3f}" if record_time else "-"
        return f"{self.epoch} {self.train_loss:.9e} {self.val_loss:.9e} {self.lr:.9e} {secs}"


@dataclass
class TrainResult:
    net: LAPNet
    history: list[EpochRecord]
    best: ckpt_io.Checkpoint
    last: ckpt_io.Checkpoint
    log_lines: list[str]


def _leaves(module, prefix=""):
    kids = module.children()
    if not kids:
        yield prefix.rstrip("."), module
    for name, child in kids:
        yield from _leaves(child, f"{prefix}{name}.")


def first_nonfinite_layer(net: LAPNet, x: np.ndarray) -> str | None:
    """Re-run the forward pass and name the first parameterized layer whose output is not finite."""
    found = []
    leaves = list(_leaves(net))
    for name, m in leaves:
        def traced(inp, _fwd=m.forward, _name=name):
            out = _fwd(inp)
            if not found and not np.all(np.isfinite(out)):
                found.append(_name)
            return out
        m.forward = traced
    try:
        with np.errstate(all="ignore"):
            net.forward(x)
    finally:
        for _, m in leaves:
            del m.forward
    return found[0] if found else None


def _first_nonfinite_grad(net: LAPNet) -> str | None:
    for name, g in net.named_grads():
        if not np.all(np.isfinite(g)):
            return name
    return None


def _batch(data: Dataset, rows: np.ndarray, tcfg: TrainConfig, epoch: int, schema):
    a = tcfg.augment
    if not (a.scale or a.rotate or a.flip or a.jitter or a.translate):
        return data.images[rows], [data.keypoints[r] for r in rows]
    imgs, kps = [], []
    for r in rows:
        # keyed by sample index so the stream does not depend on batch composition
        rng = np.random.default_rng([tcfg.seed, epoch, data.indices[r]])
        im, k = augment(data.images[r], data.keypoints[r], tcfg.augment, rng, schema)
        imgs.append(im)
        kps.append(k)
    return np.stack(imgs), kps


def fit_batch(net: LAPNet, images: np.ndarray, kps: list[KeypointSet], steps: int, lr: float,
              tcfg: TrainConfig | None = None) -> list[float]:
    """Repeated Adam steps on one fixed batch; returns the loss before each step."""
    tcfg = tcfg or TrainConfig()
    target, vis = heatmap_targets(kps, net.cfg, tcfg.sigma)
    params, grads, state = dict(net.named_parameters()), dict(net.named_grads()), AdamState()
    net.train()
    losses = []
    for _ in range(steps):
        net.zero_grad()
        loss, dhm, _ = stacked_loss(net.forward(images), target, vis)
        net.backward(dhm)
        adam_step(params, grads, state, lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
        losses.append(loss)
    return losses


def validation_loss(net: LAPNet, data: Dataset, tcfg: TrainConfig) -> tuple[float, float]:
    """Stack-summed and final-stack validation loss, averaged over batches weighted by size."""
    net.eval()
    total = last = 0.0
    for i in range(0, len(data.images), tcfg.batch_size):
        target, vis = heatmap_targets(data.keypoints[i:i + tcfg.batch_size], net.cfg, tcfg.sigma)
        hms = net.forward(data.images[i:i + tcfg.batch_size])
        loss, _, per_stack = stacked_loss(hms, target, vis)
        total += loss * len(target)
        last += per_stack[-1] * len(target)
    n = len(data.images)
    return total / n, last / n


def train(net_cfg: NetworkConfig, tcfg: TrainConfig, out_dir: str | Path | None = None,
          record_time: bool = False) -> TrainResult:
    """Train on the synthetic dataset described by ``tcfg.data``.

    Writes ``epochs.log`` (``epoch train_loss val_loss lr seconds``), ``val_detail.log``,
    ``best.ckpt`` and ``last.ckpt`` into `out_dir` when given.
    """
    spec = tcfg.data
    if (spec.num_keypoints, spec.image_size, spec.image_size) != (
            net_cfg.num_keypoints, net_cfg.input_h, net_cfg.input_w):
        raise ConfigError(f"dataset ({spec.image_size}px, {spec.num_keypoints} joints) does not match network "
                          f"({net_cfg.input_h}x{net_cfg.input_w}, {net_cfg.num_keypoints} joints)")
    if net_cfg.in_channels != 1:
        raise ConfigError("the synthetic dataset is single-channel; set in_channels = 1")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    schema = schema_for(net_cfg.schema, net_cfg.num_keypoints)
    train_idx, val_idx = split_indices(spec)
    train_data, val_data = load_toy(spec, train_idx), load_toy(spec, val_idx)
    if not val_idx:
        raise ConfigError("validation split is empty; use more samples")

    net = LAPNet(net_cfg, seed=tcfg.init_seed)
    params = dict(net.named_parameters())
    grads = dict(net.named_grads())
    state = AdamState()
    sched = PlateauScheduler(tcfg.lr, tcfg.factor, tcfg.patience, tcfg.min_delta)
    extra = {f"train.{k}": _fmt(v) for k, v in _flatten(tcfg)}
    history, lines, detail = [], [], []
    best = last = None
    best_val = float("inf")
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        net.train()
        lr = sched.lr
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(train_idx))
        running = 0.0
        for b in range(0, len(order), tcfg.batch_size):
            rows = order[b:b + tcfg.batch_size]
            imgs, kps = _batch(train_data, rows, tcfg, epoch, schema)
            target, vis = heatmap_targets(kps, net_cfg, tcfg.sigma)
            net.zero_grad()
            with np.errstate(all="ignore"):
                loss, dhm, _ = stacked_loss(net.forward(imgs), target, vis)
            if not np.isfinite(loss):
                layer = first_nonfinite_layer(net, imgs) or "heatmap loss"
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}; "
                                    f"first non-finite output in layer {layer}")
            net.backward(dhm)
            bad = _first_nonfinite_grad(net)
            if bad is not None:
                raise TrainingError(f"non-finite gradient for {bad} at epoch {epoch}, step {step}")
            adam_step(params, grads, state, lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
            running += loss * len(rows)
            step += 1
        train_loss = running / len(order)
        val_loss, val_last = validation_loss(net, val_data, tcfg)
        sched.step(val_loss)
        rec = EpochRecord(epoch, train_loss, val_loss, val_last, lr, time.perf_counter() - t0)
        history.append(rec)
        lines.append(rec.line(record_time))
        detail.append(f"{epoch} {val_loss:.9e} {val_last:.9e}")
        log.info("epoch %d train %.6f val %.6f lr %.3g", epoch, train_loss, val_loss, lr)
        last = ckpt_io.from_network(net, epoch, {"seed": tcfg.seed, "next_epoch": epoch + 1}, extra)
        if val_loss < best_val:
            best_val, best = val_loss, last
        if out is not None:
            ckpt_io.save_checkpoint(last, out / "last.ckpt")
            if best is last:
                ckpt_io.save_checkpoint(best, out / "best.ckpt")
            (out / "epochs.log").write_text("\n".join(lines) + "\n")
            (out / "val_detail.log").write_text("\n".join(detail) + "\n")
    return TrainResult(net, history, best, last, lines)
