"""Single-person keypoint metrics: PCK, OKS and OKS-thresholded average precision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .heatmap import KeypointSet

OKS_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
PCK_TAUS = (0.05, 0.1, 0.2)


def _errors(pred: KeypointSet, gt: KeypointSet) -> np.ndarray:
    if pred.num_joints != gt.num_joints:
        raise ValueError(f"joint count mismatch: {pred.num_joints} vs {gt.num_joints}")
    return np.linalg.norm(pred.xy - gt.xy, axis=1)


def pck(preds: list[KeypointSet], gts: list[KeypointSet], tau: float, normalizer) -> float:
    """Fraction of visible ground-truth joints within ``tau * normalizer`` of the prediction.

    `normalizer` is a scalar or one value per sample (for example the image diagonal).
    """
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth lists differ in length")
    norms = np.broadcast_to(np.asarray(normalizer, dtype=np.float64), (len(gts),))
    if np.any(norms <= 0):
        raise ValueError("normalizer must be positive")
    hits = total = 0
    for p, g, norm in zip(preds, gts, norms):
        d = _errors(p, g)[g.visible]
        hits += int(np.sum(d <= tau * norm))
        total += d.size
    if total == 0:
        raise ValueError("no visible joints to evaluate")
    return hits / total


def oks(pred: KeypointSet, gt: KeypointSet, area: float, k) -> float:
    """Mean over visible joints of exp(-d^2 / (2 * area * k^2)); 0 when nothing is visible."""
    if area <= 0:
        raise ValueError("area must be positive")
    kk = np.broadcast_to(np.asarray(k, dtype=np.float64), (gt.num_joints,))
    vis = gt.visible
    if not vis.any():
        return 0.0
    d2 = _errors(pred, gt)[vis] ** 2
    return float(np.mean(np.exp(-d2 / (2.0 * area * kk[vis] ** 2))))


@dataclass
class EvalResult:
    thresholds: tuple[float, ...]
    ap_per_threshold: np.ndarray
    precision: list[np.ndarray]
    recall: list[np.ndarray]
    pck: dict[float, float] = field(default_factory=dict)
    per_joint_error: np.ndarray | None = None

    @property
    def ap(self) -> float:
        return float(np.mean(self.ap_per_threshold))

    def ap_at(self, t: float) -> float:
        return float(self.ap_per_threshold[self.thresholds.index(round(t, 2))])


def _ap_single(scores: np.ndarray, order: np.ndarray, t: float):
    tp = (scores[order] >= t).astype(np.float64)
    cum = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    precision = cum / ranks
    recall = cum / len(tp)
    # all-point interpolation: precision envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope)), precision, recall


def average_precision(oks_scores, confidences, thresholds=OKS_THRESHOLDS) -> EvalResult:
    """One detection per ground-truth instance, ranked by confidence (stable for ties)."""
    s = np.asarray(oks_scores, dtype=np.float64)
    c = np.asarray(confidences, dtype=np.float64)
    if s.size == 0:
        raise ValueError("average_precision needs at least one sample")
    if s.shape != c.shape:
        raise ValueError("scores and confidences differ in length")
    order = np.argsort(-c, kind="stable")
    aps, precs, recs = [], [], []
    for t in thresholds:
        ap, p, r = _ap_single(s, order, t)
        aps.append(ap)
        precs.append(p)
        recs.append(r)
    return EvalResult(tuple(thresholds), np.array(aps), precs, recs)


def evaluate(preds: list[KeypointSet], gts: list[KeypointSet], area: float, k,
             normalizer: float, taus=PCK_TAUS) -> EvalResult:
    """AP over OKS thresholds plus PCK and per-joint mean error, for matched sample lists."""
    scores = [oks(p, g, area, k) for p, g in zip(preds, gts)]
    conf = [float(np.mean(p.confidence)) if p.confidence is not None else 1.0 for p in preds]
    result = average_precision(scores, conf)
    result.pck = {tau: pck(preds, gts, tau, normalizer) for tau in taus}
    errs = np.array([_errors(p, g) for p, g in zip(preds, gts)])
    vis = np.array([g.visible for g in gts])
    with np.errstate(invalid="ignore"):
        result.per_joint_error = np.where(vis, errs, 0).sum(axis=0) / vis.sum(axis=0)
    return result


def render_report(result: EvalResult, joint_names) -> str:
    """Tab-separated ``metric<TAB>value`` lines."""
    lines = [f"AP\t{result.ap:.6f}", f"AP@0.50\t{result.ap_at(0.5):.6f}", f"AP@0.75\t{result.ap_at(0.75):.6f}"]
    lines += [f"PCK@{tau:g}\t{v:.6f}" for tau, v in result.pck.items()]
    if result.per_joint_error is not None:
        lines += [f"mean_error.{name}\t{e:.6f}" for name, e in zip(joint_names, result.per_joint_error)]
    return "\n".join(lines) + "\n"
