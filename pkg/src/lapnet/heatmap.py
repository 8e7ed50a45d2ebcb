"""Keypoint schemas, Gaussian heatmap encoding, MSE loss and heatmap decoding.

Coordinates are ``(x, y)`` in pixels of whatever frame the heatmap covers, with
integer values at pixel centers: pixel ``(row=r, col=c)`` sits at ``x=c, y=r``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_SIGMA = 2.0


@dataclass(frozen=True)
class KeypointSchema:
    name: str
    joints: tuple[str, ...]
    flip_pairs: tuple[tuple[int, int], ...] = ()
    limbs: tuple[tuple[int, int], ...] = ()
    oks_k: tuple[float, ...] = ()

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def flip_index(self) -> np.ndarray:
        """Permutation mapping each joint to its mirrored counterpart."""
        perm = np.arange(self.num_joints)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm

    def index(self, joint: str) -> int:
        return self.joints.index(joint)


_COCO_SIGMAS = (.26, .25, .25, .35, .35, .79, .79, .72, .72, .62, .62, 1.07, 1.07, .87, .87, .89, .89)

COCO17 = KeypointSchema(
    "coco17",
    ("nose", "left_eye", "right_eye", "left_ear", "right_ear", "left_shoulder", "right_shoulder",
     "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hip", "right_hip",
     "left_knee", "right_knee", "left_ankle", "right_ankle"),
    flip_pairs=((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)),
    limbs=((15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12), (5, 6), (5, 7),
           (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6)),
    # COCO per-keypoint constants enter OKS as k = 2 * sigma
    oks_k=tuple(2 * s / 10 for s in _COCO_SIGMAS),
)

MPII16 = KeypointSchema(
    "mpii16",
    ("head", "neck", "pelvis", "thorax", "left_shoulder", "right_shoulder", "left_elbow",
     "right_elbow", "left_wrist", "right_wrist", "left_knee", "right_knee", "left_ankle",
     "right_ankle", "left_hip", "right_hip"),
    flip_pairs=((4, 5), (6, 7), (8, 9), (10, 11), (12, 13), (14, 15)),
    limbs=((0, 1), (1, 3), (3, 2), (3, 4), (3, 5), (4, 6), (6, 8), (5, 7), (7, 9),
           (2, 14), (2, 15), (14, 10), (10, 12), (15, 11), (11, 13)),
    oks_k=(0.1,) * 16,
)


def toy_schema(k: int = 4) -> KeypointSchema:
    return KeypointSchema(f"toy-{k}", tuple(f"j{i}" for i in range(k)),
                          limbs=tuple((i, i + 1) for i in range(k - 1)), oks_k=(0.1,) * k)


SCHEMAS = {"coco17": COCO17, "mpii16": MPII16, "toy": toy_schema(4)}


def schema_for(name: str, num_keypoints: int | None = None) -> KeypointSchema:
    if name == "toy" or name.startswith("toy-"):
        k = num_keypoints if num_keypoints is not None else int(name.partition("-")[2] or 4)
        return toy_schema(k)
    try:
        return SCHEMAS[name]
    except KeyError:
        raise ValueError(f"unknown keypoint schema {name!r}") from None


@dataclass
class KeypointSet:
    """Per-joint ``(x, y)`` coordinates, visibility flags and optional confidences."""

    xy: np.ndarray  # (J, 2)
    visible: np.ndarray  # (J,) bool
    confidence: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(self.visible) != len(self.xy):
            raise ValueError("xy and visible disagree on joint count")
        if not np.all(np.isfinite(self.xy)):
            raise ValueError("keypoint coordinates must be finite")

    @property
    def num_joints(self) -> int:
        return len(self.xy)

    def scaled(self, factor: float) -> "KeypointSet":
        return KeypointSet(self.xy * factor, self.visible.copy(), self.confidence)


@dataclass
class HeatmapStack:
    maps: np.ndarray  # (N, J, h, w)
    sigma: float = DEFAULT_SIGMA


def encode_one(kps: KeypointSet, h: int, w: int, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Unnormalized Gaussian per joint, evaluated at pixel centers; zero maps for invisible joints."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    out = np.zeros((kps.num_joints, h, w))
    for j, ((x, y), vis) in enumerate(zip(kps.xy, kps.visible)):
        if vis:
            out[j] = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma ** 2))
    return out


def encode(keypoints: KeypointSet | list[KeypointSet], h: int, w: int,
           sigma: float = DEFAULT_SIGMA) -> HeatmapStack:
    if isinstance(keypoints, KeypointSet):
        keypoints = [keypoints]
    return HeatmapStack(np.stack([encode_one(k, h, w, sigma) for k in keypoints]), sigma)


def _maps(x) -> np.ndarray:
    return x.maps if isinstance(x, HeatmapStack) else np.asarray(x, dtype=np.float64)


def mse_loss(pred, gt, visibility=None) -> tuple[float, np.ndarray]:
    """Mean squared error over batch x visible joints x pixels, and its gradient w.r.t. `pred`."""
    p, g = _maps(pred), _maps(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and target {g.shape} differ in shape")
    n, j, h, w = p.shape
    mask = np.ones((n, j), dtype=bool) if visibility is None else np.asarray(visibility, dtype=bool)
    mask4 = mask[:, :, None, None]
    count = int(mask.sum()) * h * w
    if count == 0:
        return 0.0, np.zeros_like(p)
    diff = np.where(mask4, p - g, 0.0)
    return float(np.sum(diff * diff) / count), 2.0 * diff / count


def decode(pred) -> list[KeypointSet]:
    """Argmax per joint with a quarter-pixel shift toward the larger neighbour on each axis.

    Ties go to the lowest row-major index; confidence is the peak value.
    """
    maps = _maps(pred)
    n, j, h, w = maps.shape
    flat = maps.reshape(n, j, h * w)
    idx = flat.argmax(axis=2)
    conf = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]
    rows, cols = np.divmod(idx, w)
    result = []
    for b in range(n):
        xy = np.zeros((j, 2))
        for k in range(j):
            r, c, m = rows[b, k], cols[b, k], maps[b, k]
            x, y = float(c), float(r)
            if 0 < c < w - 1:
                x += 0.25 * np.sign(m[r, c + 1] - m[r, c - 1])
            if 0 < r < h - 1:
                y += 0.25 * np.sign(m[r + 1, c] - m[r - 1, c])
            xy[k] = x, y
        result.append(KeypointSet(xy, np.ones(j, dtype=bool), conf[b].copy()))
    return result


def flip_keypoints(kps: KeypointSet, schema: KeypointSchema, width: int | float) -> KeypointSet:
    """Mirror horizontally (x -> width - 1 - x) and swap left/right joints."""
    perm = schema.flip_index()
    xy = kps.xy.copy()
    xy[:, 0] = width - 1 - xy[:, 0]
    conf = None if kps.confidence is None else kps.confidence[perm]
    return KeypointSet(xy[perm], kps.visible[perm], conf)


# ---------------------------------------------------------------------------
# Keypoint text files: "sample <id>" then one "name x y visible [confidence]" line per joint.


def write_keypoint_file(path: str | Path, records, schema: KeypointSchema):
    lines = []
    for sample_id, kps in records:
        lines.append(f"sample {sample_id}")
        for j, (name, (x, y), vis) in enumerate(zip(schema.joints, kps.xy, kps.visible)):
            line = f"{name} {x:.6f} {y:.6f} {int(vis)}"
            if kps.confidence is not None:
                line += f" {kps.confidence[j]:.6f}"
            lines.append(line)
    Path(path).write_text("\n".join(lines) + "\n")


def read_keypoint_file(path: str | Path, schema: KeypointSchema) -> list[tuple[str, KeypointSet]]:
    records, current, rows = [], None, []

    def flush():
        if current is None:
            return
        if len(rows) != schema.num_joints:
            raise ValueError(f"sample {current}: expected {schema.num_joints} joints, got {len(rows)}")
        by_name = {r[0]: r for r in rows}
        xy = [(float(by_name[n][1]), float(by_name[n][2])) for n in schema.joints]
        vis = [by_name[n][3] == "1" for n in schema.joints]
        has_conf = [len(by_name[n]) == 5 for n in schema.joints]
        if any(has_conf) and not all(has_conf):
            raise ValueError(f"sample {current}: confidence given for some joints only")
        conf = np.array([float(by_name[n][4]) for n in schema.joints]) if all(has_conf) else None
        records.append((current, KeypointSet(xy, vis, conf)))

    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "sample":
            flush()
            current, rows = parts[1], []
        elif len(parts) in (4, 5):
            if parts[0] not in schema.joints:
                raise ValueError(f"unknown joint {parts[0]!r} for schema {schema.name}")
            rows.append(parts)
        else:
            raise ValueError(f"malformed keypoint line: {line!r}")
    flush()
    return records
