"""Synthetic keypoint data, augmentation and netpbm image I/O."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .heatmap import KeypointSchema, KeypointSet, flip_keypoints, toy_schema, write_keypoint_file


@dataclass(frozen=True)
class ToyDatasetSpec:
    """Bright Gaussian blobs on a noisy background, one per joint.

    Joint ``j`` has its own radius and peak intensity, interpolated between the
    given ranges, so joints can be told apart.
    """

    num_samples: int = 512
    image_size: int = 64
    num_keypoints: int = 4
    radius_range: tuple[float, float] = (1.5, 3.0)
    intensity_range: tuple[float, float] = (0.4, 1.0)
    noise: float = 0.05
    seed: int = 0

    @property
    def margin(self) -> float:
        return 3.0 * self.radius_range[1]


def joint_signatures(spec: ToyDatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    k = spec.num_keypoints
    radii = np.linspace(*spec.radius_range, k) if k > 1 else np.array([spec.radius_range[0]])
    peaks = np.linspace(spec.intensity_range[1], spec.intensity_range[0], k) if k > 1 else np.array(
        [spec.intensity_range[1]])
    return radii, peaks


def generate_toy_sample(spec: ToyDatasetSpec, index: int) -> tuple[np.ndarray, KeypointSet]:
    """Image of shape (1, S, S) and its keypoints in image pixels; pure in (spec, index)."""
    if not 0 <= index < spec.num_samples:
        raise IndexError(f"sample {index} out of range for {spec.num_samples} samples")
    rng = np.random.default_rng([spec.seed, index])
    size, margin = spec.image_size, spec.margin
    radii, peaks = joint_signatures(spec)
    xy = np.zeros((spec.num_keypoints, 2))
    min_sep = 4.0 * spec.radius_range[1]
    for j in range(spec.num_keypoints):
        for _ in range(100):
            cand = rng.uniform(margin, size - 1 - margin, size=2)
            if j == 0 or np.min(np.linalg.norm(xy[:j] - cand, axis=1)) >= min_sep:
                break
        xy[j] = cand
    img = rng.normal(0.0, spec.noise, size=(size, size)) if spec.noise > 0 else np.zeros((size, size))
    ys, xs = np.mgrid[0:size, 0:size]
    for (x, y), r, a in zip(xy, radii, peaks):
        img += a * np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * r * r))
    return img[None], KeypointSet(xy, np.ones(spec.num_keypoints, dtype=bool))


def is_validation(index: int, seed: int = 0) -> bool:
    """Deterministic ~10% hold-out keyed by a hash of the sample index."""
    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:4], "little") % 10 == 0


def split_indices(spec: ToyDatasetSpec) -> tuple[list[int], list[int]]:
    train, val = [], []
    for i in range(spec.num_samples):
        (val if is_validation(i, spec.seed) else train).append(i)
    return train, val


# ---------------------------------------------------------------------------
# Augmentation.


@dataclass(frozen=True)
class AugmentConfig:
    scale: bool = False
    scale_range: tuple[float, float] = (0.75, 1.25)
    rotate: bool = False
    rotation_range: tuple[float, float] = (-30.0, 30.0)  # degrees
    flip: bool = False
    flip_prob: float = 0.5
    jitter: bool = False
    brightness: float = 0.2
    contrast: float = 0.2
    translate: float = 0.0  # max crop offset as a fraction of the image size


def affine_matrix(size_hw: tuple[int, int], scale: float = 1.0, angle_deg: float = 0.0,
                  flip: bool = False, shift: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """3x3 map on homogeneous (x, y): scale, rotate about the center, mirror, then shift.

    Rotation uses x' = cx + cos*(x-cx) - sin*(y-cy), y' = cy + sin*(x-cx) + cos*(y-cy).
    """
    h, w = size_hw
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    t = np.radians(angle_deg)
    to_c = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    from_c = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    sr = np.array([[scale * np.cos(t), -scale * np.sin(t), 0],
                   [scale * np.sin(t), scale * np.cos(t), 0], [0, 0, 1]])
    m = from_c @ sr @ to_c
    if flip:
        m = np.array([[-1, 0, w - 1], [0, 1, 0], [0, 0, 1]], dtype=np.float64) @ m
    m = np.array([[1, 0, shift[0]], [0, 1, shift[1]], [0, 0, 1]], dtype=np.float64) @ m
    return m


def transform_keypoints(kps: KeypointSet, m: np.ndarray, size_hw: tuple[int, int]) -> KeypointSet:
    h, w = size_hw
    xy = kps.xy @ m[:2, :2].T + m[:2, 2]
    inside = (xy[:, 0] >= 0) & (xy[:, 0] <= w - 1) & (xy[:, 1] >= 0) & (xy[:, 1] <= h - 1)
    return KeypointSet(xy, kps.visible & inside, kps.confidence)


def warp_image(image: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Resample a (C, H, W) image so that output pixel p shows input pixel m^-1 p."""
    inv = np.linalg.inv(m)
    # scipy works in (row, col) = (y, x) order
    swap = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=np.float64)
    inv_rc = swap @ inv @ swap
    return np.stack([ndimage.affine_transform(ch, inv_rc[:2, :2], offset=inv_rc[:2, 2], order=1,
                                              mode="constant", cval=0.0) for ch in image])


def augment(image: np.ndarray, kps: KeypointSet, cfg: AugmentConfig, rng: np.random.Generator,
            schema: KeypointSchema | None = None):
    """Scale, rotate, flip, crop to the input size, then colour jitter.

    The same geometric map moves the keypoints; joints that leave the frame become invisible.
    """
    _, h, w = image.shape
    s = rng.uniform(*cfg.scale_range) if cfg.scale else 1.0
    a = rng.uniform(*cfg.rotation_range) if cfg.rotate else 0.0
    flip = bool(cfg.flip and rng.random() < cfg.flip_prob)
    shift = tuple(rng.uniform(-cfg.translate, cfg.translate, size=2) * (w, h)) if cfg.translate else (0.0, 0.0)
    geo = affine_matrix((h, w), s, a, False, shift)
    full = affine_matrix((h, w), flip=True) @ geo if flip else geo
    out_img = image if np.array_equal(full, np.eye(3)) else warp_image(image, full)
    out_kps = transform_keypoints(kps, geo, (h, w))
    if flip:
        out_kps = flip_keypoints(out_kps, schema or toy_schema(kps.num_joints), w)
    if cfg.jitter:
        b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        mean = out_img.mean()
        out_img = ((out_img - mean) * c + mean) * b
    return out_img, out_kps


# ---------------------------------------------------------------------------
# Netpbm I/O.


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_netpbm(path: str | Path, img: np.ndarray):
    """Write a (C, H, W) float image in [0, 1] as binary PGM (C=1) or PPM (C=3)."""
    arr = to_uint8(img)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PPM")


def load_netpbm(path: str | Path) -> np.ndarray:
    """Read a PGM/PPM (plain or binary) as a float (C, H, W) image in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        arr = arr.astype(np.float64) / float(np.iinfo(arr.dtype).max if arr.dtype.kind == "u" else 255)
    else:
        arr = arr.astype(np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def export_toy_dataset(spec: ToyDatasetSpec, out_dir: str | Path) -> Path:
    """Write every sample as ``NNNNN.pgm`` plus one ``keypoints.txt`` covering all samples."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(spec.num_samples):
        img, kps = generate_toy_sample(spec, i)
        save_netpbm(out / f"{i:05d}.pgm", img)
        records.append((f"{i:05d}", kps))
    write_keypoint_file(out / "keypoints.txt", records, toy_schema(spec.num_keypoints))
    return out
