"""Volume intensity pipeline, 3-slice inputs, augmentation and patient splits."""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import ndimage

from lndet.errors import ValidationError
from lndet.geometry import BBox

MAX_SHIFT_PX = 32
MAX_CROP_PX = 32
MAX_ROTATE_DEG = 10.0


@dataclass
class Volume:
    """Intensity volume; ``voxels`` has shape (depth, height, width)."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.voxels.ndim != 3 or 0 in self.voxels.shape:
            raise ValidationError(f"volume must be a non-empty 3-D raster, got shape {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValidationError("volume contains non-finite intensities")
        if not all(math.isfinite(s) and s > 0 for s in self.spacing_mm):
            raise ValidationError(f"spacing must be positive, got {self.spacing_mm}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        """(width, height, depth)."""
        d, h, w = self.voxels.shape
        return (w, h, d)


@dataclass
class SliceTriplet:
    image_id: str
    channels: np.ndarray  # (3, height, width)
    center_index: int

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    @property
    def height(self) -> int:
        return self.channels.shape[1]


TRAIN, VAL, TEST = "train", "val", "test"
SPLITS = (TRAIN, VAL, TEST)


@dataclass
class SplitAssignment:
    mapping: dict[str, str]
    seed: int

    def members(self, split: str) -> list[str]:
        return sorted(p for p, s in self.mapping.items() if s == split)

    def counts(self) -> tuple[int, int, int]:
        return tuple(len(self.members(s)) for s in SPLITS)


def _nearest_rank(sorted_vals: np.ndarray, pct: float) -> float:
    n = sorted_vals.size
    rank = math.ceil(Fraction(str(pct)) * n / 100)
    return float(sorted_vals[min(max(rank, 1), n) - 1])


def percentile_normalize(v: Volume, lo_pct: float = 1.0, hi_pct: float = 99.0) -> Volume:
    """Clip to nearest-rank percentiles and map linearly onto [0, 1].

    A volume whose two percentiles coincide maps to all zeros.
    """
    if not 0.0 <= lo_pct <= hi_pct <= 100.0:
        raise ValidationError(f"need 0 <= lo_pct <= hi_pct <= 100, got {lo_pct}, {hi_pct}")
    data = v.voxels.astype(np.float64)
    flat = np.sort(data, axis=None)
    lo = _nearest_rank(flat, lo_pct)
    hi = _nearest_rank(flat, hi_pct)
    if hi <= lo:
        out = np.zeros_like(data)
    else:
        out = (np.clip(data, lo, hi) - lo) / (hi - lo)
    return replace(v, voxels=out)


def hist_equalize(v: Volume, bins: int = 256) -> Volume:
    """Whole-volume histogram equalization of [0, 1] intensities.

    Each voxel maps to the cumulative fraction of its bin, rescaled so the
    first occupied bin lands on 0 and the last on 1.
    """
    if bins < 1:
        raise ValidationError(f"bins must be positive, got {bins}")
    data = v.voxels.astype(np.float64)
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValidationError("hist_equalize expects intensities in [0, 1]")
    idx = np.minimum((data * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx.ravel(), minlength=bins)
    cdf = np.cumsum(counts) / idx.size
    cdf_min = cdf[counts > 0][0]
    if cdf_min >= 1.0:
        out = np.zeros_like(data)
    else:
        out = np.clip((cdf[idx] - cdf_min) / (1.0 - cdf_min), 0.0, 1.0)
    return replace(v, voxels=out)


def extract_triplet(v: Volume, center: int, image_id: str = "") -> SliceTriplet:
    """Slices (center-1, center, center+1), replicating the edge slice at the ends."""
    depth = v.voxels.shape[0]
    if not 0 <= center < depth:
        raise ValidationError(f"center slice {center} outside volume depth {depth}")
    idx = [max(center - 1, 0), center, min(center + 1, depth - 1)]
    return SliceTriplet(image_id=image_id, channels=v.voxels[idx].copy(), center_index=center)


@dataclass(frozen=True)
class AugmentSpec:
    """Concrete augmentation parameters.

    ``crop`` is ``(x0, y0, x1, y1)`` in pixels or ``None`` for the full image.
    Shifts are signed pixel offsets with magnitude at most 32; rotation is a
    signed counter-clockwise angle with magnitude at most 10 degrees.
    """

    flip_horizontal: bool = False
    flip_vertical: bool = False
    crop: tuple[int, int, int, int] | None = None
    shift_px: tuple[int, int] = (0, 0)
    rotate_deg: float = 0.0
    seed: int | None = None

    def __post_init__(self) -> None:
        if any(abs(s) > MAX_SHIFT_PX for s in self.shift_px):
            raise ValidationError(f"shift must lie within +-{MAX_SHIFT_PX} px, got {self.shift_px}")
        if not (math.isfinite(self.rotate_deg) and abs(self.rotate_deg) <= MAX_ROTATE_DEG):
            raise ValidationError(f"rotation must lie within +-{MAX_ROTATE_DEG} deg, got {self.rotate_deg}")
        if self.crop is not None:
            x0, y0, x1, y1 = self.crop
            if x0 < 0 or y0 < 0 or x1 <= x0 or y1 <= y0:
                raise ValidationError(f"invalid crop rectangle {self.crop}")

    @classmethod
    def sample(cls, seed: int, width: int, height: int) -> "AugmentSpec":
        """Draw flips, a crop trimming at most 32 px per axis, a shift and a rotation."""
        rng = np.random.default_rng(seed)
        flip_h = bool(rng.random() < 0.5)
        flip_v = bool(rng.random() < 0.5)
        trim_x = int(rng.integers(0, min(MAX_CROP_PX, width - 1) + 1))
        trim_y = int(rng.integers(0, min(MAX_CROP_PX, height - 1) + 1))
        x0 = int(rng.integers(0, trim_x + 1))
        y0 = int(rng.integers(0, trim_y + 1))
        crop = (x0, y0, width - (trim_x - x0), height - (trim_y - y0))
        shift = tuple(int(s) for s in rng.integers(-MAX_SHIFT_PX, MAX_SHIFT_PX + 1, size=2))
        rotate = float(rng.uniform(-MAX_ROTATE_DEG, MAX_ROTATE_DEG))
        return cls(flip_h, flip_v, crop, shift, rotate, seed)


_Box = tuple[float, float, float, float]


def _clip_boxes(boxes: dict[int, _Box], width: int, height: int) -> dict[int, _Box]:
    out = {}
    for k, (x1, y1, x2, y2) in boxes.items():
        c = (min(max(x1, 0.0), width), min(max(y1, 0.0), height),
             min(max(x2, 0.0), width), min(max(y2, 0.0), height))
        if c[2] > c[0] and c[3] > c[1]:
            out[k] = c
    return out


def _shift_plane(plane: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(plane)
    h, w = plane.shape
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src = plane[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return out


def _rotate_plane(plane: np.ndarray, deg: float) -> np.ndarray:
    # pixel (row, col) has its center at (col + .5, row + .5); rotation about the image center
    h, w = plane.shape
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    cx, cy = w / 2.0, h / 2.0
    matrix = np.array([[c, s], [-s, c]])
    offset = np.array([
        cy - 0.5 + s * (0.5 - cx) + c * (0.5 - cy),
        cx - 0.5 - s * (0.5 - cy) + c * (0.5 - cx),
    ])
    return ndimage.affine_transform(plane, matrix, offset=offset, order=1, mode="constant", cval=0.0)


def _rotate_box(b: _Box, deg: float, width: int, height: int) -> _Box:
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    cx, cy = width / 2.0, height / 2.0
    xs, ys = [], []
    for x, y in ((b[0], b[1]), (b[2], b[1]), (b[0], b[3]), (b[2], b[3])):
        xs.append(cx + c * (x - cx) + s * (y - cy))
        ys.append(cy - s * (x - cx) + c * (y - cy))
    return (min(xs), min(ys), max(xs), max(ys))


def augment_indexed(
    t: SliceTriplet, boxes: Sequence[BBox], spec: AugmentSpec
) -> tuple[SliceTriplet, list[BBox], list[int]]:
    """Like :func:`augment`, also returning the input index of each surviving box."""
    ch = t.channels
    height, width = ch.shape[1], ch.shape[2]
    bx = _clip_boxes({k: b.as_tuple() for k, b in enumerate(boxes)}, width, height)

    if spec.flip_horizontal:
        ch = ch[:, :, ::-1]
        bx = {k: (width - x2, y1, width - x1, y2) for k, (x1, y1, x2, y2) in bx.items()}
    if spec.flip_vertical:
        ch = ch[:, ::-1, :]
        bx = {k: (x1, height - y2, x2, height - y1) for k, (x1, y1, x2, y2) in bx.items()}

    if spec.crop is not None:
        x0, y0, x1c, y1c = spec.crop
        if x1c > width or y1c > height:
            raise ValidationError(f"crop {spec.crop} exceeds image {width}x{height}")
        ch = ch[:, y0:y1c, x0:x1c]
        width, height = x1c - x0, y1c - y0
        bx = _clip_boxes(
            {k: (a - x0, b - y0, c - x0, d - y0) for k, (a, b, c, d) in bx.items()}, width, height
        )

    dx, dy = spec.shift_px
    if dx or dy:
        ch = np.stack([_shift_plane(p, dx, dy) for p in ch])
        bx = _clip_boxes(
            {k: (a + dx, b + dy, c + dx, d + dy) for k, (a, b, c, d) in bx.items()}, width, height
        )

    if spec.rotate_deg:
        ch = np.stack([_rotate_plane(p, spec.rotate_deg) for p in ch])
        bx = _clip_boxes(
            {k: _rotate_box(b, spec.rotate_deg, width, height) for k, b in bx.items()}, width, height
        )

    out = SliceTriplet(image_id=t.image_id, channels=np.ascontiguousarray(ch), center_index=t.center_index)
    kept = sorted(bx)
    return out, [BBox(*bx[k]) for k in kept], kept


def augment(
    t: SliceTriplet, boxes: Sequence[BBox], spec: AugmentSpec
) -> tuple[SliceTriplet, list[BBox]]:
    """Apply flip, crop, shift and rotation, in that order, to pixels and boxes.

    Boxes are clipped to the image after every step; rotated boxes are
    re-enclosed axis-aligned. Boxes that lose all area are dropped, and the
    survivors keep their input order.
    """
    out, kept_boxes, _ = augment_indexed(t, boxes, spec)
    return out, kept_boxes


def split_sizes(n: int, ratios: Sequence[float] = (0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    """Train gets floor(r_train * n); validation takes its share of the rest, rounded up."""
    r_train, r_val, r_test = (Fraction(str(r)) for r in ratios)
    if min(r_train, r_val, r_test) < 0 or r_train + r_val + r_test != 1:
        raise ValidationError(f"split ratios must be non-negative and sum to 1, got {tuple(ratios)}")
    n_train = math.floor(r_train * n)
    rest = n - n_train
    n_val = math.ceil(r_val / (r_val + r_test) * rest) if r_val + r_test else 0
    return n_train, n_val, rest - n_val


def patient_split(
    patient_ids: Sequence[str], ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0
) -> SplitAssignment:
    ids = list(patient_ids)
    if len(set(ids)) != len(ids):
        dupes = sorted(p for p, c in Counter(ids).items() if c > 1)
        raise ValidationError(f"duplicate patient ids: {dupes[:5]}")
    if len(ids) < 3:
        raise ValidationError(f"need at least 3 patients to split, got {len(ids)}")
    n_train, n_val, _ = split_sizes(len(ids), ratios)
    order = sorted(ids)
    random.Random(seed).shuffle(order)
    mapping = {}
    for k, pid in enumerate(order):
        mapping[pid] = TRAIN if k < n_train else VAL if k < n_train + n_val else TEST
    return SplitAssignment(mapping=dict(sorted(mapping.items())), seed=seed)
