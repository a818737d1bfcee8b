"""Axis-aligned boxes, coordinate conversions and overlap measures.

Boxes use continuous corner coordinates with the origin at the image's
top-left corner. There is no "+1" pixel convention: a box ``[0, 0, 10, 10]``
covers exactly 100 square pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from lndet.errors import ValidationError


@dataclass(frozen=True, order=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"non-finite box coordinates {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValidationError(f"box must have positive width and height, got {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class NormBox:
    """Center/size box normalized by the image width and height."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite normalized box {vals}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValidationError(f"normalized center outside [0, 1]: {vals}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValidationError(f"normalized size outside (0, 1]: {vals}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    def to_corners(self) -> tuple[float, float, float, float]:
        """Corner form in unit-square coordinates."""
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)


@dataclass(frozen=True)
class ImageDims:
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"image dims must be positive, got {self.width}x{self.height}")


def area(b: BBox) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def _corner_iou(a: tuple[float, ...], b: tuple[float, ...]) -> tuple[float, float]:
    """Return (iou, union) for two corner-form tuples."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = iw * ih if iw > 0.0 and ih > 0.0 else 0.0
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union, union


def _corner_giou(a: tuple[float, ...], b: tuple[float, ...]) -> float:
    overlap, union = _corner_iou(a, b)
    enclosing = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return overlap - (enclosing - union) / enclosing


def iou(a: BBox, b: BBox) -> float:
    return _corner_iou(a.as_tuple(), b.as_tuple())[0]


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU; lies in [-1, 1] and equals IoU when the hull adds no area."""
    return _corner_giou(a.as_tuple(), b.as_tuple())


def norm_giou(a: NormBox, b: NormBox) -> float:
    return _corner_giou(a.to_corners(), b.to_corners())


def clip(b: BBox, d: ImageDims) -> BBox:
    """Clip a box to the image rectangle.

    Raises ``ValidationError`` if nothing of the box remains inside the image.
    """
    return BBox(
        min(max(b.x1, 0.0), d.width),
        min(max(b.y1, 0.0), d.height),
        min(max(b.x2, 0.0), d.width),
        min(max(b.y2, 0.0), d.height),
    )


def to_norm(b: BBox, d: ImageDims) -> NormBox:
    """Convert to normalized center form, clipping to the image first."""
    c = clip(b, d)
    return NormBox(
        cx=(c.x1 + c.x2) / 2.0 / d.width,
        cy=(c.y1 + c.y2) / 2.0 / d.height,
        w=(c.x2 - c.x1) / d.width,
        h=(c.y2 - c.y1) / d.height,
    )


def from_norm(n: NormBox, d: ImageDims) -> BBox:
    cx, cy = n.cx * d.width, n.cy * d.height
    hw, hh = n.w * d.width / 2.0, n.h * d.height / 2.0
    return BBox(cx - hw, cy - hh, cx + hw, cy + hh)
