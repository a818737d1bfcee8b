"""Weighted Boxes Fusion for multi-epoch ensembles, and greedy NMS as a baseline."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from lndet.errors import ValidationError
from lndet.geometry import BBox, _corner_iou

FUSED_SOURCE = "fused"


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BBox
    score: float
    source_id: str
    label: int = 0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValidationError(f"detection score must lie in [0, 1], got {self.score}")
        if not self.source_id:
            raise ValidationError("detection source_id must be non-empty")


def sort_key(d: Detection) -> tuple:
    """Descending score, then x1, y1, source_id.

    The trailing fields only separate detections that tie on all of those.
    """
    b = d.box
    return (-d.score, b.x1, b.y1, d.source_id, b.x2, b.y2, d.label, d.image_id)


class ScoreRescale(str, enum.Enum):
    MIN_RATIO = "min_ratio"
    PLAIN_RATIO = "plain_ratio"
    NONE = "none"


@dataclass(frozen=True)
class FusionConfig:
    iou_threshold: float = 0.55
    num_sources: int = 1
    score_rescale: ScoreRescale = ScoreRescale.MIN_RATIO

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValidationError(f"iou_threshold must lie in (0, 1), got {self.iou_threshold}")
        if self.num_sources < 1:
            raise ValidationError(f"num_sources must be >= 1, got {self.num_sources}")
        object.__setattr__(self, "score_rescale", ScoreRescale(self.score_rescale))


@dataclass
class FusedCluster:
    members: list[Detection] = field(default_factory=list)
    fused: Detection | None = None


def _single_image(dets: Sequence[Detection]) -> None:
    ids = {d.image_id for d in dets}
    if len(ids) > 1:
        raise ValidationError(f"detections span several images: {sorted(ids)}")


def fuse_cluster(members: Sequence[Detection]) -> tuple[BBox, float]:
    """Score-weighted mean box and mean score of a cluster.

    All-zero scores fall back to the unweighted mean of the coordinates.
    """
    if not members:
        raise ValidationError("cannot fuse an empty cluster")
    _single_image(members)
    total = math.fsum(m.score for m in members)
    if total > 0.0:
        coords = [math.fsum(m.score * m.box.as_tuple()[k] for m in members) / total for k in range(4)]
    else:
        coords = [math.fsum(m.box.as_tuple()[k] for m in members) / len(members) for k in range(4)]
    # weighted means of valid boxes stay valid; rounding can only nudge them
    x1, y1, x2, y2 = coords
    x1 = min(max(x1, min(m.box.x1 for m in members)), max(m.box.x1 for m in members))
    y1 = min(max(y1, min(m.box.y1 for m in members)), max(m.box.y1 for m in members))
    x2 = min(max(x2, min(m.box.x2 for m in members)), max(m.box.x2 for m in members))
    y2 = min(max(y2, min(m.box.y2 for m in members)), max(m.box.y2 for m in members))
    return BBox(x1, y1, x2, y2), total / len(members)


def _rescale(raw: float, n: int, cfg: FusionConfig) -> float:
    t = cfg.num_sources
    if cfg.score_rescale is ScoreRescale.MIN_RATIO:
        return raw * min(t, n) / t
    if cfg.score_rescale is ScoreRescale.PLAIN_RATIO:
        return min(1.0, raw * n / t)
    return raw


def wbf_clusters(dets: Sequence[Detection], cfg: FusionConfig) -> list[FusedCluster]:
    """Cluster and fuse one image's detections; clusters come back in output order."""
    _single_image(dets)
    clusters: list[FusedCluster] = []
    fused_boxes: list[tuple[float, float, float, float]] = []
    for det in sorted(dets, key=sort_key):
        b = det.box.as_tuple()
        best, best_iou = -1, cfg.iou_threshold
        for k, cl in enumerate(clusters):
            if cl.members[0].label != det.label:
                continue
            overlap = _corner_iou(b, fused_boxes[k])[0]
            if overlap > best_iou:
                best, best_iou = k, overlap
        if best < 0:
            clusters.append(FusedCluster(members=[det]))
            fused_boxes.append(b)
        else:
            clusters[best].members.append(det)
            box, _ = fuse_cluster(clusters[best].members)
            fused_boxes[best] = box.as_tuple()

    for cl in clusters:
        box, raw = fuse_cluster(cl.members)
        head = cl.members[0]
        cl.fused = Detection(
            image_id=head.image_id,
            box=box,
            score=_rescale(raw, len(cl.members), cfg),
            source_id=FUSED_SOURCE,
            label=head.label,
        )
    clusters.sort(key=lambda cl: sort_key(cl.fused))
    return clusters


def wbf(dets: Sequence[Detection], cfg: FusionConfig = FusionConfig()) -> list[Detection]:
    """Weighted Boxes Fusion of one image's detections.

    Detections are visited by descending score. Each joins the cluster whose
    running fused box overlaps it most (IoU strictly above the threshold, same
    label) or seeds a new cluster. Cluster scores are the member mean,
    rescaled by cluster size against ``cfg.num_sources``.
    """
    return [cl.fused for cl in wbf_clusters(dets, cfg)]


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    _single_image(dets)
    kept: list[Detection] = []
    for det in sorted(dets, key=sort_key):
        b = det.box.as_tuple()
        if all(
            k.label != det.label or _corner_iou(b, k.box.as_tuple())[0] <= iou_threshold
            for k in kept
        ):
            kept.append(det)
    return kept


def group_by_image(dets: Iterable[Detection]) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for d in dets:
        out.setdefault(d.image_id, []).append(d)
    return {k: out[k] for k in sorted(out)}
