"""Detection scoring: TP/FP flags, average precision, FROC sensitivities,
short-axis size stratification and Table-1 style text reports."""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_DOWN, Decimal
from typing import Iterable, Sequence

from lndet.errors import NoGroundTruth, ValidationError
from lndet.fusion import Detection, sort_key
from lndet.geometry import BBox, _corner_iou

DEFAULT_FP_THRESHOLDS = (0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 16.0)


@dataclass(frozen=True)
class GroundTruthNode:
    image_id: str
    box: BBox
    lad_mm: float
    sad_mm: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.sad_mm) and self.sad_mm > 0.0):
            raise ValidationError(f"sad_mm must be positive, got {self.sad_mm}")
        if not (math.isfinite(self.lad_mm) and self.lad_mm > 0.0):
            raise ValidationError(f"lad_mm must be positive, got {self.lad_mm}")
        if self.lad_mm < self.sad_mm:
            raise ValidationError(f"lad_mm ({self.lad_mm}) is smaller than sad_mm ({self.sad_mm})")


class Stratum(str, enum.Enum):
    ALL = "all"
    SAD_BELOW = "sad_below_cutoff"
    SAD_AT_OR_ABOVE = "sad_at_or_above_cutoff"


@dataclass(frozen=True)
class EvalConfig:
    iou_tp_threshold: float = 0.5
    fp_thresholds: tuple[float, ...] = DEFAULT_FP_THRESHOLDS
    sad_cutoff_mm: float = 10.0

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_tp_threshold < 1.0:
            raise ValidationError(f"iou_tp_threshold must lie in (0, 1), got {self.iou_tp_threshold}")
        fps = tuple(float(k) for k in self.fp_thresholds)
        if not fps or fps[0] <= 0.0 or any(b <= a for a, b in zip(fps, fps[1:])):
            raise ValidationError(f"fp_thresholds must be positive and strictly increasing, got {fps}")
        object.__setattr__(self, "fp_thresholds", fps)


@dataclass(frozen=True)
class FrocPoint:
    score_threshold: float
    fp_per_image: float
    sensitivity: float


@dataclass
class FrocCurve:
    points: list[FrocPoint]
    num_images: int
    num_gt: int


@dataclass
class EvalReport:
    method_name: str
    map_percent: float | None = None
    sensitivities_percent: dict[float, float | None] = field(default_factory=dict)
    stratum: Stratum = Stratum.ALL
    sad_cutoff_mm: float = 10.0
    no_ground_truth: bool = False

    @property
    def label(self) -> str:
        cutoff = f"{self.sad_cutoff_mm:g}"
        if self.stratum is Stratum.SAD_BELOW:
            return f"{self.method_name} (SAD < {cutoff}mm)"
        if self.stratum is Stratum.SAD_AT_OR_ABOVE:
            return f"{self.method_name} (SAD >= {cutoff}mm)"
        return self.method_name


@dataclass
class TpFpResult:
    """Per-detection flags aligned with the input order."""

    is_tp: list[bool]
    matched_gt: list[int | None]
    gt_matched: list[bool]


def assign_tp_fp(
    dets: Sequence[Detection], gts: Sequence[GroundTruthNode], iou_thr: float = 0.5
) -> TpFpResult:
    """Greedy matching for one image, highest score first.

    A detection is a TP when its best-overlapping still-unmatched ground
    truth reaches ``iou_thr``; that ground truth is then consumed.
    """
    order = sorted(range(len(dets)), key=lambda i: sort_key(dets[i]))
    gt_boxes = [g.box.as_tuple() for g in gts]
    gt_matched = [False] * len(gts)
    is_tp = [False] * len(dets)
    matched_gt: list[int | None] = [None] * len(dets)
    for i in order:
        b = dets[i].box.as_tuple()
        best, best_iou = -1, -1.0
        for j, g in enumerate(gt_boxes):
            if gt_matched[j]:
                continue
            overlap = _corner_iou(b, g)[0]
            if overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0 and best_iou >= iou_thr:
            gt_matched[best] = True
            is_tp[i] = True
            matched_gt[i] = best
    return TpFpResult(is_tp=is_tp, matched_gt=matched_gt, gt_matched=gt_matched)


def average_precision(scores: Sequence[float], flags: Sequence[bool], num_gt: int) -> float:
    """All-point interpolated AP: area under the monotone precision envelope."""
    if num_gt < 1:
        raise NoGroundTruth("average precision is undefined without ground truth")
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    precisions, recalls = [], []
    tp = 0
    for rank, i in enumerate(order, start=1):
        tp += bool(flags[i])
        precisions.append(tp / rank)
        recalls.append(tp / num_gt)
    for k in range(len(precisions) - 2, -1, -1):
        precisions[k] = max(precisions[k], precisions[k + 1])
    ap, prev_recall = 0.0, 0.0
    for p, r in zip(precisions, recalls):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return ap


def froc(
    scores: Sequence[float],
    flags: Sequence[bool],
    num_images: int,
    num_gt: int,
    fp_thresholds: Sequence[float] = DEFAULT_FP_THRESHOLDS,
) -> tuple[dict[float, float], FrocCurve]:
    """Sensitivity at each FP-per-image budget, plus the full sweep.

    The score threshold sweeps every distinct score, highest first; all
    detections at or above it are kept. ``S@k`` is the best sensitivity among
    sweep points with at most ``k`` false positives per image, 0 if none.
    """
    if num_images < 1:
        raise ValidationError("froc needs at least one image")
    if num_gt < 1:
        raise NoGroundTruth("sensitivity is undefined without ground truth")
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    points: list[FrocPoint] = []
    tp = fp = 0
    for pos, i in enumerate(order):
        if flags[i]:
            tp += 1
        else:
            fp += 1
        nxt = order[pos + 1] if pos + 1 < len(order) else None
        if nxt is None or scores[nxt] != scores[i]:
            points.append(FrocPoint(float(scores[i]), fp / num_images, tp / num_gt))
    sens = {}
    for k in fp_thresholds:
        sens[float(k)] = max((p.sensitivity for p in points if p.fp_per_image <= k), default=0.0)
    return sens, FrocCurve(points=points, num_images=num_images, num_gt=num_gt)


@dataclass
class StratumResult:
    report: EvalReport
    curve: FrocCurve | None
    num_gt: int


def _in_stratum(g: GroundTruthNode, stratum: Stratum, cutoff: float) -> bool:
    if stratum is Stratum.SAD_BELOW:
        return g.sad_mm < cutoff
    if stratum is Stratum.SAD_AT_OR_ABOVE:
        return g.sad_mm >= cutoff
    return True


def evaluate(
    dets: Iterable[Detection],
    gts: Iterable[GroundTruthNode],
    cfg: EvalConfig = EvalConfig(),
    method_name: str = "method",
    image_ids: Iterable[str] | None = None,
    workers: int = 1,
) -> list[StratumResult]:
    """Score detections in all three strata.

    ``image_ids`` fixes the image universe used for FP-per-image; it defaults
    to every image that has ground truth or detections.
    """
    dets = list(dets)
    gts = list(gts)
    det_by_img: dict[str, list[Detection]] = {}
    for d in dets:
        det_by_img.setdefault(d.image_id, []).append(d)
    gt_by_img: dict[str, list[GroundTruthNode]] = {}
    for g in gts:
        gt_by_img.setdefault(g.image_id, []).append(g)
    universe = sorted(set(image_ids) if image_ids is not None else set(det_by_img) | set(gt_by_img))
    num_images = len(universe)
    if num_images == 0:
        raise ValidationError("no images to evaluate")

    # all-stratum pass first: its matches decide which detections belong to
    # the other stratum's nodes and must not count as FPs here
    def one(img: str) -> TpFpResult:
        return assign_tp_fp(det_by_img.get(img, []), gt_by_img.get(img, []), cfg.iou_tp_threshold)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            full_match = dict(zip(universe, pool.map(one, universe)))
    else:
        full_match = {img: one(img) for img in universe}

    results = []
    for stratum in Stratum:
        pairs: list[tuple[Detection, bool]] = []
        num_gt = 0
        for img in universe:
            img_dets = det_by_img.get(img, [])
            img_gts = gt_by_img.get(img, [])
            keep_gt = [_in_stratum(g, stratum, cfg.sad_cutoff_mm) for g in img_gts]
            num_gt += sum(keep_gt)
            if stratum is Stratum.ALL:
                res = full_match[img]
                pairs.extend(zip(img_dets, res.is_tp))
                continue
            fm = full_match[img]
            kept_dets = [
                d
                for d, m in zip(img_dets, fm.matched_gt)
                if m is None or keep_gt[m]
            ]
            stratum_gts = [g for g, k in zip(img_gts, keep_gt) if k]
            res = assign_tp_fp(kept_dets, stratum_gts, cfg.iou_tp_threshold)
            pairs.extend(zip(kept_dets, res.is_tp))

        report = EvalReport(method_name=method_name, stratum=stratum, sad_cutoff_mm=cfg.sad_cutoff_mm)
        if num_gt == 0:
            report.no_ground_truth = True
            report.sensitivities_percent = {k: None for k in cfg.fp_thresholds}
            results.append(StratumResult(report=report, curve=None, num_gt=0))
            continue
        pairs.sort(key=lambda p: sort_key(p[0]))
        scores = [d.score for d, _ in pairs]
        flags = [f for _, f in pairs]
        report.map_percent = 100.0 * average_precision(scores, flags, num_gt)
        sens, curve = froc(scores, flags, num_images, num_gt, cfg.fp_thresholds)
        report.sensitivities_percent = {k: 100.0 * v for k, v in sens.items()}
        results.append(StratumResult(report=report, curve=curve, num_gt=num_gt))
    return results


def stratify_and_eval(
    dets: Iterable[Detection],
    gts: Iterable[GroundTruthNode],
    cfg: EvalConfig = EvalConfig(),
    method_name: str = "method",
    image_ids: Iterable[str] | None = None,
) -> list[EvalReport]:
    return [r.report for r in evaluate(dets, gts, cfg, method_name, image_ids)]


def format_percent(value: float | None) -> str:
    """Two decimals, truncated toward zero; ``--`` when unavailable.

    Truncation (not rounding) is the reporting convention this table format
    follows: 77/84 prints as 91.66.
    """
    if value is None:
        return "--"
    # round first so float noise like 28.999999999999996 does not lose a cent
    d = Decimal(repr(round(float(value), 9))).quantize(Decimal("0.01"), rounding=ROUND_DOWN)
    return f"{d:.2f}"


def _threshold_label(k: float) -> str:
    return f"S@{k:g}"


def render_report(
    reports: Sequence[EvalReport], fp_thresholds: Sequence[float] | None = None
) -> str:
    """Fixed-width text table with an mAP column and one column per FP budget."""
    if not reports:
        raise ValidationError("render_report needs at least one report")
    if fp_thresholds is None:
        seen: set[float] = set()
        for r in reports:
            seen.update(float(k) for k in r.sensitivities_percent)
        fp_thresholds = sorted(seen) or list(DEFAULT_FP_THRESHOLDS)
    headers = ["Method", "mAP"] + [_threshold_label(k) for k in fp_thresholds]
    rows = []
    for r in reports:
        sens = {float(k): v for k, v in r.sensitivities_percent.items()}
        rows.append(
            [r.label, format_percent(r.map_percent)]
            + [format_percent(sens.get(float(k))) for k in fp_thresholds]
        )
    widths = [max(len(row[c]) for row in [headers] + rows) for c in range(len(headers))]

    def fmt(row: list[str]) -> str:
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        return "  ".join(cells).rstrip()

    rule = "-" * len(fmt(headers))
    lines = [fmt(headers), rule] + [fmt(row) for row in rows]
    return "\n".join(lines) + "\n"
