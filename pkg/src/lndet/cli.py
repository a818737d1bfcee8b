"""Command-line front end.

Exit codes: 0 success, 2 usage error, 3 malformed input file, 4 invalid
values or failed entries, 5 I/O error, 6 no ground truth to evaluate.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

from lndet import data_io
from lndet.errors import FormatError, LndetError, NoGroundTruth, NothingToMatch, ValidationError
from lndet.evaluation import EvalConfig, GroundTruthNode, Stratum, evaluate, render_report
from lndet.fusion import FUSED_SOURCE, Detection, FusionConfig, ScoreRescale, sort_key, wbf
from lndet.geometry import ImageDims, to_norm
from lndet.matching import FocalParams, MatchCostWeights, QueryPrediction, match
from lndet.preprocessing import (
    AugmentSpec,
    Volume,
    augment_indexed,
    extract_triplet,
    hist_equalize,
    patient_split,
    percentile_normalize,
)

log = logging.getLogger("lndet")

EXIT_OK = 0
EXIT_FORMAT = 3
EXIT_VALIDATION = 4
EXIT_IO = 5
EXIT_NO_GROUND_TRUTH = 6

_FUSION = FusionConfig()
_EVAL = EvalConfig()
_WEIGHTS = MatchCostWeights()
_FOCAL = FocalParams()

T = TypeVar("T")
R = TypeVar("R")


def _pmap(fn: Callable[[T], R], items: Iterable[T], workers: int) -> list[R]:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _fmt_list(values: Sequence[float]) -> str:
    return ",".join(f"{v:g}" for v in values)


# -- preprocess ----------------------------------------------------------------


def _load_boxes_by_image(path: Path | None) -> dict[str, list[GroundTruthNode]]:
    out: dict[str, list[GroundTruthNode]] = {}
    if path is not None:
        for n in data_io.load_ground_truth(path):
            out.setdefault(n.image_id, []).append(n)
    return out


def cmd_preprocess(args: argparse.Namespace) -> int:
    manifest = data_io.load_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gt_by_image = _load_boxes_by_image(args.ground_truth)

    def run(entry: data_io.ManifestEntry) -> tuple[str, list[GroundTruthNode]]:
        if "/" in entry.image_id or "\\" in entry.image_id or entry.image_id in {"", ".", ".."}:
            raise ValidationError(f"image_id {entry.image_id!r} is not usable as a file name")
        vol = data_io.read_volume(entry.volume_path)
        if vol.dims != entry.dims:
            raise ValidationError(f"volume dims {vol.dims} differ from manifest {entry.dims}")
        vol = hist_equalize(percentile_normalize(vol, args.lo_pct, args.hi_pct), args.bins)
        trip = extract_triplet(vol, entry.center_slice, entry.image_id)
        nodes = gt_by_image.get(entry.image_id, [])
        if args.augment_seed is not None:
            spec = AugmentSpec.sample(args.augment_seed, trip.width, trip.height)
            trip, boxes, kept = augment_indexed(trip, [n.box for n in nodes], spec)
            nodes = [
                GroundTruthNode(nodes[k].image_id, b, nodes[k].lad_mm, nodes[k].sad_mm)
                for k, b in zip(kept, boxes)
            ]
        out_path = out_dir / f"{entry.image_id}.lnv"
        data_io.write_volume(Volume(trip.channels, vol.spacing_mm), out_path)
        return str(out_path), nodes

    def guarded(entry: data_io.ManifestEntry) -> tuple[str, object]:
        try:
            return "ok", run(entry)
        except (LndetError, OSError) as exc:
            return "fail", exc

    results = _pmap(guarded, manifest.entries, args.workers)
    lines, aug_nodes, failed = [], [], 0
    for entry, (status, payload) in zip(manifest.entries, results):
        if status == "ok":
            path, nodes = payload
            lines.append(f"ok\t{entry.image_id}\t{Path(path).name}")
            aug_nodes.extend(nodes)
        else:
            failed += 1
            lines.append(f"fail\t{entry.image_id}\t{payload}")
            log.error("%s: %s", entry.image_id, payload)
    (out_dir / "preprocess.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.augment_seed is not None and args.ground_truth is not None:
        data_io.write_ground_truth(aug_nodes, out_dir / "augmented_ground_truth.jsonl")
    print(f"processed {len(manifest.entries) - failed}/{len(manifest.entries)} entries into {out_dir}")
    return EXIT_VALIDATION if failed else EXIT_OK


# -- split ---------------------------------------------------------------------


def cmd_split(args: argparse.Namespace) -> int:
    ids = data_io.read_patient_list(args.patients)
    assignment = patient_split(ids, args.ratios, args.seed)
    data_io.write_split(assignment.mapping, args.out)
    train, val, test = assignment.counts()
    print(f"train={train} val={val} test={test} seed={args.seed}")
    return EXIT_OK


# -- fuse ----------------------------------------------------------------------


def _group_of(source_id: str, sep: str | None) -> str:
    return source_id.split(sep, 1)[0] if sep else ""


def fuse_predictions(
    pred_set: data_io.PredictionSet,
    iou_thr: float,
    rescale: str,
    num_sources: int | None = None,
    group_sep: str | None = None,
    workers: int = 1,
) -> list[Detection]:
    """Per-image WBF; with ``group_sep`` each source-id prefix group is fused separately."""
    group_sizes: dict[str, int] = {}
    for sid in pred_set.headers:
        g = _group_of(sid, group_sep)
        group_sizes[g] = group_sizes.get(g, 0) + 1

    def fuse_image(dets: list[Detection]) -> list[Detection]:
        groups: dict[str, list[Detection]] = {}
        for d in dets:
            groups.setdefault(_group_of(d.source_id, group_sep), []).append(d)
        out = []
        for g in sorted(groups):
            t = num_sources if num_sources is not None else group_sizes[g]
            cfg = FusionConfig(iou_threshold=iou_thr, num_sources=t, score_rescale=rescale)
            out.extend(wbf(groups[g], cfg))
        return sorted(out, key=sort_key)

    fused = _pmap(fuse_image, pred_set.by_image.values(), workers)
    return [d for dets in fused for d in dets]


def cmd_fuse(args: argparse.Namespace) -> int:
    pred_set = data_io.load_predictions(args.predictions, args.num_sources)
    # validate before any file is written
    FusionConfig(args.iou_thr, pred_set.num_sources, args.rescale)
    fused = fuse_predictions(
        pred_set, args.iou_thr, args.rescale,
        num_sources=args.num_sources, group_sep=args.group_sep, workers=args.workers,
    )
    headers = list(pred_set.headers.values())
    digest = data_io.config_digest(
        {
            "iou_threshold": args.iou_thr,
            "num_sources": args.num_sources,
            "score_rescale": ScoreRescale(args.rescale).value,
            "group_sep": args.group_sep,
            "inputs": [[h.source_id, h.created_at, h.config_digest] for h in headers],
        }
    )
    header = data_io.PredictionHeader(
        source_id=FUSED_SOURCE,
        created_at=max((h.created_at for h in headers), default=""),
        config_digest=digest,
    )
    data_io.write_prediction_file(data_io.PredictionFile(header, fused), args.out)
    n_in = sum(len(v) for v in pred_set.by_image.values())
    print(
        f"fused {n_in} detections from {len(headers)} sources (T={pred_set.num_sources}) "
        f"into {len(fused)} boxes over {len(pred_set.by_image)} images"
    )
    return EXIT_OK


# -- eval / froc ---------------------------------------------------------------


def _load_eval_inputs(args: argparse.Namespace) -> tuple[list[Detection], list[GroundTruthNode], list[str]]:
    gts = data_io.load_ground_truth(args.ground_truth)
    pred_set = data_io.load_predictions(args.predictions)
    gt_images = sorted({g.image_id for g in gts})
    if not gts:
        raise NoGroundTruth(f"{args.ground_truth}: no ground-truth nodes")
    extra = sorted(set(pred_set.by_image) - set(gt_images))
    if extra:
        log.warning(
            "%d predicted image(s) have no ground truth and are ignored (e.g. %s)",
            len(extra), ", ".join(extra[:3]),
        )
    if not set(pred_set.by_image) & set(gt_images) and pred_set.by_image:
        log.warning("prediction and ground-truth image ids are disjoint")
    dets = [d for img in gt_images for d in pred_set.by_image.get(img, [])]
    return dets, gts, gt_images


def _eval_config(args: argparse.Namespace) -> EvalConfig:
    return EvalConfig(
        iou_tp_threshold=args.iou_tp, fp_thresholds=args.fp_thresholds, sad_cutoff_mm=args.sad_cutoff
    )


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _eval_config(args)
    dets, gts, images = _load_eval_inputs(args)
    results = evaluate(dets, gts, cfg, args.method_name, images, workers=args.workers)
    reports = [r.report for r in results]
    sys.stdout.write(render_report(reports, cfg.fp_thresholds))
    if args.report_json:
        Path(args.report_json).write_text(data_io.reports_to_json(reports), encoding="utf-8")
    if args.froc_csv:
        curve = results[0].curve
        if curve is None or not curve.points:
            log.warning("no detections to sweep; FROC CSV not written")
        else:
            data_io.write_froc_csv(curve, args.froc_csv)
    return EXIT_OK


def cmd_froc(args: argparse.Namespace) -> int:
    cfg = _eval_config(args)
    dets, gts, images = _load_eval_inputs(args)
    stratum = Stratum(args.stratum)
    result = next(r for r in evaluate(dets, gts, cfg, "froc", images) if r.report.stratum is stratum)
    if result.num_gt == 0:
        raise NoGroundTruth(f"stratum {stratum.value} has no ground truth")
    for k, v in result.report.sensitivities_percent.items():
        print(f"S@{k:g}\t{v / 100.0:.6f}")
    if args.out:
        if not result.curve.points:
            log.warning("no detections to sweep; FROC CSV not written")
        else:
            data_io.write_froc_csv(result.curve, args.out)
    return EXIT_OK


# -- match ---------------------------------------------------------------------


def cmd_match(args: argparse.Namespace) -> int:
    weights = MatchCostWeights(args.lambda_cls, args.lambda_l1, args.lambda_giou)
    focal = FocalParams(args.alpha, args.gamma)
    pf = data_io.read_prediction_file(args.predictions)
    gts = data_io.load_ground_truth(args.ground_truth)
    dims: dict[str, ImageDims] = {}
    if args.manifest:
        dims = {e.image_id: e.image_dims for e in data_io.load_manifest(args.manifest).entries}
    default_dims = ImageDims(*args.image_size) if args.image_size else None

    preds_by_img: dict[str, list[Detection]] = {}
    for d in pf.records:
        preds_by_img.setdefault(d.image_id, []).append(d)
    gts_by_img: dict[str, list[GroundTruthNode]] = {}
    for g in gts:
        gts_by_img.setdefault(g.image_id, []).append(g)

    for img in sorted(set(preds_by_img) | set(gts_by_img)):
        d = dims.get(img, default_dims)
        if d is None:
            raise ValidationError(f"no image size for {img!r}; pass --image-size or --manifest")
        queries = [QueryPrediction(to_norm(p.box, d), p.score) for p in preds_by_img.get(img, [])]
        targets = [to_norm(g.box, d) for g in gts_by_img.get(img, [])]
        try:
            a = match(queries, targets, weights, focal)
        except NothingToMatch:
            print(f"{img}\tnothing to match")
            continue
        pairs = " ".join(f"({i},{j})" for i, j in a.pairs)
        print(f"{img}\tpairs={pairs}\ttotal_cost={a.total_cost:.6f}")
    return EXIT_OK


# -- report --------------------------------------------------------------------


def cmd_report(args: argparse.Namespace) -> int:
    reports = [r for path in args.reports for r in data_io.load_reports(path)]
    if not reports:
        raise ValidationError("no reports to render")
    text = render_report(reports)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# -- parser --------------------------------------------------------------------


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action: argparse.Action) -> str:
        text = action.help or ""
        if action.default is None or action.default is argparse.SUPPRESS or "default:" in text:
            return text
        return super()._get_help_string(action)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--predictions", required=True, nargs="+", help="prediction file(s)")
    p.add_argument("--ground-truth", required=True, help="ground-truth records")
    p.add_argument("--iou-tp", type=float, default=_EVAL.iou_tp_threshold,
                   help="IoU needed for a true positive")
    p.add_argument("--fp-thresholds", type=_float_list, default=_EVAL.fp_thresholds,
                   help=f"FP-per-image budgets (default: {_fmt_list(_EVAL.fp_thresholds)})")
    p.add_argument("--sad-cutoff", type=float, default=_EVAL.sad_cutoff_mm,
                   help="short-axis cutoff in mm for size strata")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="lndet", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="normalize, equalize and cut 3-slice inputs", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="dataset manifest (JSON)")
    p.add_argument("--out-dir", required=True, help="directory for triplet volumes")
    p.add_argument("--lo-pct", type=float, default=1.0, help="lower intensity percentile")
    p.add_argument("--hi-pct", type=float, default=99.0, help="upper intensity percentile")
    p.add_argument("--bins", type=_positive_int, default=256, help="histogram equalization bins")
    p.add_argument("--augment-seed", type=int, default=None,
                   help="apply a sampled flip/crop/shift/rotation drawn from this seed")
    p.add_argument("--ground-truth", type=Path, default=None,
                   help="boxes to transform alongside --augment-seed")
    p.add_argument("--workers", type=_positive_int, default=1, help="worker threads")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", help="seeded patient-level train/val/test split", formatter_class=fmt)
    p.add_argument("--patients", required=True, help="file with one patient id per line")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed")
    p.add_argument("--ratios", type=float, nargs=3, default=(0.6, 0.2, 0.2),
                   metavar=("TRAIN", "VAL", "TEST"), help="split proportions")
    p.add_argument("--out", required=True, help="output CSV (patient_id,split)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("fuse", help="weighted boxes fusion of ensemble predictions", formatter_class=fmt)
    p.add_argument("predictions", nargs="+", help="prediction files, one per model/epoch")
    p.add_argument("--iou-thr", type=float, default=_FUSION.iou_threshold, help="clustering IoU threshold")
    p.add_argument("--num-sources", type=_positive_int, default=None,
                   help="ensemble size T (default: number of distinct source ids)")
    p.add_argument("--rescale", choices=[s.value for s in ScoreRescale],
                   default=_FUSION.score_rescale.value, help="cluster-size score rescaling")
    p.add_argument("--group-sep", default=None,
                   help="fuse each source-id prefix (text before SEP) separately")
    p.add_argument("--out", required=True, help="fused prediction file")
    p.add_argument("--workers", type=_positive_int, default=1, help="worker threads")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="mAP and FROC report for all size strata", formatter_class=fmt)
    _add_eval_flags(p)
    p.add_argument("--method-name", default="method", help="row label in the report")
    p.add_argument("--froc-csv", default=None, help="write the all-strata FROC sweep here")
    p.add_argument("--report-json", default=None, help="store report metrics as JSON")
    p.add_argument("--workers", type=_positive_int, default=1, help="worker threads")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("froc", help="FROC sensitivities and sweep CSV", formatter_class=fmt)
    _add_eval_flags(p)
    p.add_argument("--stratum", choices=[s.value for s in Stratum], default=Stratum.ALL.value,
                   help="size stratum to sweep")
    p.add_argument("--out", default=None, help="FROC CSV output")
    p.set_defaults(func=cmd_froc)

    p = sub.add_parser("match", help="optimal query-to-ground-truth assignment", formatter_class=fmt)
    p.add_argument("--predictions", required=True, help="query predictions; score is the node probability")
    p.add_argument("--ground-truth", required=True, help="ground-truth records")
    p.add_argument("--image-size", type=_positive_int, nargs=2, metavar=("WIDTH", "HEIGHT"),
                   default=None, help="image size used to normalize boxes")
    p.add_argument("--manifest", default=None, help="per-image sizes from a dataset manifest")
    p.add_argument("--lambda-cls", type=float, default=_WEIGHTS.lambda_cls, help="focal class cost weight")
    p.add_argument("--lambda-l1", type=float, default=_WEIGHTS.lambda_l1, help="L1 box cost weight")
    p.add_argument("--lambda-giou", type=float, default=_WEIGHTS.lambda_giou, help="GIoU cost weight")
    p.add_argument("--alpha", type=float, default=_FOCAL.alpha, help="focal alpha")
    p.add_argument("--gamma", type=float, default=_FOCAL.gamma, help="focal gamma")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("report", help="render stored report metrics as a table", formatter_class=fmt)
    p.add_argument("reports", nargs="+", help="report JSON files")
    p.add_argument("--out", default=None, help="also write the table here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except NoGroundTruth as exc:
        log.error("%s", exc)
        return EXIT_NO_GROUND_TRUTH
    except FormatError as exc:
        log.error("%s", exc)
        return EXIT_FORMAT
    except ValidationError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
