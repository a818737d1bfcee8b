"""File formats: binary volumes, newline-delimited ground truth and
predictions, dataset manifests, split files, FROC CSVs and stored reports.

Every reader rejects malformed input instead of repairing it, and every error
message names the file and the offending line or byte offset.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from lndet.errors import (
    BadMagicError,
    FormatError,
    TruncatedVolumeError,
    ValidationError,
    ZeroDimsError,
)
from lndet.evaluation import EvalReport, FrocCurve, GroundTruthNode, Stratum
from lndet.fusion import Detection, sort_key
from lndet.geometry import BBox, ImageDims
from lndet.preprocessing import Volume

VOLUME_MAGIC = b"LNV1"
_VOLUME_HEADER = struct.Struct("<4s3I3d")
MANIFEST_VERSION = "1"

PathLike = str | Path


# -- volumes -------------------------------------------------------------------


def write_volume(v: Volume, path: PathLike) -> None:
    w, h, d = v.dims
    raster = np.ascontiguousarray(v.voxels, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_VOLUME_HEADER.pack(VOLUME_MAGIC, w, h, d, *v.spacing_mm))
        fh.write(raster.tobytes(order="C"))


def read_volume(path: PathLike) -> Volume:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != VOLUME_MAGIC:
        raise BadMagicError(f"{path}: byte 0: expected magic {VOLUME_MAGIC!r}, got {data[:4]!r}")
    if len(data) < _VOLUME_HEADER.size:
        raise TruncatedVolumeError(
            f"{path}: byte {len(data)}: header needs {_VOLUME_HEADER.size} bytes"
        )
    _, w, h, d, sx, sy, sz = _VOLUME_HEADER.unpack_from(data)
    if 0 in (w, h, d):
        raise ZeroDimsError(f"{path}: byte 4: zero dimension in {w}x{h}x{d}")
    expected = _VOLUME_HEADER.size + 4 * w * h * d
    if len(data) < expected:
        raise TruncatedVolumeError(
            f"{path}: byte {len(data)}: raster truncated, expected {expected} bytes for {w}x{h}x{d}"
        )
    if len(data) > expected:
        raise FormatError(f"{path}: byte {expected}: {len(data) - expected} trailing bytes")
    raster = np.frombuffer(data, dtype="<f4", offset=_VOLUME_HEADER.size).reshape(d, h, w)
    try:
        return Volume(voxels=raster.astype(np.float32), spacing_mm=(sx, sy, sz))
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


# -- newline-delimited records -------------------------------------------------


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _iter_records(path: PathLike) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{lineno}: expected an object per line")
            yield lineno, rec


def _require(rec: dict, keys: Sequence[str], where: str) -> None:
    missing = [k for k in keys if k not in rec]
    if missing:
        raise FormatError(f"{where}: missing key(s) {', '.join(missing)}")


def _number(rec: dict, key: str, where: str) -> float:
    val = rec[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise FormatError(f"{where}: {key} must be a number, got {val!r}")
    return float(val)


def _box(rec: dict, where: str) -> BBox:
    try:
        return BBox(*(_number(rec, k, where) for k in ("x1", "y1", "x2", "y2")))
    except ValidationError as exc:
        raise ValidationError(f"{where}: malformed box: {exc}") from None


_GT_KEYS = ("image_id", "x1", "y1", "x2", "y2", "lad_mm", "sad_mm")


def load_ground_truth(path: PathLike) -> list[GroundTruthNode]:
    nodes = []
    for lineno, rec in _iter_records(path):
        where = f"{path}:{lineno}"
        _require(rec, _GT_KEYS, where)
        box = _box(rec, where)
        try:
            nodes.append(
                GroundTruthNode(
                    image_id=str(rec["image_id"]),
                    box=box,
                    lad_mm=_number(rec, "lad_mm", where),
                    sad_mm=_number(rec, "sad_mm", where),
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None
    return nodes


def write_ground_truth(nodes: Iterable[GroundTruthNode], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for n in nodes:
            b = n.box
            fh.write(
                _dumps(
                    {"image_id": n.image_id, "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2,
                     "lad_mm": n.lad_mm, "sad_mm": n.sad_mm}
                )
                + "\n"
            )


@dataclass(frozen=True)
class PredictionHeader:
    source_id: str
    created_at: str = ""
    config_digest: str = ""


@dataclass
class PredictionFile:
    header: PredictionHeader
    records: list[Detection] = field(default_factory=list)


_PRED_KEYS = ("image_id", "x1", "y1", "x2", "y2", "score")


def read_prediction_file(path: PathLike) -> PredictionFile:
    """Read a prediction file, keeping records in file order.

    The first non-blank line is ``{"header": {...}}``; every further line is
    one detection.
    """
    header: PredictionHeader | None = None
    records: list[Detection] = []
    for lineno, rec in _iter_records(path):
        where = f"{path}:{lineno}"
        if header is None:
            h = rec.get("header")
            if not isinstance(h, dict):
                raise FormatError(f"{where}: first record must be a header object")
            _require(h, ("source_id",), where)
            if not isinstance(h["source_id"], str) or not h["source_id"]:
                raise FormatError(f"{where}: header source_id must be a non-empty string")
            header = PredictionHeader(
                source_id=h["source_id"],
                created_at=str(h.get("created_at", "")),
                config_digest=str(h.get("config_digest", "")),
            )
            continue
        _require(rec, _PRED_KEYS, where)
        source = rec.get("source_id", header.source_id)
        if source != header.source_id:
            raise ValidationError(
                f"{where}: record source_id {source!r} differs from header {header.source_id!r}"
            )
        label = rec.get("label", 0)
        if isinstance(label, bool) or not isinstance(label, int):
            raise FormatError(f"{where}: label must be an integer, got {label!r}")
        box = _box(rec, where)
        try:
            records.append(
                Detection(
                    image_id=str(rec["image_id"]),
                    box=box,
                    score=_number(rec, "score", where),
                    source_id=header.source_id,
                    label=label,
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None
    if header is None:
        raise FormatError(f"{path}:1: missing header line")
    return PredictionFile(header=header, records=records)


def write_prediction_file(pf: PredictionFile, path: PathLike) -> None:
    h = pf.header
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(
            _dumps({"header": {"source_id": h.source_id, "created_at": h.created_at,
                               "config_digest": h.config_digest}})
            + "\n"
        )
        for d in pf.records:
            if d.source_id != h.source_id:
                raise ValidationError(
                    f"record source_id {d.source_id!r} differs from header {h.source_id!r}"
                )
            b = d.box
            fh.write(
                _dumps({"image_id": d.image_id, "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2,
                        "score": d.score, "label": d.label})
                + "\n"
            )


@dataclass
class PredictionSet:
    by_image: dict[str, list[Detection]]
    num_sources: int
    headers: dict[str, PredictionHeader]

    def all_detections(self) -> list[Detection]:
        return [d for dets in self.by_image.values() for d in dets]


def load_predictions(paths: Sequence[PathLike], num_sources: int | None = None) -> PredictionSet:
    """Union of several prediction files grouped by image.

    The ensemble size defaults to the number of distinct source ids. Files
    may share a source id only if their headers agree.
    """
    if not paths:
        raise ValidationError("load_predictions needs at least one file")
    headers: dict[str, PredictionHeader] = {}
    by_image: dict[str, list[Detection]] = {}
    for path in paths:
        pf = read_prediction_file(path)
        prev = headers.get(pf.header.source_id)
        if prev is not None and prev != pf.header:
            raise ValidationError(
                f"{path}: source_id {pf.header.source_id!r} already loaded with a different header"
            )
        headers[pf.header.source_id] = pf.header
        for d in pf.records:
            by_image.setdefault(d.image_id, []).append(d)
    if num_sources is not None and num_sources < 1:
        raise ValidationError(f"num_sources must be >= 1, got {num_sources}")
    return PredictionSet(
        by_image={k: sorted(by_image[k], key=sort_key) for k in sorted(by_image)},
        num_sources=num_sources if num_sources is not None else len(headers),
        headers=dict(sorted(headers.items())),
    )


def config_digest(payload: Any) -> str:
    return hashlib.sha256(_dumps(payload).encode("utf-8")).hexdigest()


# -- manifests and splits ------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    patient_id: str
    image_id: str
    volume_path: Path
    center_slice: int
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]

    @property
    def image_dims(self) -> ImageDims:
        return ImageDims(self.dims[0], self.dims[1])


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    version: str = MANIFEST_VERSION

    def by_image(self) -> dict[str, ManifestEntry]:
        return {e.image_id: e for e in self.entries}


_MANIFEST_KEYS = ("patient_id", "image_id", "volume_path", "center_slice", "dims", "spacing_mm")


def load_manifest(path: PathLike) -> DatasetManifest:
    """JSON manifest; relative volume paths resolve against the manifest's directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise FormatError(f"{path}: manifest must be an object with an 'entries' list")
    version = str(doc.get("version", MANIFEST_VERSION))
    if version != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {version!r}")
    entries = []
    seen: set[str] = set()
    for k, raw in enumerate(doc["entries"]):
        where = f"{path}: entries[{k}]"
        if not isinstance(raw, dict):
            raise FormatError(f"{where}: expected an object")
        _require(raw, _MANIFEST_KEYS, where)
        if not raw["volume_path"]:
            raise ValidationError(f"{where}: empty volume_path")
        image_id = str(raw["image_id"])
        if image_id in seen:
            raise ValidationError(f"{where}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        try:
            dims = tuple(int(x) for x in raw["dims"])
            spacing = tuple(float(x) for x in raw["spacing_mm"])
            center = int(raw["center_slice"])
        except (TypeError, ValueError):
            raise FormatError(f"{where}: dims, spacing_mm and center_slice must be numeric") from None
        if len(dims) != 3 or len(spacing) != 3:
            raise FormatError(f"{where}: dims and spacing_mm need three values")
        if min(dims) < 1 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise ValidationError(f"{where}: dims and spacing must be positive")
        vol_path = Path(raw["volume_path"])
        if not vol_path.is_absolute():
            vol_path = path.parent / vol_path
        entries.append(ManifestEntry(str(raw["patient_id"]), image_id, vol_path, center, dims, spacing))
    return DatasetManifest(entries=entries, version=version)


def write_manifest(m: DatasetManifest, path: PathLike) -> None:
    doc = {
        "version": m.version,
        "entries": [
            {"patient_id": e.patient_id, "image_id": e.image_id, "volume_path": str(e.volume_path),
             "center_slice": e.center_slice, "dims": list(e.dims), "spacing_mm": list(e.spacing_mm)}
            for e in m.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_patient_list(path: PathLike) -> list[str]:
    """One patient id per line; blank lines and ``#`` comments are skipped."""
    ids = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                ids.append(line)
    return ids


def write_split(mapping: dict[str, str], path: PathLike) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["patient_id", "split"])
    for pid in sorted(mapping):
        writer.writerow([pid, mapping[pid]])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_split(path: PathLike) -> dict[str, str]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["patient_id", "split"]:
            raise FormatError(f"{path}:1: expected header 'patient_id,split'")
        return {row["patient_id"]: row["split"] for row in reader}


# -- results -------------------------------------------------------------------


def write_froc_csv(curve: FrocCurve, path: PathLike) -> None:
    if not curve.points:
        raise ValidationError("cannot write an empty FROC curve")
    pts = sorted(curve.points, key=lambda p: -p.score_threshold)
    lines = ["score_threshold,fp_per_image,sensitivity"]
    lines += [f"{p.score_threshold:.6f},{p.fp_per_image:.6f},{p.sensitivity:.6f}" for p in pts]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def reports_to_json(reports: Iterable[EvalReport]) -> str:
    doc = [
        {
            "method_name": r.method_name,
            "stratum": r.stratum.value,
            "sad_cutoff_mm": r.sad_cutoff_mm,
            "map_percent": r.map_percent,
            "sensitivities_percent": {f"{k:g}": v for k, v in r.sensitivities_percent.items()},
            "no_ground_truth": r.no_ground_truth,
        }
        for r in reports
    ]
    return json.dumps({"reports": doc}, indent=2, sort_keys=True) + "\n"


def load_reports(path: PathLike) -> list[EvalReport]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("reports"), list):
        raise FormatError(f"{path}: expected an object with a 'reports' list")
    out = []
    for k, raw in enumerate(doc["reports"]):
        where = f"{path}: reports[{k}]"
        if not isinstance(raw, dict) or "method_name" not in raw:
            raise FormatError(f"{where}: each report needs a method_name")
        try:
            sens = {float(t): (None if v is None else float(v))
                    for t, v in raw.get("sensitivities_percent", {}).items()}
            out.append(
                EvalReport(
                    method_name=str(raw["method_name"]),
                    map_percent=None if raw.get("map_percent") is None else float(raw["map_percent"]),
                    sensitivities_percent=sens,
                    stratum=Stratum(raw.get("stratum", "all")),
                    sad_cutoff_mm=float(raw.get("sad_cutoff_mm", 10.0)),
                    no_ground_truth=bool(raw.get("no_ground_truth", False)),
                )
            )
        except (TypeError, ValueError, AttributeError) as exc:
            raise FormatError(f"{where}: {exc}") from None
    for r in out:
        vals = [r.map_percent, *r.sensitivities_percent.values()]
        if any(v is not None and not 0.0 <= v <= 100.0 for v in vals):
            raise ValidationError(f"{path}: report {r.label!r} has a percentage outside [0, 100]")
    return out
