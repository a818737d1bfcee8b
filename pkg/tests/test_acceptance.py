"""Numbered acceptance criteria; each prints a PASS/FAIL line in the run summary."""

import itertools
import json
import random
import struct
import time

import numpy as np
import pytest

from conftest import det, detr_row_dataset, synthetic_ensemble
from lndet import data_io
from lndet.cli import main
from lndet.data_io import PredictionFile, PredictionHeader
from lndet.errors import BadMagicError, FormatError, TruncatedVolumeError, ValidationError, ZeroDimsError
from lndet.evaluation import (
    EvalConfig,
    GroundTruthNode,
    assign_tp_fp,
    average_precision,
    evaluate,
    froc,
    render_report,
)
from lndet.fusion import FusionConfig, wbf
from lndet.geometry import BBox
from lndet.matching import EPS, focal_cls_cost, solve_assignment
from lndet.preprocessing import (
    SPLITS,
    Volume,
    extract_triplet,
    hist_equalize,
    patient_split,
    percentile_normalize,
)
from oracles import brute_force_assignment, reference_wbf, staircase_ap


@pytest.mark.acceptance(1, "assignment optimality on 500 matrices up to 7x7, exact")
def test_assignment_optimality():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    for k in range(500):
        n, m = rng.integers(1, 8, size=2)
        # half continuous, half small integers so that tied optima are common
        if k % 2:
            cost = rng.integers(0, 5, size=(n, m)).astype(float)
        else:
            cost = rng.uniform(-10, 10, size=(n, m))
        got = solve_assignment(cost)
        assert got.total_cost == brute_force_assignment(cost), cost
        assert len(got.pairs) == min(n, m)
    assert time.perf_counter() - start < 5


@pytest.mark.acceptance(2, "WBF equals the reference procedure on 1000 instances within 1e-9")
def test_wbf_reference_equivalence():
    rng = random.Random(2)
    modes = ["min_ratio", "plain_ratio", "none"]
    start = time.perf_counter()
    for k in range(1000):
        n_src = rng.randint(1, 4)
        dets = []
        for _ in range(rng.randint(0, 20)):
            x, y = rng.uniform(0, 60), rng.uniform(0, 60)
            w, h = rng.uniform(2, 30), rng.uniform(2, 30)
            s = rng.choice([rng.random(), round(rng.random(), 1)])
            dets.append(det(x, y, x + w, y + h, s, f"e{rng.randint(1, n_src)}", label=rng.choice([0, 0, 1])))
        thr = rng.choice([0.4, 0.55, 0.7])
        cfg = FusionConfig(thr, n_src, modes[k % 3])
        got = wbf(dets, cfg)
        ref = reference_wbf(
            [d.box.as_tuple() for d in dets], [d.score for d in dets], [d.source_id for d in dets],
            [d.label for d in dets], thr, n_src, modes[k % 3],
        )
        assert len(got) == len(ref)
        for g, (box, score, label) in zip(got, ref):
            assert max(abs(a - b) for a, b in zip(g.box.as_tuple(), box)) <= 1e-9
            assert abs(g.score - score) <= 1e-9
            assert g.label == label
    assert time.perf_counter() - start < 10


@pytest.mark.acceptance(3, "AP equals staircase integration within 1e-12")
def test_ap_oracle_equivalence():
    for n in range(7):
        for flags in itertools.product([False, True], repeat=n):
            for num_gt in range(max(sum(flags), 1), 4):
                scores = [1.0 - k / 8 for k in range(n)]
                assert abs(average_precision(scores, list(flags), num_gt) - staircase_ap(list(flags), num_gt)) <= 1e-12

    rng = random.Random(3)
    for _ in range(200):
        gts = []
        for _ in range(rng.randint(1, 3)):
            x, y = rng.uniform(0, 40), rng.uniform(0, 40)
            gts.append(GroundTruthNode("img", BBox(x, y, x + 10, y + 10), 12.0, 12.0))
        dets = []
        for _ in range(rng.randint(0, 6)):
            g = rng.choice(gts).box
            dx, dy = rng.uniform(-6, 6), rng.uniform(-6, 6)
            dets.append(det(g.x1 + dx, g.y1 + dy, g.x2 + dx, g.y2 + dy, rng.random()))
        flags = assign_tp_fp(dets, gts, 0.5).is_tp
        ranked = [f for _, f in sorted(zip([-d.score for d in dets], flags))]
        got = average_precision([d.score for d in dets], flags, len(gts))
        assert abs(got - staircase_ap(ranked, len(gts))) <= 1e-12


@pytest.mark.acceptance(4, "FROC sensitivities monotone and bounded; hand sweep exact")
def test_froc_contract():
    sens, curve = froc([0.9, 0.8, 0.7], [True, False, True], num_images=2, num_gt=2, fp_thresholds=[0.25, 0.5])
    assert [(p.score_threshold, p.fp_per_image, p.sensitivity) for p in curve.points] == [
        (0.9, 0.0, 0.5), (0.8, 0.5, 0.5), (0.7, 0.5, 1.0)
    ]
    assert sens == {0.25: 0.5, 0.5: 1.0}

    rng = random.Random(4)
    cfg = EvalConfig()
    for _ in range(200):
        gts, dets = [], []
        for i in range(rng.randint(1, 6)):
            for _ in range(rng.randint(0, 3)):
                x, y = rng.uniform(0, 80), rng.uniform(0, 80)
                sad = rng.uniform(3, 20)
                gts.append(GroundTruthNode(f"i{i}", BBox(x, y, x + 12, y + 12), sad + 1, sad))
            for _ in range(rng.randint(0, 8)):
                x, y = rng.uniform(0, 80), rng.uniform(0, 80)
                dets.append(det(x, y, x + 12, y + 12, round(rng.random(), 2), image_id=f"i{i}"))
        if not gts:
            continue
        for result in evaluate(dets, gts, cfg):
            if result.num_gt == 0:
                continue
            vals = [result.report.sensitivities_percent[k] / 100 for k in cfg.fp_thresholds]
            assert all(0.0 <= v <= 1.0 for v in vals)
            assert vals == sorted(vals)


@pytest.mark.acceptance(5, "focal matching cost hand values and monotone grid")
def test_matching_cost_values():
    assert abs(focal_cls_cost(0.5) - -0.086643) <= 1e-6
    assert abs(focal_cls_cost(0.9) - -1.398557) <= 1e-6
    grid = np.linspace(EPS, 1 - EPS, 1000)
    costs = [focal_cls_cost(float(p)) for p in grid]
    assert all(b < a for a, b in zip(costs, costs[1:]))


@pytest.mark.acceptance(6, "report renderer reproduces the DETR reference rows")
def test_reference_row_fixtures(fixtures_dir, tmp_path, capsys):
    reports = data_io.load_reports(fixtures_dir / "detr_reference_rows.json")
    lines = render_report(reports).splitlines()
    assert lines[0].split() == ["Method", "mAP", "S@0.5", "S@1", "S@2", "S@4", "S@6", "S@8", "S@16"]
    cells = [line.split()[-8:] for line in lines[2:]]
    all_row, below, above = cells
    assert all_row[0] == "65.41" and all_row[1] == "65.47"
    assert all_row[3] == "88.09" and all_row[4] == "91.66"
    assert below[0] == "53.57" and above[0] == "70.84"

    # the same strings come out of a full evaluation of the synthetic row fixture
    gt, pred = detr_row_dataset(tmp_path)
    assert main(["eval", "--predictions", str(pred), "--ground-truth", str(gt), "--method-name", "DETR"]) == 0
    row = capsys.readouterr().out.splitlines()[2].split()
    assert row[1:] == all_row


@pytest.mark.acceptance(7, "patient split counts 225/76/75 and partitions for N in 3..1000")
def test_split_counts():
    assert patient_split([f"P{k:04d}" for k in range(376)], seed=0).counts() == (225, 76, 75)
    for n in range(3, 1001):
        ids = [f"p{k}" for k in range(n)]
        s = patient_split(ids, seed=n % 17)
        members = [s.members(x) for x in SPLITS]
        assert sorted(itertools.chain(*members)) == sorted(ids)
        train, val, test = (len(m) for m in members)
        assert train == (6 * n) // 10 and val >= 1 and test >= 1 and abs(val - test) <= 1


@pytest.mark.acceptance(8, "intensity invariants on 100 volumes and triplet edge replication")
def test_preprocessing_invariants():
    rng = np.random.default_rng(8)
    for k in range(100):
        shape = tuple(rng.integers(1, 12, size=3))
        data = rng.gamma(2.0, 40.0, size=shape) if k % 2 else rng.normal(0, 300, size=shape)
        norm = percentile_normalize(Volume(data)).voxels
        assert 0.0 <= norm.min() and norm.max() <= 1.0
        order = np.argsort(data, axis=None, kind="stable")
        assert np.all(np.diff(norm.ravel()[order]) >= 0)
        eq = hist_equalize(Volume(norm)).voxels
        assert 0.0 <= eq.min() and eq.max() <= 1.0
        order = np.argsort(norm, axis=None, kind="stable")
        assert np.all(np.diff(eq.ravel()[order]) >= 0)

    data = rng.random((5, 4, 3))
    v = Volume(data)
    assert np.array_equal(extract_triplet(v, 0).channels, data[[0, 0, 1]])
    assert np.array_equal(extract_triplet(v, 4).channels, data[[3, 4, 4]])
    one = Volume(data[:1])
    assert np.array_equal(extract_triplet(one, 0).channels, data[[0, 0, 0]])


@pytest.mark.acceptance(9, "volume, ground-truth and prediction round trips; distinct malformed-input errors")
def test_format_round_trips(tmp_path):
    rng = random.Random(9)
    nrng = np.random.default_rng(9)
    for k in range(50):
        shape = tuple(nrng.integers(1, 6, size=3))
        data = nrng.normal(0, 1e3, size=shape).astype(np.float32)
        spacing = tuple(rng.uniform(0.1, 5) for _ in range(3))
        p = tmp_path / f"v{k}.lnv"
        data_io.write_volume(Volume(data, spacing), p)
        back = data_io.read_volume(p)
        assert back.voxels.tobytes() == data.tobytes() and back.spacing_mm == spacing

        nodes = []
        for _ in range(rng.randint(0, 6)):
            x, y, sad = rng.uniform(0, 300), rng.uniform(0, 300), rng.uniform(1, 30)
            nodes.append(GroundTruthNode(f"i{rng.randint(0, 3)}", BBox(x, y, x + rng.uniform(1, 50),
                                                                        y + rng.uniform(1, 50)),
                                         sad + rng.uniform(0, 10), sad))
        data_io.write_ground_truth(nodes, tmp_path / "gt.jsonl")
        assert data_io.load_ground_truth(tmp_path / "gt.jsonl") == nodes

        dets = [det(x, y, x + rng.uniform(1, 40), y + rng.uniform(1, 40), rng.random(), "s",
                    f"i{rng.randint(0, 3)}", rng.randint(0, 2))
                for x, y in ((rng.uniform(0, 300), rng.uniform(0, 300)) for _ in range(rng.randint(0, 8)))]
        pf = PredictionFile(PredictionHeader("s", f"t{k}", f"{k:x}"), dets)
        data_io.write_prediction_file(pf, tmp_path / "p.jsonl")
        assert data_io.read_prediction_file(tmp_path / "p.jsonl") == pf

    def raw(name, magic, dims, n):
        path = tmp_path / name
        path.write_bytes(struct.pack("<4s3I3d", magic, *dims, 1.0, 1.0, 1.0) + bytes(4 * n))
        return path

    with pytest.raises(BadMagicError):
        data_io.read_volume(raw("m.lnv", b"XXXX", (1, 1, 1), 1))
    with pytest.raises(TruncatedVolumeError):
        data_io.read_volume(raw("t.lnv", b"LNV1", (4, 4, 4), 63))
    with pytest.raises(ZeroDimsError):
        data_io.read_volume(raw("z.lnv", b"LNV1", (0, 4, 4), 0))
    kinds = {BadMagicError, TruncatedVolumeError, ZeroDimsError}
    assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)

    bad = tmp_path / "bad.jsonl"
    rec = {"image_id": "a", "x1": 0, "y1": 0, "x2": 1, "y2": 1, "lad_mm": 5, "sad_mm": 9}
    bad.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ValidationError, match="bad.jsonl:1"):
        data_io.load_ground_truth(bad)
    del rec["lad_mm"]
    bad.write_text("\n" + json.dumps(rec) + "\n")
    with pytest.raises(FormatError, match="bad.jsonl:2"):
        data_io.load_ground_truth(bad)


@pytest.mark.acceptance(10, "fuse + eval byte-identical across runs and worker counts")
def test_end_to_end_determinism(tmp_path, capsys):
    gt, preds = synthetic_ensemble(tmp_path, n_images=20)
    outputs = []
    for run, workers in enumerate((1, 4, 1, 4)):
        fused = tmp_path / f"fused{run}.jsonl"
        csv_path = tmp_path / f"froc{run}.csv"
        js = tmp_path / f"report{run}.json"
        assert main(["fuse", *map(str, preds), "--out", str(fused), "--workers", str(workers)]) == 0
        capsys.readouterr()
        assert main(["eval", "--predictions", str(fused), "--ground-truth", str(gt), "--froc-csv", str(csv_path),
                     "--report-json", str(js), "--workers", str(workers)]) == 0
        outputs.append((fused.read_bytes(), capsys.readouterr().out, csv_path.read_bytes(), js.read_bytes()))
    assert all(o == outputs[0] for o in outputs)
    assert len(data_io.read_prediction_file(tmp_path / "fused0.jsonl").records) > 0
