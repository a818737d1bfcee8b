import sys
from pathlib import Path

import pytest
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from lndet.fusion import Detection  # noqa: E402
from lndet.geometry import BBox  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@st.composite
def boxes(draw, lo=-100.0, hi=100.0, min_size=1e-3, max_size=100.0):
    x1 = draw(st.floats(lo, hi))
    y1 = draw(st.floats(lo, hi))
    w = draw(st.floats(min_size, max_size))
    h = draw(st.floats(min_size, max_size))
    return BBox(x1, y1, x1 + w, y1 + h)


def det(x1, y1, x2, y2, score, source="e1", image_id="img", label=0):
    return Detection(image_id, BBox(x1, y1, x2, y2), score, source, label)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")
    config.acceptance_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "call" or report.failed:
        number, title = marker.args
        item.config.acceptance_results[number] = (title, report.passed, report.duration)


def pytest_terminal_summary(terminalreporter, config):
    results = config.acceptance_results
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, duration = results[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {title} ({duration:.2f}s)")


def detr_row_dataset(out_dir: Path) -> tuple[Path, Path]:
    """Ground truth and predictions whose sweep lands on the DETR reference row.

    84 images with one node each; the flag fixture lists the ranked outcome
    of every detection. Hits duplicate their node's box, misses sit in an
    empty corner.
    """
    from lndet.data_io import PredictionFile, PredictionHeader, write_ground_truth, write_prediction_file
    from lndet.evaluation import GroundTruthNode

    flags = (FIXTURES / "detr_row_flags.txt").read_text().strip()
    n_images = 84
    images = [f"img{k:03d}" for k in range(n_images)]
    gts = [GroundTruthNode(img, BBox(10, 10, 50, 50), 15.0, 12.0) for img in images]
    dets, hits, misses = [], 0, 0
    for i, flag in enumerate(flags):
        score = 1 - (i + 1) / (len(flags) + 1)
        if flag == "T":
            dets.append(Detection(images[hits], BBox(10, 10, 50, 50), score, "detr"))
            hits += 1
        else:
            dets.append(Detection(images[misses % n_images], BBox(60, 60, 70, 70), score, "detr"))
            misses += 1
    gt_path, pred_path = out_dir / "gt.jsonl", out_dir / "pred.jsonl"
    write_ground_truth(gts, gt_path)
    write_prediction_file(PredictionFile(PredictionHeader("detr"), dets), pred_path)
    return gt_path, pred_path


def synthetic_ensemble(out_dir: Path, n_images=20, n_sources=5, seed=0) -> tuple[Path, list[Path]]:
    """Jittered copies of every node from each source plus scattered misses."""
    import random

    from lndet.data_io import PredictionFile, PredictionHeader, write_ground_truth, write_prediction_file
    from lndet.evaluation import GroundTruthNode

    rng = random.Random(seed)
    gts = []
    for k in range(n_images):
        for _ in range(rng.randint(1, 3)):
            x, y = rng.uniform(0, 200), rng.uniform(0, 200)
            w, h = rng.uniform(8, 40), rng.uniform(8, 40)
            sad = rng.uniform(4, 20)
            gts.append(GroundTruthNode(f"img{k:02d}", BBox(x, y, x + w, y + h), sad + rng.uniform(0, 8), sad))
    gt_path = out_dir / "gt.jsonl"
    write_ground_truth(gts, gt_path)
    paths = []
    for s in range(n_sources):
        src = f"e{s + 1}"
        dets = []
        for g in gts:
            if rng.random() < 0.8:
                j = [rng.uniform(-3, 3) for _ in range(4)]
                b = g.box
                dets.append(Detection(g.image_id, BBox(b.x1 + j[0], b.y1 + j[1], b.x2 + 4 + j[2], b.y2 + 4 + j[3]),
                                      rng.uniform(0.3, 1.0), src))
        for k in range(n_images):
            for _ in range(rng.randint(0, 2)):
                x, y = rng.uniform(0, 240), rng.uniform(0, 240)
                dets.append(Detection(f"img{k:02d}", BBox(x, y, x + 12, y + 12), rng.uniform(0, 0.6), src))
        p = out_dir / f"{src}.jsonl"
        write_prediction_file(PredictionFile(PredictionHeader(src, f"2024-01-0{s + 1}", "cfg"), dets), p)
        paths.append(p)
    return gt_path, paths
