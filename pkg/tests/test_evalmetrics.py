"""Metric arithmetic, annotation IO, and the query-path benchmark."""
import numpy as np
import pytest

from langfield.autoencoder import AutoencoderConfig, init_params
from langfield.errors import DataFormatError
from langfield.evalmetrics import (
    BBox,
    GroundTruth,
    MetricsReport,
    SceneMetrics,
    benchmark_channels,
    benchmark_query,
    eval_iou,
    eval_localization,
    eval_miou_accuracy,
    load_ground_truth,
    mask_iou,
    save_ground_truth,
)
from langfield.query import CanonicalSet, QueryEmbedding
from langfield.scene import SyntheticSceneSpec, synth_scene

from reference import miou_accuracy_reference


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


# --------------------------------------------------------------- localization

def test_center_hit_and_one_pixel_miss():
    box = BBox(10, 10, 20, 20)
    assert eval_localization([(15, 15)], [box]) == 100.0
    assert eval_localization([(21, 15)], [box]) == 0.0


def test_boundary_pixels_count_as_inside():
    box = BBox(3, 4, 8, 9)
    for corner in [(3, 4), (8, 4), (3, 9), (8, 9)]:
        assert box.contains(*corner)
    assert not box.contains(2, 4)
    assert not box.contains(3, 10)


def test_localization_accuracy_is_hit_fraction():
    box = BBox(0, 0, 4, 4)
    preds = [(0, 0), (4, 4), (5, 0), (0, 5)]
    assert eval_localization(preds, [box] * 4) == 50.0


def test_localization_pair_mismatch_and_empty():
    with pytest.raises(DataFormatError):
        eval_localization([(0, 0)], [])
    with pytest.raises(DataFormatError):
        eval_localization([], [])


def test_bbox_validation():
    with pytest.raises(DataFormatError):
        BBox(5, 0, 4, 9).validate()
    with pytest.raises(DataFormatError):
        BBox(-1, 0, 4, 9).validate()
    with pytest.raises(DataFormatError):
        BBox(0, 0, 64, 9).validate(width=64, height=64)
    BBox(0, 0, 63, 63).validate(width=64, height=64)


# ----------------------------------------------------------------------- IoU

def test_iou_trivials():
    a = np.zeros((6, 6), dtype=bool)
    a[1:4, 1:4] = True
    b = np.zeros((6, 6), dtype=bool)
    b[4:6, 4:6] = True
    assert eval_iou([a], [a.copy()]) == 100.0
    assert eval_iou([a], [b]) == 0.0


def test_iou_half_overlap_square_is_one_third():
    pred = np.zeros((4, 6), dtype=bool)
    gt = np.zeros((4, 6), dtype=bool)
    pred[0:2, 0:2] = True      # 2x2 square
    gt[1:3, 0:2] = True        # same square shifted one row: overlap 2, union 6
    assert eval_iou([pred], [gt]) == pytest.approx(100.0 / 3.0, abs=1e-9)


def test_iou_empty_vs_empty_is_one():
    e = np.zeros((3, 3), dtype=bool)
    assert mask_iou(e, e) == 1.0


def test_iou_symmetry_and_self():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.random((8, 8)) < 0.4
        b = rng.random((8, 8)) < 0.4
        assert mask_iou(a, b) == mask_iou(b, a)
        if a.any():
            assert mask_iou(a, a) == 1.0


def test_iou_shape_mismatch():
    with pytest.raises(DataFormatError):
        mask_iou(np.zeros((2, 2), dtype=bool), np.zeros((3, 3), dtype=bool))


# ------------------------------------------------------------ mIoU / accuracy

def test_miou_perfect_prediction():
    gt = np.array([[1, 1], [2, 2]])
    assert eval_miou_accuracy(gt.copy(), gt) == (100.0, 100.0)


def test_miou_one_class_fully_wrong():
    gt = np.array([[1, 1], [2, 2]])
    pred = np.ones_like(gt)
    miou, acc = eval_miou_accuracy(pred, gt)
    assert acc == 50.0
    # class 1: intersection 2 of union 4; class 2: empty intersection
    assert miou == pytest.approx(25.0)


def test_miou_ignores_unlabeled_pixels():
    gt = np.array([[1, 0], [0, 2]])
    pred_a = np.array([[1, 1], [2, 2]])
    pred_b = np.array([[1, 9], [7, 2]])
    assert eval_miou_accuracy(pred_a, gt) == eval_miou_accuracy(pred_b, gt)


def test_miou_matches_confusion_matrix_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        gt = rng.integers(0, 4, size=(12, 12))
        pred = rng.integers(1, 4, size=(12, 12))
        got = eval_miou_accuracy(pred, gt)
        want = miou_accuracy_reference(pred, gt)
        assert got[0] == pytest.approx(want[0], abs=1e-9)
        assert got[1] == pytest.approx(want[1], abs=1e-9)


def test_miou_rejects_empty_or_mismatched_gt():
    with pytest.raises(DataFormatError):
        eval_miou_accuracy(np.ones((2, 2), dtype=int), np.zeros((2, 2), dtype=int))
    with pytest.raises(DataFormatError):
        eval_miou_accuracy(np.ones((2, 2), dtype=int), np.ones((3, 3), dtype=int))


# -------------------------------------------------------------------- report

def test_overall_is_unweighted_scene_mean():
    report = MetricsReport(scenes={
        "a": SceneMetrics(100.0, 80.0, 60.0, 90.0),
        "b": SceneMetrics(50.0, 40.0, 20.0, 70.0),
    })
    overall = report.overall()
    assert overall.localization_accuracy == 75.0
    assert overall.mean_iou == 60.0
    assert overall.miou == 40.0
    assert overall.accuracy == 80.0


def test_report_validation_and_csv():
    report = MetricsReport(scenes={"a": SceneMetrics(100.0, 80.0, 60.0, 90.0)})
    csv = report.to_csv()
    lines = csv.strip().split("\n")
    assert lines[0].startswith("scene,")
    assert lines[-1].startswith("overall,")
    bad = MetricsReport(scenes={"a": SceneMetrics(101.0, 0.0, 0.0, 0.0)})
    with pytest.raises(DataFormatError):
        bad.validate()
    with pytest.raises(DataFormatError):
        MetricsReport(scenes={}).validate()


# ------------------------------------------------------------- annotation IO

def test_ground_truth_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    gt = GroundTruth(scene_id="fixture")
    gt.boxes[("view00", "object 1")] = BBox(2, 3, 10, 12)
    gt.boxes[("view01", "object 2")] = BBox(0, 0, 5, 5)
    gt.masks[("view00", "object 1")] = rng.random((16, 16)) < 0.3
    path = tmp_path / "scene.json"
    save_ground_truth(path, gt)
    loaded = load_ground_truth(path)
    assert loaded.scene_id == "fixture"
    assert loaded.boxes == gt.boxes
    np.testing.assert_array_equal(loaded.masks[("view00", "object 1")],
                                  gt.masks[("view00", "object 1")])


def test_ground_truth_malformations(tmp_path):
    path = tmp_path / "gt.json"
    path.write_text("[]")
    with pytest.raises(DataFormatError, match="scene"):
        load_ground_truth(path)
    path.write_text('{"scene": "s", "localization": [{"view": "v"}]}')
    with pytest.raises(DataFormatError, match="localization"):
        load_ground_truth(path)
    path.write_text('{"scene": "s", "segmentation": [{"view": "v", "query": "q", "mask": "nope.png"}]}')
    with pytest.raises(DataFormatError, match="mask"):
        load_ground_truth(path)


# ----------------------------------------------------------------- benchmarks

def bench_setup():
    scene, cams, _ = synth_scene(SyntheticSceneSpec(
        n_gaussians=200, n_objects=2, n_views=2, width=32, height=32, seed=6))
    params = init_params(AutoencoderConfig(input_dim=8, latent_dim=3, hidden=(6,)),
                         np.random.default_rng(0))
    rng = np.random.default_rng(3)
    queries = [QueryEmbedding(label=f"q{i}", vector=unit(rng.normal(size=8)))
               for i in range(2)]
    canon = CanonicalSet(
        labels=("object", "things", "stuff", "texture"),
        vectors=np.stack([unit(rng.normal(size=8)) for _ in range(4)]),
    )
    return scene, cams, params, queries, canon


def test_benchmark_outputs_are_deterministic():
    scene, cams, params, queries, canon = bench_setup()
    _, run_a = benchmark_query(scene, cams, params, queries, canon)
    _, run_b = benchmark_query(scene, cams, params, queries, canon)
    assert run_a == run_b
    assert len(run_a) == len(cams) * len(queries)


def test_benchmark_decomposition_sums_to_total():
    scene, cams, params, queries, canon = bench_setup()
    benchmark_query(scene, cams, params, queries, canon)  # warm the kernels
    timing, _ = benchmark_query(scene, cams, params, queries, canon)
    parts = timing.render_s + timing.score_s + timing.protocol_s
    assert parts <= timing.total_s
    assert timing.total_s - parts <= 0.05 * timing.total_s
    assert timing.per_query_s == timing.total_s / timing.n_queries


def test_benchmark_channels_reports_each_width():
    scene, cams, _, _, _ = bench_setup()
    out = benchmark_channels(scene, cams[0], widths=[3, 6], repeats=2)
    assert set(out) == {3, 6}
    assert all(v > 0 for v in out.values())


def test_benchmark_rejects_empty_inputs():
    scene, cams, params, queries, canon = bench_setup()
    with pytest.raises(DataFormatError):
        benchmark_query(scene, [], params, queries, canon)
    with pytest.raises(DataFormatError):
        benchmark_query(scene, cams, params, [], canon)
