import csv
import json

import numpy as np
import pytest

from core.errors import ValidationError
from core.evalkit import (PSNR_CAP, comparison_grid, depth_metrics, evaluate_sequence, load_metrics, psnr, report,
                          ssim, summarize, table_depth_map, write_metrics)
from core.types import CameraModel, Plane
from utils.helpers import look_at

FULL = np.ones((8, 8), dtype=bool)


def test_psnr_of_uniform_error():
    a = np.zeros((8, 8, 3))
    b = np.full((8, 8, 3), 0.1)
    assert psnr(a, b, FULL) == pytest.approx(20.0)


def test_psnr_only_counts_masked_pixels():
    a = np.zeros((8, 8, 3))
    b = a.copy()
    b[:, :4] = 1.0
    mask = np.zeros((8, 8), dtype=bool)
    mask[:, 4:] = True
    assert psnr(a, b, mask) == PSNR_CAP


def test_psnr_identical_images_hit_the_cap():
    image = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(image, image, FULL, cap=60.0) == 60.0


def test_psnr_rejects_empty_mask():
    with pytest.raises(ValidationError):
        psnr(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)), np.zeros((8, 8)))


def test_ssim_identical_is_one():
    image = np.random.default_rng(1).uniform(size=(16, 16, 3))
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:12, 4:12] = True
    assert ssim(image, image, mask) == pytest.approx(1.0)


def test_table_depth_for_camera_looking_down():
    pose = look_at([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], up=(0.0, 1.0, 0.0))
    camera = CameraModel("top", 20.0, 20.0, 8.0, 8.0, 16, 16, pose)
    depth = table_depth_map(camera, Plane(np.array([0.0, 0.0, 1.0]), 0.0))
    np.testing.assert_allclose(depth, 1.0, atol=1e-12)


def test_depth_metrics_relative_error():
    gt = np.full((8, 8), 2.0)
    abs_rel, rmse = depth_metrics(1.1 * gt, gt, FULL, 3.0)
    assert abs_rel == pytest.approx(0.1)
    assert rmse == pytest.approx(0.2)


def test_depth_metrics_fills_background_with_table():
    gt = np.zeros((8, 8))
    gt[2:4, 2:4] = 1.0
    mask = gt > 0
    pred = gt.copy()
    abs_rel, rmse = depth_metrics(pred, gt, mask, 1.5)
    assert abs_rel == 0.0 and rmse == 0.0


def test_depth_metrics_rejects_missing_table_depth():
    with pytest.raises(ValidationError):
        depth_metrics(np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((8, 8)), 0.0)


def test_static_evaluation_scores_every_frame_and_camera(tiny_sequence, tiny_cfg):
    result = evaluate_sequence(None, tiny_sequence, tiny_cfg, mode="static")
    assert result["mode"] == "static"
    assert result["task"] == "lift"
    assert len(result["per_frame"]) == tiny_sequence.num_frames * len(tiny_sequence.cameras)
    assert 0.0 < result["psnr"] <= tiny_cfg.eval.psnr_cap
    assert 0.0 <= result["abs_rel"]


def test_initial_splats_reproduce_the_first_frame(tiny_sequence, tiny_cfg):
    result = evaluate_sequence(None, tiny_sequence, tiny_cfg, mode="resim")
    first = [row for row in result["per_frame"] if row["frame"] == 0]
    assert len(first) == len(tiny_sequence.cameras)
    for row in first:
        assert row["psnr"] == tiny_cfg.eval.psnr_cap
        if row["abs_rel"] is not None:
            assert row["abs_rel"] < 1e-5


def test_evaluate_rejects_unknown_mode(tiny_sequence, tiny_cfg):
    with pytest.raises(ValidationError):
        evaluate_sequence(None, tiny_sequence, tiny_cfg, mode="replay")


def _record(task="cloth", psnr_value=25.0, method="softsplat"):
    return {"method": method, "task": task, "mode": "general", "frames": 10, "cameras": 3,
            "sequences": ["seq_000"], "abs_rel": 0.05, "rmse": 0.01, "psnr": psnr_value, "ssim": 0.9}


def test_summarize_averages_sequences():
    results = [dict(_record(psnr_value=20.0), sequence="a"), dict(_record(psnr_value=30.0), sequence="b")]
    record = summarize(results)
    assert record["psnr"] == pytest.approx(25.0)
    assert record["frames"] == 20
    assert record["sequences"] == ["a", "b"]


def test_summarize_rejects_empty():
    with pytest.raises(ValidationError):
        summarize([])


def test_metrics_file_round_trip(tmp_path):
    write_metrics(_record(), tmp_path / "val_metrics.json")
    assert load_metrics(tmp_path / "val_metrics.json")["psnr"] == 25.0


def test_load_metrics_requires_fields(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"task": "cloth", "psnr": 1.0}))
    with pytest.raises(ValidationError):
        load_metrics(tmp_path / "m.json")


def test_report_table_layout(tmp_path):
    rows = report([_record("cloth"), _record("rope", method="static")], tmp_path / "report.csv")
    assert len(rows) == 2
    with open(tmp_path / "report.csv", newline="") as f:
        table = list(csv.DictReader(f))
    assert list(table[0])[:4] == ["method", "mode", "cloth/abs_rel", "cloth/rmse"]
    assert table[0]["cloth/psnr"] == "25.000000"
    assert table[0]["cloth/lpips"] == ""
    assert table[0]["rope/psnr"] == ""
    assert table[1]["method"] == "static"


def test_report_needs_records(tmp_path):
    with pytest.raises(ValidationError):
        report([], tmp_path / "report.csv")


def test_comparison_grid_shape():
    preds = [np.zeros((4, 5, 3)) for _ in range(3)]
    gts = [np.ones((4, 5, 3)) for _ in range(3)]
    grid = comparison_grid(preds, gts)
    assert grid.shape == (12, 10, 3)
    assert grid.dtype == np.uint8
    assert grid[0, 0, 0] == 0 and grid[0, 5, 0] == 255


def test_comparison_grid_rejects_mismatch():
    with pytest.raises(ValidationError):
        comparison_grid([np.zeros((4, 4, 3))], [])
