import json

import numpy as np
import pytest

import main
from core.evalkit import write_metrics
from core.serialization import dataset_sequences, load_sequence, read_json
from tests.conftest import TINY_OVERRIDES


def _tiny_args():
    args = []
    for item in TINY_OVERRIDES:
        args += ["--set", item]
    return args


def _summary(capsys):
    lines = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    assert len(lines) == 1
    return json.loads(lines[0])


def test_help_exits_cleanly():
    with pytest.raises(SystemExit) as info:
        main.main(["--help"])
    assert info.value.code == 0


def test_unknown_command_is_a_usage_error():
    with pytest.raises(SystemExit) as info:
        main.main(["explode"])
    assert info.value.code == 2


def test_malformed_override_is_a_usage_error(tmp_path):
    assert main.main(["calib", "--dataset", str(tmp_path), "--set", "world.frames"]) == main.EXIT_USAGE


def test_invalid_override_value_is_a_usage_error(tmp_path):
    assert main.main(["calib", "--dataset", str(tmp_path), "--set", "world.frames=3"]) == main.EXIT_USAGE


def test_missing_dataset_is_a_runtime_error(tmp_path, capsys):
    assert main.main(["calib", "--dataset", str(tmp_path / "nowhere")]) == main.EXIT_RUNTIME
    assert capsys.readouterr().out == ""


def test_eval_without_checkpoint_needs_static_mode(tiny_dataset, tmp_path):
    code = main.main(["eval", "--dataset", str(tiny_dataset), "--mode", "general", "--out", str(tmp_path)]
                     + _tiny_args())
    assert code == main.EXIT_USAGE


def test_calibrate_recovers_ground_truth(tiny_dataset):
    sequence = load_sequence(dataset_sequences(tiny_dataset)[0])
    calib = main.calibrate(sequence)
    truth = sequence.metadata["calibration_truth"]
    assert calib["scale"] == pytest.approx(float(truth["scale"]), rel=1e-9)
    np.testing.assert_allclose(calib["translation"], truth["translation"], atol=1e-9)
    np.testing.assert_allclose(calib["gravity"], [0.0, 0.0, -1.0], atol=1e-9)
    assert calib["pose_residual"] < 1e-9


def test_calib_command_writes_json(tiny_dataset, tmp_path, capsys):
    out = tmp_path / "calib.json"
    assert main.main(["calib", "--dataset", str(tiny_dataset), "--out", str(out)] + _tiny_args()) == main.EXIT_OK
    summary = _summary(capsys)
    assert summary["command"] == "calib"
    assert summary["scale_error"] < 1e-9
    assert read_json(out)["plane"]["normal"] == pytest.approx([0.0, 0.0, 1.0], abs=1e-9)
    assert summary["plane_residual"] < 1e-9
    assert read_json(out)["plane_residual"] == summary["plane_residual"]


def test_static_eval_command(tiny_dataset, tmp_path, capsys):
    out = tmp_path / "static"
    code = main.main(["eval", "--dataset", str(tiny_dataset), "--mode", "static", "--out", str(out)]
                     + _tiny_args())
    assert code == main.EXIT_OK
    summary = _summary(capsys)
    assert summary["mode"] == "static"
    assert (out / "val_metrics.json").exists()
    assert list(out.glob("grid_*.png"))


def test_report_command(tmp_path, capsys):
    for name, value in (("a", 20.0), ("b", 30.0)):
        write_metrics({"task": "cloth", "mode": "general", "abs_rel": 0.1, "rmse": 0.01, "psnr": value,
                       "ssim": 0.9}, tmp_path / name / "val_metrics.json")
    out = tmp_path / "report.csv"
    code = main.main(["report", "--runs", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(out)])
    assert code == main.EXIT_OK
    assert _summary(capsys)["rows"] == 2
    lines = out.read_text().splitlines()
    assert lines[1].startswith("a,general,")
    assert lines[2].startswith("b,general,")


@pytest.mark.slow
def test_gen_command_writes_dataset(tmp_path, capsys):
    out = tmp_path / "data"
    code = main.main(["gen", "--out", str(out), "--task", "lift", "--object", "rope", "--seqs", "2"]
                     + _tiny_args())
    assert code == main.EXIT_OK
    summary = _summary(capsys)
    assert summary["sequences"] == 2
    assert summary["train"] == 1 and summary["test"] == 1
    assert (out / "config.json").exists()
