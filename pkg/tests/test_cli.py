import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from wasr.cli import main
from wasr.config import load_config

TOY_CFG = """
input_h=48
input_w=64
channels_res2=4
channels_res3=4
channels_res4=4
channels_res5=4
count=8
obstacle_size_min=8
obstacle_size_max=14
epochs=1
seed=21
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One toy dataset plus a 1-epoch checkpoint shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "toy.cfg"
    cfg.write_text(TOY_CFG)
    data = root / "data"
    run = root / "run"
    assert main(["synth", "--config", str(cfg), "--out", str(data)]) == 0
    assert main(["train", str(data), "--config", str(cfg), "--out", str(run)]) == 0
    return {"root": root, "cfg": cfg, "data": data, "run": run}


def test_no_command_is_usage_error():
    assert main([]) == 1


def test_unknown_flag_is_usage_error(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--bogus", "1"]) == 1


def test_synth_count_zero_is_usage_error(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--count", "0"]) == 1


def test_synth_writes_frames_and_effective_config(workspace):
    data = workspace["data"]
    assert len(list((data / "images").glob("*.png"))) == 8
    assert len(list((data / "masks").glob("*.png"))) == 8
    echoed = load_config(data / "effective.cfg")
    assert echoed.count == 8
    assert echoed.input_h == 48


def test_synth_repeat_same_hash(workspace, tmp_path):
    cfg = workspace["cfg"]
    first = json.loads((workspace["data"] / "manifest.json").read_text())
    other = tmp_path / "again"
    assert main(["synth", "--config", str(cfg), "--out", str(other)]) == 0
    again = json.loads((other / "manifest.json").read_text())
    assert again["content_hash"] == first["content_hash"]
    # regenerating into the same populated directory must not drift either
    assert main(["synth", "--config", str(cfg), "--out", str(other)]) == 0
    third = json.loads((other / "manifest.json").read_text())
    assert third["content_hash"] == first["content_hash"]


def test_train_outputs(workspace):
    run = workspace["run"]
    for suffix in (".params", ".optim", ".json"):
        assert (run / f"epoch_001{suffix}").exists()
    with open(run / "losses.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8  # one step per frame, one epoch
    assert {"step", "lr", "focal", "ws", "l2", "total"} <= set(rows[0])


def test_train_lambda1_zero_logs_zero_ws(workspace, tmp_path):
    out = tmp_path / "run0"
    code = main(["train", str(workspace["data"]), "--config", str(workspace["cfg"]),
                 "--out", str(out), "--lambda1", "0"])
    assert code == 0
    with open(out / "losses.csv") as fh:
        assert all(float(r["ws"]) == 0.0 for r in csv.DictReader(fh))


def test_train_resume_flag_reproduces_run(workspace, tmp_path):
    base = dict(data=str(workspace["data"]), cfg=str(workspace["cfg"]))
    full = tmp_path / "full"
    assert main(["train", base["data"], "--config", base["cfg"],
                 "--out", str(full), "--epochs", "2"]) == 0
    part = tmp_path / "part"
    assert main(["train", base["data"], "--config", base["cfg"],
                 "--out", str(part), "--epochs", "2"]) == 0
    for suffix in (".params", ".optim", ".json"):
        (part / f"epoch_002{suffix}").unlink()
    code = main(["train", base["data"], "--config", base["cfg"],
                 "--out", str(part), "--epochs", "2", "--resume", "epoch_001"])
    assert code == 0
    assert (part / "epoch_002.params").read_bytes() == \
        (full / "epoch_002.params").read_bytes()


def test_train_missing_dataset_is_data_error(workspace, tmp_path):
    code = main(["train", str(tmp_path / "nope"), "--config",
                 str(workspace["cfg"]), "--out", str(tmp_path / "r")])
    assert code == 2


@pytest.fixture(scope="module")
def predictions(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("preds")
    code = main(["infer", str(workspace["run"] / "epoch_001"),
                 str(workspace["data"]), "--config", str(workspace["cfg"]),
                 "--out", str(out), "--overlay"])
    assert code == 0
    return out


def test_infer_one_record_per_frame(predictions):
    masks = sorted((predictions / "masks").glob("*.png"))
    assert len(masks) == 8
    det_lines = (predictions / "detections.jsonl").read_text().splitlines()
    edge_lines = (predictions / "edge.jsonl").read_text().splitlines()
    assert len(det_lines) == len(edge_lines) == 8
    frames = [json.loads(line)["frame"] for line in det_lines]
    assert frames == sorted(frames)


def test_infer_masks_use_class_values_only(predictions):
    for path in (predictions / "masks").glob("*.png"):
        values = np.unique(np.asarray(Image.open(path)))
        assert set(values.tolist()) <= {0, 1, 2}


def test_infer_overlays_written(predictions):
    overlays = list((predictions / "overlays").glob("*.png"))
    assert len(overlays) == 8
    sample = np.asarray(Image.open(overlays[0]))
    assert sample.shape == (48, 64, 3)


def test_infer_no_imu_runs_same_checkpoint(workspace, tmp_path):
    out = tmp_path / "p"
    code = main(["infer", str(workspace["run"] / "epoch_001"),
                 str(workspace["data"]), "--config", str(workspace["cfg"]),
                 "--out", str(out), "--no-imu"])
    assert code == 0
    assert (out / "detections.jsonl").exists()


def test_infer_resolution_mismatch_is_data_error(workspace, tmp_path):
    big = tmp_path / "big.cfg"
    big.write_text("input_h=96\ninput_w=128\n")
    code = main(["infer", str(workspace["run"] / "epoch_001"),
                 str(workspace["data"]), "--config", str(big),
                 "--out", str(tmp_path / "p")])
    assert code == 2


def test_eval_gt_against_itself_is_perfect(workspace, tmp_path, capsys):
    out = tmp_path / "ev"
    code = main(["eval", str(workspace["data"]), str(workspace["data"]),
                 "--config", str(workspace["cfg"]), "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["overall"]["f"] == 100.0
    assert report["overall"]["mu_edg"] == 0.0
    assert report["overall"]["fp"] == 0 and report["overall"]["fn"] == 0
    assert "100.0" in capsys.readouterr().out


def test_eval_scores_real_predictions(workspace, predictions, tmp_path):
    out = tmp_path / "ev"
    code = main(["eval", str(predictions), str(workspace["data"]),
                 "--config", str(workspace["cfg"]), "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["overall"]["frames"] == 8


def test_eval_empty_predictions_count_as_misses(workspace, tmp_path, capsys):
    preds = tmp_path / "empty"
    preds.mkdir()
    (preds / "detections.jsonl").write_text("")
    (preds / "edge.jsonl").write_text("")
    out = tmp_path / "ev"
    code = main(["eval", str(preds), str(workspace["data"]),
                 "--config", str(workspace["cfg"]), "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    gt_boxes = sum(
        len(json.loads(line)["boxes"])
        for line in (workspace["data"] / "gt_boxes.jsonl").read_text().splitlines()
    )
    assert report["overall"]["tp"] == 0
    assert report["overall"]["fn"] == gt_boxes
    assert report["overall"]["f"] is None
    out_text = capsys.readouterr().out
    assert " - " in out_text or out_text.rstrip().endswith("-")


def test_eval_frame_id_mismatch_is_data_error(workspace, tmp_path, capsys):
    preds = tmp_path / "bad"
    preds.mkdir()
    (preds / "detections.jsonl").write_text(
        json.dumps({"frame": 999, "detections": []}) + "\n")
    (preds / "edge.jsonl").write_text("")
    code = main(["eval", str(preds), str(workspace["data"]),
                 "--config", str(workspace["cfg"])])
    assert code == 2
    assert "999" in capsys.readouterr().err


def test_eval_counts_arithmetic(capsys):
    assert main(["eval", "--counts", "12,3,4"]) == 0
    assert "F=77.4" in capsys.readouterr().out
    assert main(["eval", "--counts", "10,0,0"]) == 0
    assert "F=100.0" in capsys.readouterr().out
    assert main(["eval", "--counts", "0,0,0"]) == 0
    assert "F=-" in capsys.readouterr().out


def test_eval_counts_rejects_bad_input():
    assert main(["eval", "--counts", "1,2"]) == 1
    assert main(["eval", "--counts", "a,b,c"]) == 1
    assert main(["eval", "--counts", "1,2,-3"]) == 1


def test_ablate_three_rows_and_switch_log(workspace, tmp_path):
    out = tmp_path / "abl"
    code = main(["ablate", str(workspace["data"]), "--config",
                 str(workspace["cfg"]), "--out", str(out), "--epochs", "1"])
    assert code == 0
    report = json.loads((out / "ablation.json").read_text())
    assert [r["variant"] for r in report["rows"]] == ["full", "nows", "noimu"]
    assert len(report["rows"]) == 3
    assert isinstance(report["separation_lower"], bool)
    assert isinstance(report["edge_not_worse"], bool)
    switches = report["switches"]
    assert len(switches) == 2
    assert any("lambda1" in s for s in switches)
    assert any("use_imu" in s for s in switches)
    text = (out / "ablation.txt").read_text()
    for name in ("full", "nows", "noimu"):
        assert name in text


def test_module_entry_point_runs_in_subprocess():
    proc = subprocess.run(
        [sys.executable, "-m", "wasr.cli", "eval", "--counts", "10,0,0"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "F=100.0" in proc.stdout
