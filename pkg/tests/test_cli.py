"""Command-line entry points, run end to end on tiny inputs."""

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from clft.cli import OVERLAY_COLORS, RunConfig, main, plane_preview
from clft.geometry import save_cloud
from clft.synthetic import default_rig
from clft.tensor import load_tensor

FIXTURES = Path(__file__).parent / "fixtures" / "project"
SMALL_ENCODER = {"variant": "toy", "depth": 4, "dim": 16, "heads": 2, "taps": [0, 1, 2, 3], "features": 8}


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["gen-synthetic", str(root), "--n", "5", "--seed", "1"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = {"encoder": SMALL_ENCODER, "train": {"batch": 2, "max_epochs": 2, "split": [0.6, 0.2, 0.2]},
           "dataset": str(dataset_dir), "out": str(out)}
    (out / "run.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(out / "run.json")]) == 0
    return out


class TestProject:
    def test_golden_fixture(self, tmp_path):
        assert main(["project", str(FIXTURES / "cloud.txt"), str(FIXTURES / "rig.json"), str(tmp_path)]) == 0
        for name in ("xy", "yz", "xz", "occupancy"):
            np.testing.assert_array_equal(load_tensor(tmp_path / f"{name}.bin"),
                                          load_tensor(FIXTURES / f"expected_{name}.bin"))

    def test_dilate_zero_same_as_default(self, tmp_path):
        args = [str(FIXTURES / "cloud.txt"), str(FIXTURES / "rig.json")]
        main(["project", *args, str(tmp_path / "a")])
        main(["project", *args, str(tmp_path / "b"), "--dilate", "0"])
        for f in ("xy.bin", "yz.bin", "xz.bin", "occupancy.bin", "xy.png"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_dilation_fills_more(self, tmp_path):
        args = [str(FIXTURES / "cloud.txt"), str(FIXTURES / "rig.json")]
        main(["project", *args, str(tmp_path / "a")])
        main(["project", *args, str(tmp_path / "b"), "--dilate", "2"])
        assert load_tensor(tmp_path / "b" / "occupancy.bin").sum() > load_tensor(tmp_path / "a" / "occupancy.bin").sum()

    def test_empty_cloud(self, tmp_path):
        save_cloud(tmp_path / "empty.txt", np.zeros((0, 3)))
        assert main(["project", str(tmp_path / "empty.txt"), str(FIXTURES / "rig.json"), str(tmp_path / "o")]) == 0
        assert not load_tensor(tmp_path / "o" / "xy.bin").any()
        assert np.asarray(Image.open(tmp_path / "o" / "xy.png")).max() == 0

    def test_preview_scaling(self):
        grid = np.array([[0.0, -2.0], [1.0, 4.0]])
        occ = np.array([[False, True], [True, True]])
        np.testing.assert_array_equal(plane_preview(grid, occ), [[0, 128], [64, 255]])

    def test_missing_file_is_usage_error(self, tmp_path):
        assert main(["project", str(tmp_path / "nope.txt"), str(FIXTURES / "rig.json"), str(tmp_path)]) == 2


class TestMakeMasks:
    def test_single_frame_matches_dataset_mask(self, dataset_dir, tmp_path):
        stem = dataset_dir / "frame_000000"
        rig = tmp_path / "rig.json"
        default_rig().save(rig)
        code = main(["make-masks", "--cloud", str(stem.with_suffix(".cloud")), "--boxes",
                     str(stem.with_suffix(".boxes")), "--rig", str(rig), "--out", str(tmp_path / "m.bin"),
                     "--preview", str(tmp_path / "m.png")])
        assert code == 0
        np.testing.assert_array_equal(load_tensor(tmp_path / "m.bin"), load_tensor(stem.with_suffix(".mask")))
        assert (tmp_path / "m.png").exists()

    def test_incomplete_arguments(self):
        assert main(["make-masks", "--cloud", "x"]) == 2


class TestTrainEval:
    def test_outputs(self, trained):
        lines = (trained / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0])["epoch"] == 0
        manifest = json.loads((trained / "checkpoint" / "manifest.json").read_text())
        assert set(manifest["splits"]) == {"train", "val", "test"}
        assert "out" not in manifest["run_config"]

    def test_zero_epochs(self, dataset_dir, tmp_path):
        assert main(["train", "--dataset", str(dataset_dir), "--out", str(tmp_path), "--variant", "toy",
                     "--max-epochs", "0"]) == 0
        assert (tmp_path / "train_log.jsonl").read_text() == ""
        assert (tmp_path / "checkpoint" / "manifest.json").exists()

    def test_unknown_config_key(self, dataset_dir, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"train": {"learning_rate": 0.1}}))
        assert main(["train", "--config", str(tmp_path / "bad.json"), "--dataset", str(dataset_dir),
                     "--out", str(tmp_path)]) == 2

    def test_invalid_value(self, dataset_dir, tmp_path):
        assert main(["train", "--dataset", str(dataset_dir), "--out", str(tmp_path), "--lr0", "-1"]) == 2

    def test_flags_override_config(self):
        cfg = RunConfig.model_validate({"train": {"lr0": 0.5}})
        assert cfg.train_config().lr0 == 0.5

    def test_eval_reproduces_train_iou(self, trained, dataset_dir, tmp_path):
        assert main(["eval", str(trained / "checkpoint"), str(dataset_dir), "--split", "train",
                     "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        manifest = json.loads((trained / "checkpoint" / "manifest.json").read_text())
        got = report["metrics"]["all-weather"]["C+L"]
        for cls in ("vehicle", "human"):
            assert got[cls]["iou"] == manifest["train_iou"][cls]

    def test_eval_camera_mode_masks_use_palette(self, trained, dataset_dir, tmp_path):
        assert main(["eval", str(trained / "checkpoint"), str(dataset_dir), "--modality", "C",
                     "--out", str(tmp_path)]) == 0
        masks = sorted((tmp_path / "masks").glob("*.png"))
        assert len(masks) == 5 and len(list((tmp_path / "overlays").glob("*.png"))) == 5
        palette = {tuple(c) for c in OVERLAY_COLORS.tolist()}
        for m in masks:
            colors = {tuple(c) for c in np.asarray(Image.open(m)).reshape(-1, 3).tolist()}
            assert colors <= palette
        assert "all-weather" in (tmp_path / "report.txt").read_text()

    def test_eval_bad_checkpoint(self, dataset_dir, tmp_path):
        assert main(["eval", str(tmp_path / "missing"), str(dataset_dir), "--out", str(tmp_path)]) == 2


class TestGradcheckAndBench:
    def test_ops_suite_passes(self, capsys):
        assert main(["gradcheck", "--scope", "ops"]) == 0
        cap = capsys.readouterr()
        out = cap.out + cap.err
        assert "FAIL" not in out and "PASS gelu" in out

    def test_injected_fault_fails(self, capsys):
        assert main(["gradcheck", "--scope", "ops", "--inject-fault"]) == 1
        cap = capsys.readouterr()
        assert "FAIL gelu" in cap.out + cap.err

    def test_bench(self, trained, tmp_path):
        assert main(["bench", str(trained / "checkpoint"), "--warmup", "1", "--iters", "1",
                     "--out", str(tmp_path / "b.json")]) == 0
        result = json.loads((tmp_path / "b.json").read_text())
        assert result["std_ms"] == 0.0 and result["measured"] == 1
