"""End-to-end CLI tests driving main() in process."""

import json

import numpy as np
import pytest

from asanet import config as C
from asanet import gradcheck as G
from asanet.cli import ABLATE_PRESETS, main


@pytest.fixture(scope="module")
def smoke_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "ds"
    assert main(["gen", "--preset", "smoke", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def smoke_checkpoint(smoke_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("train") / "run"
    code = main(["train", "--preset", "smoke", "--data", str(smoke_data),
                 "--out", str(out), "--epochs", "10"])
    assert code == 0
    return out / "checkpoint"


class TestGen:
    def test_default_dataset(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path / "d"),
                     "--identities", "4", "--tracklets", "4"]) == 0
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert len(manifest["identities"]) == 4
        assert manifest["cameras"] == 2  # default camera count

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            main(["gen", "--out", str(tmp_path / name), "--identities", "4",
                  "--tracklets", "4", "--seed", "13"])
        assert (tmp_path / "a" / "manifest.json").read_bytes() == \
            (tmp_path / "b" / "manifest.json").read_bytes()
        assert (tmp_path / "a" / "frames.bin").read_bytes() == \
            (tmp_path / "b" / "frames.bin").read_bytes()

    def test_invalid_config_fails(self, tmp_path, capsys):
        code = main(["gen", "--out", str(tmp_path / "d"),
                     "--identities", "2", "--tracklets", "1"])
        assert code == 1
        assert "ConfigError" in capsys.readouterr().err


class TestTrain:
    def test_smoke_preset(self, smoke_data, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--preset", "smoke", "--data", str(smoke_data),
                     "--out", str(out), "--epochs", "5"]) == 0
        assert (out / "checkpoint" / "weights.bin").exists()
        assert (out / "config.json").exists()
        rows = (out / "losses.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 5  # header + one step per epoch

    def test_no_pmi_ablation(self, smoke_data, tmp_path):
        out = tmp_path / "nopmi"
        assert main(["train", "--preset", "smoke", "--data", str(smoke_data),
                     "--out", str(out), "--epochs", "3",
                     "--ablation", "no-pmi"]) == 0
        rows = (out / "losses.csv").read_text().strip().splitlines()[1:]
        assert all(float(r.split(",")[6]) == 0.0 for r in rows)

    def test_fusion_flag(self, smoke_data, tmp_path):
        out = tmp_path / "fa"
        assert main(["train", "--preset", "smoke", "--data", str(smoke_data),
                     "--out", str(out), "--epochs", "2", "--fusion", "a"]) == 0
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["model"]["fusion"] == "a"


class TestEval:
    def test_both_setups(self, smoke_data, smoke_checkpoint, tmp_path):
        for setup in ("usual", "mixing"):
            out = tmp_path / setup
            assert main(["eval", "--checkpoint", str(smoke_checkpoint),
                         "--data", str(smoke_data), "--out", str(out),
                         "--setup", setup]) == 0
            metrics = json.loads((out / "metrics.json").read_text())
            assert 0.0 <= metrics["mAP"] <= 1.0
            assert (out / "cmc.csv").exists()
            assert (out / "ranked_lists.csv").exists()
            assert (out / "cmc.svg").exists()

    def test_missing_checkpoint(self, smoke_data, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(tmp_path / "nope"),
                     "--data", str(smoke_data), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "FormatError" in capsys.readouterr().err

    def test_mask_and_feature_export(self, smoke_data, smoke_checkpoint, tmp_path):
        out = tmp_path / "exports"
        assert main(["eval", "--checkpoint", str(smoke_checkpoint),
                     "--data", str(smoke_data), "--out", str(out),
                     "--export-masks", "1", "--export-features"]) == 0
        masks = list((out / "masks").rglob("*.pgm"))
        assert masks and all(m.read_bytes().startswith(b"P5\n") for m in masks)
        assert (out / "features_query" / "features.bin").exists()
        assert (out / "features_gallery" / "features.json").exists()

    def test_cross_dataset_geometry_mismatch(self, smoke_data, smoke_checkpoint,
                                             tmp_path, capsys):
        other = tmp_path / "other"
        main(["gen", "--out", str(other), "--identities", "4", "--tracklets", "4"])
        code = main(["eval", "--checkpoint", str(smoke_checkpoint),
                     "--data", str(smoke_data), "--cross-dataset", str(other),
                     "--out", str(tmp_path / "o")])
        assert code == 1
        assert "ConfigError" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_losses_scope_passes(self, capsys):
        assert main(["gradcheck", "--scope", "losses"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_wrong_backward_fails(self, monkeypatch, capsys):
        monkeypatch.setitem(G.SUITES, "losses", lambda: [("broken", 0.5)])
        assert main(["gradcheck", "--scope", "losses"]) == 1
        assert "FAIL" in capsys.readouterr().out


class TestAblate:
    def test_preset_grids(self):
        assert len(ABLATE_PRESETS["branches"]) == 7
        assert len(ABLATE_PRESETS["asre-pmi"]) == 8
        assert len(ABLATE_PRESETS["bce"]) == 2
        keys = [c["key"] for c in ABLATE_PRESETS["asre-pmi"]]
        assert "fusion-a+asre+pmi" in keys and "fusion-b" in keys

    def test_bce_grid_runs(self, smoke_data, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(C.smoke_config()))
        out = tmp_path / "ablate"
        assert main(["ablate", "--preset", "bce", "--data", str(smoke_data),
                     "--out", str(out), "--config", str(cfg_path),
                     "--epochs", "2", "--seeds", "5", "6"]) == 0
        rows = (out / "ablation_bce.csv").read_text().strip().splitlines()
        assert rows[0] == "config,seed,mAP,rank1,rank5,rank20"
        assert len(rows) == 1 + 2 * 2  # 2 configs x 2 seeds
        # deterministic merge order: sorted by config then seed
        keys = [tuple(r.split(",")[:2]) for r in rows[1:]]
        assert keys == sorted(keys)
