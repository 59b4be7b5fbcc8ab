import filecmp
import json
import subprocess
import sys

import pytest

from tryonlab.cli import main
from tryonlab.config import CONFIG_ENV_VAR


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    from conftest import tiny_config

    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    tiny_config().save(path)
    return path


@pytest.fixture(scope="module")
def cli_artifacts(tmp_path_factory, cfg_file):
    """One shared workspace: dataset plus briefly trained checkpoints."""
    from conftest import tiny_config
    from tryonlab.diffusion import train_autoencoder

    root = tmp_path_factory.mktemp("cli")
    c = ["--config", str(cfg_file)]
    assert main(["gen-data", *c, "--out", str(root / "data")]) == 0
    assert main(["train-warp", *c, "--data", str(root / "data"),
                 "--out", str(root / "warp"), "--steps", "2"]) == 0
    # a three-step autoencoder cannot pass the CLI's reconstruction gate, so
    # build it through the API and hand the checkpoint over explicitly
    train_autoencoder(root / "data", tiny_config(), root / "diff", steps=3,
                      log=lambda *a: None)
    assert main(["train-diffusion", *c, "--data", str(root / "data"),
                 "--out", str(root / "diff"), "--steps", "2",
                 "--ae", str(root / "diff" / "ae.ckpt")]) == 0
    return root


class TestGenData:
    def test_reproducible_across_runs(self, tmp_path, cfg_file):
        c = ["--config", str(cfg_file)]
        assert main(["gen-data", *c, "--out", str(tmp_path / "a")]) == 0
        assert main(["gen-data", *c, "--out", str(tmp_path / "b")]) == 0
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert not cmp.diff_files
        for split in ("train", "test"):
            sub = filecmp.dircmp(tmp_path / "a" / split, tmp_path / "b" / split)
            assert not sub.diff_files and not sub.left_only and not sub.right_only
        a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
        b = (tmp_path / "b" / "manifest.jsonl").read_bytes()
        assert a == b

    def test_seed_changes_content(self, tmp_path, cfg_file):
        c = ["--config", str(cfg_file)]
        assert main(["gen-data", *c, "--out", str(tmp_path / "a")]) == 0
        assert main(["gen-data", *c, "--seed", "99", "--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
        b = (tmp_path / "b" / "manifest.jsonl").read_bytes()
        assert a != b

    def test_config_echo_written(self, tmp_path, cfg_file):
        assert main(["gen-data", "--config", str(cfg_file),
                     "--out", str(tmp_path / "d")]) == 0
        echo = json.loads((tmp_path / "d" / "config_echo.json").read_text())
        assert echo["resolution"] == [32, 32]

    def test_bad_config_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"groups": 0}')
        assert main(["gen-data", "--config", str(bad),
                     "--out", str(tmp_path / "d")]) == 2

    def test_io_error_exits_3(self, tmp_path, cfg_file):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        # a path whose parent is a regular file cannot be created
        assert main(["gen-data", "--config", str(cfg_file),
                     "--out", str(blocker / "nested")]) == 3

    def test_env_var_config(self, tmp_path, cfg_file, monkeypatch):
        monkeypatch.setenv(CONFIG_ENV_VAR, str(cfg_file))
        assert main(["gen-data", "--out", str(tmp_path / "d")]) == 0
        echo = json.loads((tmp_path / "d" / "config_echo.json").read_text())
        assert echo["resolution"] == [32, 32]


class TestTraining:
    def test_missing_dataset_exits_4(self, tmp_path, cfg_file):
        assert main(["train-warp", "--config", str(cfg_file),
                     "--data", str(tmp_path / "nowhere"),
                     "--out", str(tmp_path / "w"), "--steps", "1"]) == 4

    def test_warp_artifacts(self, cli_artifacts):
        warp = cli_artifacts / "warp"
        assert (warp / "warp.ckpt").exists()
        assert (warp / "config_echo.json").exists()
        assert (warp / "train_warp.jsonl").exists()

    def test_diffusion_artifacts(self, cli_artifacts):
        diff = cli_artifacts / "diff"
        assert (diff / "ae.ckpt").exists()
        assert (diff / "diffusion.ckpt").exists()
        meta = json.loads((diff / "config_echo.json").read_text())
        assert meta["use_ditp"] is True

    def test_weak_autoencoder_exits_1(self, cli_artifacts, cfg_file, tmp_path):
        # without a provided checkpoint the command trains its own autoencoder
        # and refuses to continue when reconstruction is below 28 dB
        assert main(["train-diffusion", "--config", str(cfg_file),
                     "--data", str(cli_artifacts / "data"),
                     "--out", str(tmp_path / "d"), "--steps", "1",
                     "--ae-steps", "3"]) == 1

    def test_grouping_override(self, cli_artifacts, cfg_file, tmp_path):
        assert main(["train-warp", "--config", str(cfg_file),
                     "--data", str(cli_artifacts / "data"),
                     "--out", str(tmp_path / "w"), "--steps", "1",
                     "--grouping", "vanilla"]) == 0
        echo = json.loads((tmp_path / "w" / "config_echo.json").read_text())
        assert echo["grouping"] == "vanilla"


class TestTryOn:
    def test_png_byte_deterministic(self, cli_artifacts, cfg_file, tmp_path):
        base = ["try-on", "--config", str(cfg_file),
                "--data", str(cli_artifacts / "data"), "--sample", "0",
                "--ae", str(cli_artifacts / "diff" / "ae.ckpt"),
                "--diffusion", str(cli_artifacts / "diff" / "diffusion.ckpt"),
                "--ddim-steps", "4", "--seed", "5"]
        assert main(base + ["--out", str(tmp_path / "a")]) == 0
        assert main(base + ["--out", str(tmp_path / "b")]) == 0
        pa = (tmp_path / "a" / "tryon_00000.png").read_bytes()
        pb = (tmp_path / "b" / "tryon_00000.png").read_bytes()
        assert pa == pb
        assert (tmp_path / "a" / "tryon_00000.npz").exists()

    def test_seed_changes_output(self, cli_artifacts, cfg_file, tmp_path):
        base = ["try-on", "--config", str(cfg_file),
                "--data", str(cli_artifacts / "data"), "--sample", "0",
                "--ae", str(cli_artifacts / "diff" / "ae.ckpt"),
                "--diffusion", str(cli_artifacts / "diff" / "diffusion.ckpt"),
                "--ddim-steps", "4"]
        assert main(base + ["--seed", "1", "--out", str(tmp_path / "a")]) == 0
        assert main(base + ["--seed", "2", "--out", str(tmp_path / "b")]) == 0
        pa = (tmp_path / "a" / "tryon_00000.png").read_bytes()
        pb = (tmp_path / "b" / "tryon_00000.png").read_bytes()
        assert pa != pb

    def test_missing_checkpoint_exits_4(self, cli_artifacts, cfg_file, tmp_path):
        assert main(["try-on", "--config", str(cfg_file),
                     "--data", str(cli_artifacts / "data"), "--sample", "0",
                     "--ae", str(tmp_path / "missing.ckpt"),
                     "--diffusion", str(cli_artifacts / "diff" / "diffusion.ckpt"),
                     "--out", str(tmp_path / "o")]) == 4

    def test_sample_file_argument(self, cli_artifacts, cfg_file, tmp_path):
        sample_path = sorted((cli_artifacts / "data" / "test").glob("*.npz"))[0]
        assert main(["try-on", "--config", str(cfg_file),
                     "--sample", str(sample_path),
                     "--ae", str(cli_artifacts / "diff" / "ae.ckpt"),
                     "--diffusion", str(cli_artifacts / "diff" / "diffusion.ckpt"),
                     "--ddim-steps", "4", "--out", str(tmp_path / "o")]) == 0
        outs = list((tmp_path / "o").glob("tryon_*.png"))
        assert len(outs) == 1

    def test_out_of_range_sample_exits_2(self, cli_artifacts, cfg_file, tmp_path):
        assert main(["try-on", "--config", str(cfg_file),
                     "--data", str(cli_artifacts / "data"), "--sample", "999",
                     "--ae", str(cli_artifacts / "diff" / "ae.ckpt"),
                     "--diffusion", str(cli_artifacts / "diff" / "diffusion.ckpt"),
                     "--out", str(tmp_path / "o")]) == 2


class TestEval:
    def test_warp_eval_writes_json(self, cli_artifacts, cfg_file, tmp_path):
        out = tmp_path / "metrics.json"
        assert main(["eval", "--config", str(cfg_file),
                     "--data", str(cli_artifacts / "data"), "--mode", "warp",
                     "--warp", str(cli_artifacts / "warp" / "warp.ckpt"),
                     "--n", "2", "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert payload["mode"] == "warp"
        assert payload["n_samples"] == 2
        assert set(payload) >= {"l1", "psnr_db", "ssim"}

    def test_tryon_eval_requires_checkpoints(self, cli_artifacts, cfg_file,
                                             tmp_path):
        assert main(["eval", "--config", str(cfg_file),
                     "--data", str(cli_artifacts / "data"), "--mode", "tryon",
                     "--ae", str(tmp_path / "nope.ckpt"),
                     "--diffusion", str(tmp_path / "nope2.ckpt")]) == 4


class TestVisualizeGroups:
    def test_exports_maps_and_assignment(self, cli_artifacts, cfg_file, tmp_path):
        out = tmp_path / "viz"
        assert main(["visualize-groups", "--config", str(cfg_file),
                     "--checkpoint", str(cli_artifacts / "warp" / "warp.ckpt"),
                     "--data", str(cli_artifacts / "data"), "--sample", "0",
                     "--out", str(out)]) == 0
        pngs = sorted(out.glob("group_*.png"))
        assert len(pngs) == 4  # tiny config trains four groups
        rows = (out / "channel_groups.csv").read_text().strip().splitlines()
        assert rows[0] == "channel,group"
        assert len(rows) - 1 == 8  # one row per decoded feature channel
        for line in rows[1:]:
            ch, grp = line.split(",")
            assert 0 <= int(grp) < 4

    def test_group_count_mismatch_exits_2(self, cli_artifacts, cfg_file, tmp_path):
        assert main(["visualize-groups", "--config", str(cfg_file),
                     "--checkpoint", str(cli_artifacts / "warp" / "warp.ckpt"),
                     "--data", str(cli_artifacts / "data"), "--sample", "0",
                     "--groups", "13", "--out", str(tmp_path / "v")]) == 2


class TestEntryPoint:
    def test_module_invocation(self):
        proc = subprocess.run([sys.executable, "-m", "tryonlab", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        for cmd in ("gen-data", "train-warp", "train-diffusion", "try-on",
                    "eval", "visualize-groups"):
            assert cmd in proc.stdout

    def test_console_script(self):
        proc = subprocess.run(["tryonlab", "--help"], capture_output=True,
                              text=True)
        assert proc.returncode == 0
