import math
import re

import pytest

from evolute import cli

TINY = ["--sim", "episode_length=4", "--sim", "n_rays=8", "--sim", "grid_res=4",
        "--sim", "n_obstacles=3", "--sim", "n_enemies=1"]
TINY_SET = [f"--set={p.split('=')[0]}={p.split('=')[1]}" for p in
            ("episode_length=4", "n_rays=8", "grid_res=4", "n_obstacles=3", "n_enemies=1")]


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "demo.evtraj"
    code = run(["gen-data", "--episodes", "3", "--seed", "1", "--out", str(out)] + TINY)
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("train")
    code = run([
        "train", "--stream", "both", "--data", str(dataset), "--epochs", "2",
        "--seed", "3", "--out", str(out),
        "--set", "n_fake=16", "--set", "batch_size=64", "--set", "n_pin=11",
    ])
    assert code == 0
    return out


def test_gen_data_outputs_and_manifest(dataset):
    assert dataset.exists()
    manifest = dataset.with_suffix(".evtraj.manifest")
    assert manifest.exists()
    text = manifest.read_text()
    assert "command: gen-data" in text
    assert re.search(r"output: .*demo\.evtraj sha256=[0-9a-f]{64}", text)
    assert "config.episode_length: 4.0" in text


def test_gen_data_reruns_byte_identical(tmp_path, dataset):
    again = tmp_path / "again.evtraj"
    assert run(["gen-data", "--episodes", "3", "--seed", "1", "--out", str(again)] + TINY) == 0
    assert again.read_bytes() == dataset.read_bytes()


def test_gen_data_zero_episodes_is_usage_error(tmp_path):
    code = run(["gen-data", "--episodes", "0", "--seed", "1",
                "--out", str(tmp_path / "x.evtraj")] + TINY)
    assert code == 2


def test_gen_data_unknown_key_is_usage_error(tmp_path):
    code = run(["gen-data", "--episodes", "1", "--out", str(tmp_path / "x.evtraj"),
                "--sim", "warp_drive=9"])
    assert code == 2


def test_train_writes_checkpoints_losses_and_bundles(trained):
    assert (trained / "ff.ckpt").exists()
    assert (trained / "ebm.ckpt").exists()
    assert (trained / "ffbc.bundle").exists()
    assert (trained / "evolute.bundle").exists()
    ff_rows = (trained / "ff_loss.csv").read_text().splitlines()
    ebm_rows = (trained / "ebm_loss.csv").read_text().splitlines()
    assert len(ff_rows) == 1 + 2 and ff_rows[0] == "epoch,bce_loss,mse_loss"
    assert len(ebm_rows) == 1 + 2 and ebm_rows[0] == "epoch,infonce_loss"


def test_train_initial_ebm_loss_matches_anchor(trained):
    text = (trained / "manifest.txt").read_text()
    match = re.search(r"ebm_initial_loss: ([0-9.]+)", text)
    assert match
    assert abs(float(match.group(1)) - math.log(1 + 16)) < 0.3


def test_train_missing_data_is_data_error(tmp_path):
    code = run(["train", "--stream", "ff", "--data", str(tmp_path / "nope.evtraj"),
                "--epochs", "1", "--out", str(tmp_path / "out")])
    assert code == 3


def test_eval_outputs_and_determinism(tmp_path, trained, dataset):
    out1 = tmp_path / "eval1"
    code = run(["eval", "--bundle", str(trained / "evolute.bundle"), "--matches", "3",
                "--seed", "7", "--out", str(out1), "--ref-data", str(dataset),
                "--set", "kde_resolution=16"])
    assert code == 0
    stats = (out1 / "stats.csv").read_text().splitlines()
    assert len(stats) == 1 + 3 + 1
    report = (out1 / "report.txt").read_text()
    for key in ("matches:", "time_alive_median:", "kills_mean:", "pkr:",
                "kl:", "cc:", "sim:"):
        assert key in report
    assert (out1 / "density.csv").exists()
    assert (out1 / "density.pgm").exists()

    out2 = tmp_path / "eval2"
    assert run(["eval", "--bundle", str(trained / "evolute.bundle"), "--matches", "3",
                "--seed", "7", "--out", str(out2), "--ref-data", str(dataset),
                "--set", "kde_resolution=16"]) == 0
    assert (out1 / "report.txt").read_bytes() == (out2 / "report.txt").read_bytes()
    assert (out1 / "stats.csv").read_bytes() == (out2 / "stats.csv").read_bytes()
    assert (out1 / "density.csv").read_bytes() == (out2 / "density.csv").read_bytes()


def test_eval_parallel_jobs_match_serial(tmp_path, trained, dataset):
    serial = tmp_path / "serial"
    parallel = tmp_path / "parallel"
    base = ["eval", "--bundle", str(trained / "ffbc.bundle"), "--matches", "4",
            "--seed", "9", "--ref-data", str(dataset), "--set", "kde_resolution=16"]
    assert run(base + ["--out", str(serial)]) == 0
    assert run(base + ["--out", str(parallel), "--jobs", "2"]) == 0
    assert (serial / "report.txt").read_bytes() == (parallel / "report.txt").read_bytes()
    assert (serial / "stats.csv").read_bytes() == (parallel / "stats.csv").read_bytes()


def test_eval_without_ref_omits_exploration_metrics(tmp_path, trained):
    out = tmp_path / "noref"
    assert run(["eval", "--bundle", str(trained / "ffbc.bundle"), "--matches", "2",
                "--seed", "1", "--out", str(out)] + TINY_SET) == 0
    report = (out / "report.txt").read_text()
    assert "kl:" not in report
    assert "pkr:" in report


def test_config_file_and_flag_precedence(tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text("episode_length=4\nn_rays=8\ngrid_res=4\n"
                      "n_obstacles=2\nn_enemies=0\nseed=5\n")
    out = tmp_path / "cfg.evtraj"
    assert run(["gen-data", "--episodes", "1", "--out", str(out),
                "--config", str(config), "--sim", "n_obstacles=0"]) == 0
    from evolute import trajectories as tr
    loaded = tr.load(out)
    assert loaded[0].sim_config["n_obstacles"] == 0       # flag wins
    assert loaded[0].sim_config["episode_length"] == 4.0  # file value


def test_bad_config_file_line_reports_location(tmp_path):
    config = tmp_path / "bad.cfg"
    config.write_text("arena_size\n")
    code = run(["gen-data", "--episodes", "1", "--out", str(tmp_path / "x.evtraj"),
                "--config", str(config)])
    assert code == 2
