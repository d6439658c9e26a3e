import hashlib
import subprocess
import sys

import pytest
from PIL import Image

from conftest import MNIST_DIR, tiny_config
from vqspike.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def parse_report(text):
    pairs = [line.split("=", 1) for line in text.strip().splitlines()]
    assert all(len(p) == 2 and p[0] for p in pairs), text
    return dict(pairs)


@pytest.fixture
def trained(tmp_path, capsys, mnist_paths):
    cfg, path = tiny_config(tmp_path)
    assert run(capsys, "train-vqsvae", "--config", path)[0] == 0
    assert run(capsys, "train-sdid", "--config", path, "--vqsvae", cfg.vqsvae_ckpt)[0] == 0
    return cfg, path


def test_zero_epochs_writes_initial_checkpoint(tmp_path, capsys, mnist_paths):
    cfg, path = tiny_config(tmp_path, epochs=0)
    code, out, _ = run(capsys, "train-vqsvae", "--config", path)
    assert code == 0
    assert parse_report(out) == {"checkpoint": cfg.vqsvae_ckpt}
    log = (tmp_path / "run" / "vqsvae_metrics.csv").read_text().splitlines()
    assert log == ["epoch,total,recon,vq,asg,commit,mse,ssim_loss,perplexity,k_mix,seconds"]


def test_pipeline_commands(trained, tmp_path, capsys):
    cfg, path = trained
    out_dir = tmp_path / "out"

    code, out, _ = run(capsys, "reconstruct", "--config", path, "--out", out_dir)
    assert code == 0
    assert set(parse_report(out)) == {"mse", "ssim_loss", "perplexity"}
    assert (out_dir / "reconstruct_input.png").exists() and (out_dir / "reconstruct_output.png").exists()

    code, out, _ = run(capsys, "sample", "--config", path, "--n", 16, "--out", out_dir)
    assert code == 0
    with Image.open(out_dir / "samples.png") as im:
        assert im.size == (4 * 28, 4 * 28)

    code, out, _ = run(capsys, "eval", "--config", path, "--n", 8)
    assert code == 0
    report = parse_report(out)
    for key in ("train_mse", "train_ssim_loss", "train_perplexity", "test_mse", "sample_perplexity"):
        float(report[key])
    # the line format round-trips
    assert parse_report("\n".join(f"{k}={v}" for k, v in report.items())) == report


def test_sdid_log_has_epoch_zero(trained, tmp_path):
    rows = (tmp_path / "run" / "sdid_metrics.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,masked_ce,heldout_loss,seconds"
    assert rows[1].startswith("0,,,") and len(rows) == 3


def test_missing_checkpoint_names_path(tmp_path, capsys, mnist_paths):
    cfg, path = tiny_config(tmp_path)
    code, out, err = run(capsys, "reconstruct", "--config", path)
    assert code != 0 and out == ""
    assert len(err.strip().splitlines()) == 1
    assert cfg.vqsvae_ckpt in err
    code, _, err = run(capsys, "train-sdid", "--config", path, "--vqsvae", tmp_path / "nope.ckpt")
    assert code != 0 and "nope.ckpt" in err


def test_invalid_config_is_one_line_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("steps = 0\n")
    code, _, err = run(capsys, "train-vqsvae", "--config", bad)
    assert code != 0
    assert err.startswith("error: ") and len(err.strip().splitlines()) == 1
    code, _, err = run(capsys, "eval", "--config", tmp_path / "absent.cfg")
    assert code != 0 and "absent.cfg" in err


def test_stage_mismatch_names_codebook_size(trained, tmp_path, capsys):
    cfg, _ = trained
    _, other = tiny_config(tmp_path / "k16", codebook_size=16)
    code, _, err = run(capsys, "train-sdid", "--config", other, "--vqsvae", cfg.vqsvae_ckpt)
    assert code != 0 and "K=" in err


def test_training_is_bitwise_reproducible(tmp_path, capsys, mnist_paths):
    cfg, path = tiny_config(tmp_path)
    digests = []
    for _ in range(2):
        assert run(capsys, "train-vqsvae", "--config", path)[0] == 0
        digests.append(hashlib.sha256(open(cfg.vqsvae_ckpt, "rb").read()).hexdigest())
    assert digests[0] == digests[1]


def test_commands_leave_dataset_untouched(trained, capsys):
    before = {p.name: p.read_bytes() for p in MNIST_DIR.iterdir()}
    _, path = trained
    run(capsys, "eval", "--config", path, "--n", 4)
    assert {p.name: p.read_bytes() for p in MNIST_DIR.iterdir()} == before


def test_module_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "vqspike.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("train-vqsvae", "train-sdid", "reconstruct", "sample", "eval"):
        assert command in proc.stdout
