import csv

import numpy as np
import pytest

from msdci.cli import main
from msdci.io import load_image, save_image
from msdci.reconstruction import load_checkpoint
from msdci.sampling import sample
from msdci.tensor_core import load_tensor
from msdci.training import read_history

TINY = """
[scheme]
scheme = {scheme}
block_size = 8
subrate = 0.25
width = 4

[train]
epochs_per_lr = 1
lr_schedule = 0.001 0.0005
batch_size = 4

[data]
patch_size = 16
train_count = 8
heldout_count = 4
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.ini"
    cfg.write_text(TINY.format(scheme="wavelet"))
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    return out


def _error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return err[0]


def test_train_outputs(trained):
    for k in (1, 2, 3):
        assert (trained / f"phase{k}" / "manifest.txt").exists()
        assert (trained / f"history_phase{k}.csv").exists()
    assert "seed = 3" in (trained / "config.ini").read_text()


def test_eval_reproduces_history(trained, tmp_path):
    assert main(["eval", "--checkpoint", str(trained / "phase3"),
                 "--out", str(tmp_path / "e.csv")]) == 0
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["image", "psnr", "ssim"] and len(rows) == 6
    final = read_history(trained / "history_phase3.csv")[-1]
    assert float(rows[-1][1]) == final["heldout_psnr"]
    assert float(rows[-1][2]) == final["heldout_ssim"]


def test_sample_reconstruct_roundtrip(trained, tmp_path, rng):
    img = tmp_path / "x.pgm"
    save_image(rng.random((1, 1, 32, 24)), img)
    y = tmp_path / "y.msdt"
    assert main(["sample", "--checkpoint", str(trained / "phase3"), "--image", str(img),
                 "--out", str(y)]) == 0
    state, _ = load_checkpoint(trained / "phase3")
    expected = sample(load_image(img), state.decomposition, state.scheme)
    np.testing.assert_array_equal(load_tensor(y), expected)
    out = tmp_path / "r.png"
    assert main(["reconstruct", "--checkpoint", str(trained / "phase3"),
                 "--measurements", str(y), "--out", str(out)]) == 0
    assert load_image(out).shape == (1, 1, 32, 24)


def test_extract_matrix_matches_sample(trained, tmp_path, rng):
    prefix = tmp_path / "phi"
    assert main(["extract-matrix", "--checkpoint", str(trained / "phase1"), "--extent", "16",
                 "--out", str(prefix)]) == 0
    phi = np.loadtxt(prefix.with_suffix(".csv"), delimiter=",")
    np.testing.assert_array_equal(phi, load_tensor(prefix.with_suffix(".msdt")))
    state, _ = load_checkpoint(trained / "phase1")
    x = rng.random((1, 1, 16, 16))
    y = sample(x, state.decomposition, state.scheme)
    assert np.max(np.abs(phi @ x.ravel() - y.ravel())) <= 1e-8 * np.max(np.abs(y))


def test_analyze_and_decompose(trained, tmp_path, rng):
    out = tmp_path / "an"
    assert main(["analyze", "--checkpoint", str(trained / "phase1"), "--out", str(out)]) == 0
    for name in ("variance_profile.csv", "band_variance_profile.csv", "kernels.png",
                 "measurements.png"):
        assert (out / name).exists()
    img = tmp_path / "x.pgm"
    save_image(rng.random((1, 1, 16, 16)), img)
    dec = tmp_path / "dec"
    assert main(["decompose", "--checkpoint", str(trained / "phase1"), "--image", str(img),
                 "--out", str(dec)]) == 0
    for band in ("LL", "LH", "HL", "HH"):
        assert load_tensor(dec / f"{band}.msdt").shape == (8, 8)
        assert (dec / f"{band}.png").exists()


def test_phase_two_needs_checkpoint(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY.format(scheme="single"))
    code = main(["train", "--config", str(cfg), "--phase", "2", "--out", str(tmp_path / "o")])
    assert code == 2
    assert _error_line(capsys).startswith("msdci: error: ConfigError: phase 2 needs")


def test_scheme_mismatch(trained, tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY.format(scheme="single"))
    code = main(["train", "--config", str(cfg), "--phase", "2", "--out", str(trained)])
    assert code == 2 and "does not match" in _error_line(capsys)


def test_unknown_flag(capsys):
    assert main(["train", "--bogus"]) == 2
    assert _error_line(capsys).startswith("msdci: error: CLIError:")


def test_bad_scheme(capsys):
    assert main(["extract-matrix", "--scheme", "hexagonal", "--out", "x"]) == 2
    assert "CLIError" in _error_line(capsys)


def test_missing_image(trained, tmp_path, capsys):
    code = main(["sample", "--checkpoint", str(trained / "phase1"),
                 "--image", str(tmp_path / "none.pgm"), "--out", str(tmp_path / "y.msdt")])
    assert code == 2 and "FileNotFoundError" in _error_line(capsys)
