import subprocess
import sys

import pytest

from cloudgap import chipstore, cli

TINY = ["--embed-dim", "16", "--encoder-depth", "1", "--encoder-heads", "2", "--decoder-dim", "16",
        "--decoder-depth", "1", "--decoder-heads", "2", "--batch-size", "4"]


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--root", str(root), "--chips", "12", "--masks", "40", "--seed", "2"]) == 0
    assert cli.main(["split", "--root", str(root), "--train-fraction", "0.75", "--val-masks", "10"]) == 0
    return root


def test_gen_data_and_split(root, capsys):
    assert len(list((root / "chips").glob("*.chp"))) == 12
    assert len(list((root / "masks").glob("*.msk"))) == 40
    split = chipstore.read_split(root)
    assert (len(split.train_ids), len(split.val_ids), len(split.val_mask_ids)) == (9, 3, 10)


def test_train_eval_reconstruct_report(root, tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["train", "--data-root", str(root), "--out-dir", str(out), "--epochs", "1",
                     "--runs", "1", *TINY])
    assert code == 0
    assert "best run 0 epoch 1" in capsys.readouterr().out
    ckpt = out / "run0" / "best.vitc"

    assert cli.main(["zero-shot", "--checkpoint", str(ckpt), "--root", str(root), "--out", str(tmp_path / "zs")]) == 0
    assert "zero-shot: 3 chips" in capsys.readouterr().out
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--root", str(root), "--split", "train"]) == 0
    assert "eval: 9 chips" in capsys.readouterr().out

    split = chipstore.read_split(root)
    chip = root / "chips" / f"{split.val_ids[0]}.chp"
    mask = root / "masks" / f"{split.val_mask_ids[0]}.msk"
    dest = tmp_path / "filled.chp"
    assert cli.main(["reconstruct", "--checkpoint", str(ckpt), "--chip", str(chip), "--mask", str(mask),
                     "--out", str(dest)]) == 0
    filled, original = chipstore.read_chip(dest), chipstore.read_chip(chip)
    assert filled.data.shape == original.data.shape
    # Only the masked middle scene may change.
    assert (filled.data[0] == original.data[0]).all() and (filled.data[2] == original.data[2]).all()

    rep = tmp_path / "rep"
    assert cli.main(["report", str(out / "summary.csv"), str(tmp_path / "zs" / "summary.csv"),
                     "--out", str(rep), "--no-plots"]) == 0
    text = capsys.readouterr().out
    assert "| 9 |" in text and "0 (zero-shot)" in text


def test_config_file_flag(root, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(f"data_root = {root}\nout_dir = {tmp_path / 'o'}\nepochs = 0\nruns = 1\n"
                   "embed_dim = 16\nencoder_heads = 2\ndecoder_dim = 16\ndecoder_heads = 2\n")
    assert cli.main(["train", "--config", str(cfg)]) == 0
    assert (tmp_path / "o" / "summary.csv").exists()


@pytest.mark.parametrize("argv", [
    ["train", "--mode", "E7"],
    ["train", "--epochs", "ten"],
    ["train", "--model", "unet"],
    ["frobnicate"],
    [],
])
def test_config_errors_exit_2(argv, tmp_path):
    assert cli.main(argv) == 2


def test_data_errors_exit_3(tmp_path):
    assert cli.main(["train", "--data-root", str(tmp_path / "missing"), "--out-dir", str(tmp_path / "o")]) == 3
    bad = tmp_path / "bad.chp"
    bad.write_bytes(b"CHP1" + bytes(6))
    ckpt = tmp_path / "x.vitc"
    ckpt.write_bytes(b"VITC")
    mask = tmp_path / "m.msk"
    mask.write_bytes(b"MSK1")
    assert cli.main(["reconstruct", "--checkpoint", str(ckpt), "--chip", str(bad), "--mask", str(mask),
                     "--out", str(tmp_path / "o.chp")]) == 3


def test_empty_report_exit_3(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    assert cli.main(["report", str(empty), "--out", str(tmp_path / "r")]) == 3


def test_divergence_exit_4(root, tmp_path):
    code = cli.main(["train", "--data-root", str(root), "--out-dir", str(tmp_path / "o"), "--epochs", "1",
                     "--runs", "1", "--lr", "1e30", *TINY])
    assert code == 4


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cloudgap", "report", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 3
    proc = subprocess.run([sys.executable, "-m", "cloudgap", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "zero-shot" in proc.stdout
