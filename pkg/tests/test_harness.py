from pathlib import Path

import numpy as np
import pytest

from cloudgap import chipstore, harness, metrics
from cloudgap.errors import ConfigError, DataError
from cloudgap.harness import ExperimentConfig, SummaryRow

from conftest import masked_chip_from

DATA = Path(__file__).parent / "data"
TINY_VIT = dict(embed_dim=16, encoder_depth=1, encoder_heads=2, decoder_dim=16, decoder_depth=1,
                decoder_heads=2, batch_size=4)
TINY_CGAN = dict(gen_channels=8, disc_channels=8, batch_size=4)


@pytest.fixture(scope="module")
def dataset():
    chips = chipstore.generate_synthetic_chips(16, 32, 32, seed=21)
    masks = chipstore.generate_synthetic_masks(30, 32, 32, seed=22)
    return harness.Dataset(chips[:12], chips[12:], masks[:20], masks[20:])


def _config(tmp_path, name="out", **kw):
    base = dict(epochs=2, runs=2, out_dir=str(tmp_path / name), **TINY_VIT)
    base.update(kw)
    return ExperimentConfig(**base)


# --- config ----------------------------------------------------------------------


def test_config_text_round_trip():
    cfg = ExperimentConfig(mode="E2", model="cgan", seeds=[3, 9], alpha=2.5, eval_train=False)
    assert harness.load_config(None, **harness.parse_config_text(harness.dump_config(cfg))) == cfg


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# desk profile\nmode = E2\nepochs = 5  # short\nlr = 1e-3\npretrain = yes\n")
    cfg = harness.load_config(p, epochs="7", runs=None)
    assert (cfg.mode, cfg.epochs, cfg.lr, cfg.pretrain, cfg.runs) == ("E2", 7, 1e-3, True, 2)
    assert cfg.tag == "vit-pretrain"


@pytest.mark.parametrize("text, match", [
    ("colour = red", "unknown key"),
    ("epochs = many", "epochs"),
    ("just a line", "key = value"),
    ("mode = E3", "mode"),
    ("model = cgan\npretrain = true", "pretrain"),
    ("runs = 3\nseeds = 1 2", "seeds"),
])
def test_config_errors(tmp_path, text, match):
    p = tmp_path / "c.txt"
    p.write_text(text)
    with pytest.raises(ConfigError, match=match):
        harness.load_config(p)


def test_run_seeds():
    assert ExperimentConfig(seed=10, runs=3).run_seeds() == [10, 11, 12]
    assert ExperimentConfig(seeds=[5, 1, 8], runs=2).run_seeds() == [5, 1]


# --- data protocol ---------------------------------------------------------------


def _stub(n):
    return [chipstore.Chip(f"c{i:04d}", np.zeros((3, 1, 1, 1), np.float32), np.arange(3)) for i in range(n)]


def test_nested_subsets():
    chips = _stub(500)
    sizes = [25, 50, 100, 200, 400]
    ids = [{c.id for c in harness.nested_subset(chips, s)} for s in sizes]
    assert [len(s) for s in ids] == sizes
    assert all(a < b for a, b in zip(ids, ids[1:]))
    # Input order does not matter.
    assert {c.id for c in harness.nested_subset(chips[::-1], 100)} == ids[2]
    assert harness.nested_subset(chips, 0) == chips
    with pytest.raises(ConfigError):
        harness.nested_subset(chips, 501)


def test_validation_pairing_is_fixed(dataset):
    a = harness.validation_pairing(dataset.val, dataset.val_masks, "E2")
    b = harness.validation_pairing(list(reversed(dataset.val)), dataset.val_masks, "E2")[::-1]
    for x, y in zip(a, b):
        assert x.assignment.per_scene == y.assignment.per_scene
    e1 = harness.validation_pairing(dataset.val, dataset.val_masks, "E1")
    assert all(m.assignment.masked_scenes == [1] for m in e1)


def test_evaluation_without_masked_pixels_rejected(dataset):
    chip = dataset.val[0]
    m = masked_chip_from(chip, np.zeros((3, 32, 32), np.uint8))
    with pytest.raises(DataError, match="no masked pixels"):
        harness.evaluate(lambda ms: np.stack([x.masked_data for x in ms]), [chip], [m],
                         model="x", mode="E1", epoch=0)


# --- best-epoch selection ---------------------------------------------------------


def _row(run, epoch, split, mae, ssim=0.9):
    return SummaryRow("vit", "E1", 64, run, 100 + run, epoch, split, mae, ssim, 16)


def test_select_best_across_runs_and_epochs():
    rows = [_row(0, 0, "val", 0.001), _row(0, 1, "val", 0.05), _row(0, 2, "val", 0.03),
            _row(1, 1, "val", 0.03), _row(1, 2, "val", 0.04),
            _row(0, 2, "train", 0.02, 0.95)]
    best = harness.select_best(rows)
    # Epoch 0 is the untrained model and is never selected over a trained epoch; ties go to run 0.
    assert (best.run, best.epoch, best.val_mae, best.train_mae, best.train_ssim) == (0, 2, 0.03, 0.02, 0.95)
    assert harness.select_best([_row(0, 0, "val", 0.2)]).epoch == 0
    assert harness.select_best([]) is None


def test_select_best_five_runs_is_min_over_all_entries():
    rng = np.random.default_rng(0)
    rows = [_row(r, e, "val", float(rng.uniform())) for r in range(5) for e in range(1, 11)]
    assert harness.select_best(rows).val_mae == min(r.mae_masked for r in rows)


# --- experiments ------------------------------------------------------------------


def test_single_run_single_epoch_row(tmp_path, dataset):
    res = harness.run_experiment(_config(tmp_path, runs=1, epochs=1), dataset)
    rows = harness.read_summary_csv(res.summary_csv)
    assert [(r.epoch, r.split) for r in rows] == [(0, "val"), (0, "train"), (1, "val"), (1, "train")]
    val1 = rows[2]
    assert (res.row.epoch, res.row.val_mae, res.row.val_ssim) == (1, val1.mae_masked, val1.ssim)
    per_chip = metrics.read_metrics_csv(tmp_path / "out" / "run0" / "val_metrics.csv")
    assert np.mean([r.mae_masked for r in per_chip if r.epoch == 1]) == pytest.approx(val1.mae_masked, abs=1e-15)


def test_outputs_and_reselection(tmp_path, dataset):
    res = harness.run_experiment(_config(tmp_path), dataset)
    out = tmp_path / "out"
    for run in range(2):
        for name in ("val_metrics.csv", "train_metrics.csv", "best.vitc", "band_corr_generated.csv",
                     "band_corr_truth.csv"):
            assert (out / f"run{run}" / name).exists()
    assert harness.load_config(out / "config.txt") == _config(tmp_path)
    assert harness.select_best(harness.read_summary_csv(res.summary_csv)) == res.row
    assert [r.seed for r in res.runs] == [0, 1]
    # The saved checkpoint is the best epoch of its run.
    r0 = res.runs[0]
    row, _ = harness.zero_shot_eval(r0.checkpoint, dataset.val, dataset.val_masks, "E1")
    assert row.val_mae == pytest.approx(r0.best_val_mae, abs=1e-12)


def test_experiment_is_byte_reproducible(tmp_path, dataset):
    for name in ("a", "b"):
        harness.run_experiment(_config(tmp_path, name, mode="E2"), dataset)
    for rel in ("summary.csv", "run0/val_metrics.csv", "run1/train_metrics.csv", "run1/best.vitc"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_cgan_experiment(tmp_path, dataset):
    res = harness.run_experiment(_config(tmp_path, model="cgan", runs=1, **TINY_CGAN), dataset)
    assert Path(res.runs[0].checkpoint).name == "best.cgnc"
    kind, _ = harness.load_imputer(res.runs[0].checkpoint)
    assert kind == "cgan"


def test_zero_shot_matches_epoch_zero_with_zero_lr(tmp_path, dataset):
    first = harness.run_experiment(_config(tmp_path, "pre", runs=1, epochs=1), dataset)
    ckpt = first.runs[0].checkpoint
    cfg = _config(tmp_path, "ft", runs=1, epochs=2, lr=0.0, init_checkpoint=ckpt)
    rows = harness.read_summary_csv(harness.run_experiment(cfg, dataset).summary_csv)
    row, records = harness.zero_shot_eval(ckpt, dataset.val, dataset.val_masks, "E1")
    val = [r for r in rows if r.split == "val"]
    assert all(r.mae_masked == row.val_mae and r.ssim == row.val_ssim for r in val)
    again, _ = harness.zero_shot_eval(ckpt, dataset.val, dataset.val_masks, "E1")
    assert (again.val_mae, again.val_ssim) == (row.val_mae, row.val_ssim)
    assert [r.chip_id for r in records] == sorted(c.id for c in dataset.val)


def test_missing_data_root(tmp_path):
    with pytest.raises(DataError):
        harness.run_experiment(_config(tmp_path, data_root=str(tmp_path / "nowhere")))


def test_unknown_checkpoint_magic(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(DataError, match="magic"):
        harness.load_imputer(p)


def test_baseline_eval(dataset):
    mae_c, ssim_c = harness.baseline_eval("copy_nearest_scene", dataset.val, dataset.val_masks, "E1")
    mae_m, _ = harness.baseline_eval("mean_of_unmasked_scenes", dataset.val, dataset.val_masks, "E1")
    assert 0 < mae_c < 0.2 and 0 < mae_m < 0.2 and 0 < ssim_c <= 1


# --- reports ----------------------------------------------------------------------


def test_report_golden(tmp_path):
    report = harness.make_report([DATA / "summary_fixture.csv"], tmp_path, plots=False)
    assert (tmp_path / "table.md").read_bytes() == (DATA / "golden_table.md").read_bytes()
    assert report.table_text == (DATA / "golden_table.md").read_text()
    assert len(report.rows) == 4


def test_report_single_row(tmp_path):
    rows = [_row(0, 3, "val", 0.0251, 0.9512)]
    harness.write_summary_csv(rows, tmp_path / "s.csv")
    report = harness.make_report([tmp_path / "s.csv"], tmp_path / "r", plots=False)
    assert len(report.rows) == 1
    body = report.table_text.splitlines()[3]
    assert body == "| 64 | - | 0.951 | - | 0.025 |"


def test_report_empty_csv(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    report = harness.make_report([p], tmp_path / "r", plots=False)
    assert report.empty and report.table_text == ""


def test_report_rejects_unknown_csv(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n")
    with pytest.raises(DataError):
        harness.make_report([p], tmp_path / "r")


def test_report_with_plots(tmp_path, dataset):
    res = harness.run_experiment(_config(tmp_path, runs=1, epochs=1), dataset)
    run_dir = tmp_path / "out" / "run0"
    csvs = [res.summary_csv, run_dir / "val_metrics.csv", run_dir / "band_corr_truth.csv"]
    report = harness.make_report(csvs, tmp_path / "rep")
    names = sorted(Path(f).name for f in report.files)
    assert names == ["bands_00_truth.png", "correlations.csv", "scatter_vit_E1.png", "table.csv", "table.md"]
    again = harness.make_report(csvs, tmp_path / "rep2")
    for a, b in zip(sorted(report.files), sorted(again.files)):
        assert Path(a).read_bytes() == Path(b).read_bytes()
