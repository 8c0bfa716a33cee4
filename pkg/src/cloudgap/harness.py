"""Experiment orchestration: nested training subsets, fixed validation pairing,
multi-run best-epoch selection, zero-shot evaluation and reports."""
from __future__ import annotations

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import cgan, chipstore, metrics, vit
from .chipstore import Chip, CloudMask
from .errors import ConfigError, DataError
from .masking import MODES, MaskedChip, pair_masks

log = logging.getLogger(__name__)

# Seeds that fix the evaluation pairings; never derived from run seeds.
VAL_PAIRING_SEED = 20220301
TRAIN_EVAL_SEED = 20220302
SUBSET_SEED = 20220303

SUMMARY_HEADER = ["model", "mode", "sample_size", "run", "seed", "epoch", "split", "mae_masked", "ssim", "n_chips"]
MODELS = ("vit", "cgan")


@dataclass
class ExperimentConfig:
    mode: str = "E1"
    model: str = "vit"
    sample_size: int = 0  # 0 = the full training split
    epochs: int = 30
    runs: int = 2
    seed: int = 0
    seeds: list[int] = field(default_factory=list)
    data_root: str = "data"
    out_dir: str = "runs"
    batch_size: int = 8
    eval_train: bool = True
    fill: float = 0.0
    # vit
    lr: float = 2e-4
    patch_size: int = 8
    embed_dim: int = 128
    encoder_depth: int = 4
    encoder_heads: int = 4
    decoder_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    init_checkpoint: str = ""
    pretrain: bool = False
    # cgan
    lr_d: float = 1e-4
    lr_g: float = 5e-4
    alpha: float = 5.0
    gen_channels: int = 32
    disc_channels: int = 32
    disc_downsamples: int = 2

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.runs < 1:
            raise ConfigError("runs must be at least 1")
        if self.epochs < 0 or self.sample_size < 0:
            raise ConfigError("epochs and sample_size must be non-negative")
        if self.seeds and len(self.seeds) < self.runs:
            raise ConfigError(f"{self.runs} runs need {self.runs} seeds, got {len(self.seeds)}")
        if self.pretrain and self.model != "vit":
            raise ConfigError("pretraining applies to the vit model only")

    def run_seeds(self) -> list[int]:
        return list(self.seeds[: self.runs]) if self.seeds else [self.seed + r for r in range(self.runs)]

    @property
    def tag(self) -> str:
        return f"{self.model}-pretrain" if self.pretrain else self.model


# ---------------------------------------------------------------------------
# flat key = value config files


def _coerce(f: dataclasses.Field, raw: str):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("list"):
            return [int(x) for x in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {f.name} ({kind})") from None
    return raw


def parse_config_text(text: str) -> dict:
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in fields:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(fields[key], value)
    return out


def load_config(path: str | os.PathLike | None = None, **overrides) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    for k, v in list(values.items()):
        if isinstance(v, str) and k in fields:
            values[k] = _coerce(fields[k], v)
    return ExperimentConfig(**values)


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if isinstance(v, list):
            v = " ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    train: list[Chip]
    val: list[Chip]
    train_masks: list[CloudMask]
    val_masks: list[CloudMask]


def load_dataset(root: str | os.PathLike) -> Dataset:
    split = chipstore.read_split(root)
    return Dataset(
        train=chipstore.load_chips(root, split.train_ids),
        val=chipstore.load_chips(root, split.val_ids),
        train_masks=chipstore.load_masks(root, split.train_mask_ids),
        val_masks=chipstore.load_masks(root, split.val_mask_ids),
    )


def nested_subset(chips: Sequence[Chip], sample_size: int) -> list[Chip]:
    """Prefix of a fixed permutation, so smaller subsets are contained in larger ones."""
    if sample_size == 0 or sample_size == len(chips):
        return list(chips)
    if sample_size > len(chips):
        raise ConfigError(f"sample_size {sample_size} exceeds the {len(chips)} training chips")
    ranked = sorted(chips, key=lambda c: c.id)
    order = np.random.default_rng(SUBSET_SEED).permutation(len(ranked))
    return [ranked[i] for i in order[:sample_size]]


def validation_pairing(chips: Sequence[Chip], masks: Sequence[CloudMask], mode: str,
                       fill: float = 0.0) -> list[MaskedChip]:
    return pair_masks(chips, masks, mode, VAL_PAIRING_SEED, fill)


# ---------------------------------------------------------------------------
# evaluation


Imputer = Callable[[Sequence[MaskedChip]], np.ndarray]


def evaluate(impute: Imputer, chips: Sequence[Chip], masked: Sequence[MaskedChip], *, model: str,
             mode: str, epoch: int) -> list[metrics.MetricsRecord]:
    generated = impute(masked)
    records = [
        metrics.evaluate_chip(g, c.data, m.pixel_mask, chip_id=c.id, model=model, mode=mode,
                              epoch=epoch, dates=c.dates)
        for g, c, m in zip(generated, chips, masked)
    ]
    return sorted(records, key=lambda r: r.chip_id)


def mean_metrics(records: Sequence[metrics.MetricsRecord]) -> tuple[float, float]:
    return (float(np.mean([r.mae_masked for r in records])), float(np.mean([r.ssim for r in records])))


def vit_imputer(model: vit.MaskedViT) -> Imputer:
    return lambda masked: vit.impute(model, masked)


def cgan_imputer(gen: cgan.Generator) -> Imputer:
    return lambda masked: cgan.impute(gen, masked)


def baseline_imputer(strategy: str, chips: Sequence[Chip]) -> Imputer:
    dates = {c.id: c.dates for c in chips}
    return lambda masked: np.stack([metrics.baseline_impute(m, strategy, dates[m.chip_id]) for m in masked])


# ---------------------------------------------------------------------------
# runs


@dataclass
class SummaryRow:
    model: str
    mode: str
    sample_size: int
    run: int
    seed: int
    epoch: int
    split: str
    mae_masked: float
    ssim: float
    n_chips: int


@dataclass
class RunSummary:
    run: int
    seed: int
    rows: list[SummaryRow]
    best_epoch: int
    best_val_mae: float
    checkpoint: str


@dataclass
class TableRow:
    model: str
    mode: str
    sample_size: int
    run: int
    epoch: int
    train_ssim: float
    val_ssim: float
    train_mae: float
    val_mae: float


@dataclass
class ExperimentResult:
    runs: list[RunSummary]
    row: TableRow
    summary_csv: str


def write_summary_csv(rows: Sequence[SummaryRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([r.model, r.mode, r.sample_size, r.run, r.seed, r.epoch, r.split,
                        repr(float(r.mae_masked)), repr(float(r.ssim)), r.n_chips])


def read_summary_csv(path: str | os.PathLike) -> list[SummaryRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SUMMARY_HEADER:
            raise DataError(f"{path}: not a summary CSV (header {reader.fieldnames})")
        return [
            SummaryRow(r["model"], r["mode"], int(r["sample_size"]), int(r["run"]), int(r["seed"]),
                       int(r["epoch"]), r["split"], float(r["mae_masked"]), float(r["ssim"]),
                       int(r["n_chips"]))
            for r in reader
        ]


def select_best(rows: Sequence[SummaryRow]) -> TableRow | None:
    """Best (run, epoch) by validation MAE across all runs; epoch 0 only counts when nothing else exists.

    Ties go to the earlier run, then the earlier epoch.
    """
    val = [r for r in rows if r.split == "val"]
    if not val:
        return None
    trained = [r for r in val if r.epoch > 0]
    pool = trained or val
    best = min(pool, key=lambda r: (r.mae_masked, r.run, r.epoch))
    train = next((r for r in rows if r.split == "train" and r.run == best.run and r.epoch == best.epoch
                  and r.model == best.model and r.sample_size == best.sample_size), None)
    nan = float("nan")
    return TableRow(best.model, best.mode, best.sample_size, best.run, best.epoch,
                    train.ssim if train else nan, best.ssim, train.mae_masked if train else nan,
                    best.mae_masked)


def _vit_config(config: ExperimentConfig, sample: Chip) -> vit.ViTConfig:
    t, b, h, w = sample.data.shape
    return vit.ViTConfig(
        patch_size=config.patch_size, embed_dim=config.embed_dim, encoder_depth=config.encoder_depth,
        encoder_heads=config.encoder_heads, decoder_dim=config.decoder_dim,
        decoder_depth=config.decoder_depth, decoder_heads=config.decoder_heads,
        scenes=t, bands=b, height=h, width=w,
    )


def _cgan_config(config: ExperimentConfig, sample: Chip) -> cgan.CGANConfig:
    t, b, h, w = sample.data.shape
    return cgan.CGANConfig(scenes=t, bands=b, height=h, width=w, gen_channels=config.gen_channels,
                           disc_channels=config.disc_channels, disc_downsamples=config.disc_downsamples)


def run_experiment(config: ExperimentConfig, dataset: Dataset | None = None) -> ExperimentResult:
    """Train ``config.runs`` replicas and evaluate every epoch on the fixed validation pairing.

    Writes, under ``out_dir``: ``summary.csv`` (per-epoch means for every run
    and split), per-run per-chip ``val_metrics.csv`` / ``train_metrics.csv``
    and the best checkpoint of each run.
    """
    torch.set_num_threads(1)
    if dataset is None:
        if not Path(config.data_root).exists():
            raise DataError(f"data root {config.data_root} does not exist")
        dataset = load_dataset(config.data_root)
    if not dataset.train or not dataset.val:
        raise DataError("training and validation splits must be non-empty")
    if not dataset.train_masks or not dataset.val_masks:
        raise DataError("mask pools must be non-empty")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(config))

    train = nested_subset(dataset.train, config.sample_size)
    sample_size = len(train)
    val_masked = validation_pairing(dataset.val, dataset.val_masks, config.mode, config.fill)
    train_masked = pair_masks(train, dataset.train_masks, config.mode, TRAIN_EVAL_SEED, config.fill)

    summaries: list[RunSummary] = []
    all_rows: list[SummaryRow] = []
    for run, seed in enumerate(config.run_seeds()):
        run_dir = out / f"run{run}"
        run_dir.mkdir(exist_ok=True)
        val_records: list[metrics.MetricsRecord] = []
        train_records: list[metrics.MetricsRecord] = []
        rows: list[SummaryRow] = []

        def record(impute: Imputer, epoch: int) -> float:
            v = evaluate(impute, dataset.val, val_masked, model=config.tag, mode=config.mode, epoch=epoch)
            val_records.extend(v)
            mae, s = mean_metrics(v)
            rows.append(SummaryRow(config.tag, config.mode, sample_size, run, seed, epoch, "val", mae, s, len(v)))
            if config.eval_train:
                t = evaluate(impute, train, train_masked, model=config.tag, mode=config.mode, epoch=epoch)
                train_records.extend(t)
                tm, ts = mean_metrics(t)
                rows.append(SummaryRow(config.tag, config.mode, sample_size, run, seed, epoch, "train",
                                       tm, ts, len(t)))
            log.info("%s run %d epoch %d val_mae %.5f val_ssim %.4f", config.tag, run, epoch, mae, s)
            return mae

        if config.model == "vit":
            if config.init_checkpoint:
                model, _ = vit.load_vit(config.init_checkpoint)
            else:
                model = vit.build_vit(_vit_config(config, dataset.train[0]), seed)
            record(vit_imputer(model), 0)
            tc = vit.TrainConfig(epochs=config.epochs, batch_size=config.batch_size, lr=config.lr,
                                 seed=seed, mode=config.mode, fill=config.fill)
            for _ in vit.train_vit(model, train, dataset.train_masks, tc,
                                   lambda m, e: record(vit_imputer(m), e), pretrain=config.pretrain):
                pass
            ckpt = run_dir / "best.vitc"
            if model.best_state is not None:
                model.load_state_dict(model.best_state)
            vit.save_vit(model, ckpt, {"epoch": model.best_epoch, "val_mae": _finite(model.best_val),
                                       "seed": seed, "mode": config.mode})
            best_impute = vit_imputer(model)
        else:
            gen, disc = cgan.build_cgan(_cgan_config(config, dataset.train[0]), seed)
            record(cgan_imputer(gen), 0)
            gc = cgan.GanTrainConfig(epochs=config.epochs, batch_size=config.batch_size, lr_d=config.lr_d,
                                     lr_g=config.lr_g, alpha=config.alpha, seed=seed, mode=config.mode,
                                     fill=config.fill)
            for _ in cgan.train_cgan(gen, disc, train, dataset.train_masks, gc,
                                     lambda g, e: record(cgan_imputer(g), e)):
                pass
            ckpt = run_dir / "best.cgnc"
            if gen.best_state is not None:
                gen.load_state_dict(gen.best_state)
                disc.load_state_dict(disc.best_state)
            cgan.save_cgan(gen, disc, ckpt, {"epoch": gen.best_epoch, "val_mae": _finite(gen.best_val),
                                             "seed": seed, "mode": config.mode})
            best_impute = cgan_imputer(gen)

        metrics.write_metrics_csv(val_records, run_dir / "val_metrics.csv")
        if config.eval_train:
            metrics.write_metrics_csv(train_records, run_dir / "train_metrics.csv")
        _write_band_matrices(best_impute, dataset.val, val_masked, run_dir)

        best = select_best(rows)
        summaries.append(RunSummary(run, seed, rows, best.epoch, best.val_mae, str(ckpt)))
        all_rows.extend(rows)

    summary_csv = out / "summary.csv"
    write_summary_csv(all_rows, summary_csv)
    row = select_best(all_rows)
    return ExperimentResult(summaries, row, str(summary_csv))


def _finite(x: float) -> float | None:
    return float(x) if np.isfinite(x) else None


def _write_band_matrices(impute: Imputer, chips: Sequence[Chip], masked: Sequence[MaskedChip],
                         run_dir: Path, limit: int = 64) -> None:
    chips, masked = list(chips)[:limit], list(masked)[:limit]
    generated = impute(masked)
    truth = np.stack([c.data for c in chips])
    pm = np.stack([m.pixel_mask for m in masked])
    comp = metrics.composite(generated, truth, pm)
    for population, values in (("generated", comp), ("truth", truth)):
        try:
            bm = metrics.band_correlation(values, pm, population)
        except DataError:
            continue
        metrics.write_band_matrix_csv(bm, run_dir / f"band_corr_{population}.csv")


def load_imputer(checkpoint: str | os.PathLike) -> tuple[str, Imputer]:
    with open(checkpoint, "rb") as fh:
        magic = fh.read(4)
    if magic == vit.CHECKPOINT_MAGIC:
        model, _ = vit.load_vit(checkpoint)
        return "vit", vit_imputer(model)
    if magic == cgan.CHECKPOINT_MAGIC:
        gen, _, _ = cgan.load_cgan(checkpoint)
        return "cgan", cgan_imputer(gen)
    raise DataError(f"{checkpoint}: unrecognised checkpoint magic {magic!r}")


def zero_shot_eval(checkpoint: str | os.PathLike, val_chips: Sequence[Chip], val_masks: Sequence[CloudMask],
                   mode: str, out_dir: str | os.PathLike | None = None, model_tag: str | None = None,
                   fill: float = 0.0) -> tuple[TableRow, list[metrics.MetricsRecord]]:
    """Evaluate a checkpoint as-is (no updates) with the same pairing and metrics as training runs."""
    torch.set_num_threads(1)
    kind, impute = load_imputer(checkpoint)
    tag = model_tag or kind
    masked = validation_pairing(val_chips, val_masks, mode, fill)
    records = evaluate(impute, val_chips, masked, model=tag, mode=mode, epoch=0)
    mae, s = mean_metrics(records)
    row = SummaryRow(tag, mode, 0, 0, 0, 0, "val", mae, s, len(records))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_metrics_csv(records, out / "val_metrics.csv")
        write_summary_csv([row], out / "summary.csv")
    return select_best([row]), records


def baseline_eval(strategy: str, val_chips: Sequence[Chip], val_masks: Sequence[CloudMask],
                  mode: str, fill: float = 0.0) -> tuple[float, float]:
    masked = validation_pairing(val_chips, val_masks, mode, fill)
    records = evaluate(baseline_imputer(strategy, val_chips), val_chips, masked, model=strategy,
                       mode=mode, epoch=0)
    return mean_metrics(records)


# ---------------------------------------------------------------------------
# reports


@dataclass
class Report:
    rows: list[TableRow]
    table_text: str
    files: list[str]

    @property
    def empty(self) -> bool:
        return not self.rows


def _fmt3(x: float) -> str:
    return "-" if not np.isfinite(x) else f"{x:.3f}"


def render_table(rows: Sequence[TableRow]) -> str:
    """Sample size x {SSIM, MAE} x {train, val} x model, as a pipe table."""
    models = sorted({r.model for r in rows})
    modes = sorted({r.mode for r in rows})
    lines = []
    for mode in modes:
        by_key = {(r.sample_size, r.model): r for r in rows if r.mode == mode}
        sizes = sorted({s for s, _ in by_key}, reverse=True)
        header = ["sample_size"]
        for metric in ("ssim", "mae"):
            for split in ("train", "val"):
                header += [f"{metric}_{split}_{m}" for m in models]
        lines.append(f"mode {mode}")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for size in sizes:
            cells = [str(size) if size else "0 (zero-shot)"]
            for metric in ("ssim", "mae"):
                for split in ("train", "val"):
                    for m in models:
                        r = by_key.get((size, m))
                        cells.append(_fmt3(getattr(r, f"{split}_{metric}")) if r else "-")
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def _classify_csv(path: Path) -> str:
    with open(path, newline="") as fh:
        first = next(csv.reader(fh), [])
    if first == SUMMARY_HEADER:
        return "summary"
    if first == metrics.CSV_HEADER:
        return "metrics"
    if first and first[0] in ("generated", "truth"):
        return "band"
    return "unknown"


def _read_band_csv(path: Path) -> tuple[str, list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return rows[0][0], labels, mat


def make_report(csv_paths: Sequence[str | os.PathLike], out_dir: str | os.PathLike, plots: bool = True) -> Report:
    """Table, correlation summaries and figures from experiment CSVs only."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary: list[SummaryRow] = []
    chip_records: list[metrics.MetricsRecord] = []
    bands: list[tuple[Path, str, list[str], np.ndarray]] = []
    for p in map(Path, csv_paths):
        if not p.exists():
            raise DataError(f"missing CSV {p}")
        kind = _classify_csv(p)
        if kind == "summary":
            summary.extend(read_summary_csv(p))
        elif kind == "metrics":
            chip_records.extend(metrics.read_metrics_csv(p))
        elif kind == "band":
            bands.append((p, *_read_band_csv(p)))
        elif p.stat().st_size:
            raise DataError(f"{p}: unrecognised CSV")

    groups: dict[tuple, list[SummaryRow]] = {}
    for r in summary:
        groups.setdefault((r.model, r.mode, r.sample_size), []).append(r)
    table_rows = [select_best(g) for _, g in sorted(groups.items())]
    table_rows = [r for r in table_rows if r is not None]
    text = render_table(table_rows)
    files = []
    table_path = out / "table.md"
    table_path.write_text(text)
    files.append(str(table_path))
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f.name for f in dataclasses.fields(TableRow)])
        for r in table_rows:
            w.writerow([getattr(r, f.name) if not isinstance(getattr(r, f.name), float)
                        else f"{getattr(r, f.name):.6f}" for f in dataclasses.fields(TableRow)])
    files.append(str(out / "table.csv"))

    if chip_records:
        by_model: dict[tuple[str, str], list[metrics.MetricsRecord]] = {}
        for r in chip_records:
            by_model.setdefault((r.model, r.mode), []).append(r)
        with open(out / "correlations.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for (model, mode), recs in sorted(by_model.items()):
                w.writerow([f"{model} {mode}"])
                w.writerows(metrics.correlation_report(recs).as_rows())
        files.append(str(out / "correlations.csv"))
        if plots:
            files.extend(_scatter_plots(by_model, out))
    if plots:
        files.extend(_band_heatmaps(bands, out))
    return Report(table_rows, text, files)


def _scatter_plots(by_model, out: Path) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []
    for (model, mode), recs in sorted(by_model.items()):
        last = max(r.epoch for r in recs)
        recs = [r for r in recs if r.epoch == last]
        fig, axes = plt.subplots(2, 2, figsize=(8, 7))
        for i, y in enumerate(("mae_masked", "ssim")):
            for j, (x, label) in enumerate((("coverage", "cloud cover"), ("max_gap", "max time gap (days)"))):
                ax = axes[i, j]
                ax.scatter([getattr(r, x) for r in recs], [getattr(r, y) for r in recs], s=8)
                ax.set_xlabel(label)
                ax.set_ylabel(y)
        fig.suptitle(f"{model} {mode}, epoch {last}")
        fig.tight_layout()
        path = out / f"scatter_{model}_{mode}.png"
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        files.append(str(path))
    return files


def _band_heatmaps(bands, out: Path) -> list[str]:
    if not bands:
        return []
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []
    for i, (src, population, labels, mat) in enumerate(bands):
        fig, ax = plt.subplots(figsize=(6, 5))
        im = ax.imshow(mat, vmin=-1, vmax=1, cmap="RdBu_r")
        ax.set_xticks(range(len(labels)), labels, rotation=90, fontsize=6)
        ax.set_yticks(range(len(labels)), labels, fontsize=6)
        fig.colorbar(im, ax=ax)
        ax.set_title(f"{src.parent.name} {population}")
        fig.tight_layout()
        path = out / f"bands_{i:02d}_{population}.png"
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        files.append(str(path))
    return files
