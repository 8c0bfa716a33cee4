"""Chip and cloud-mask data model, binary file formats, splits, synthetic data.

File formats (little-endian):

    chip  : b"CHP1" | u32 T, B, H, W | T x u32 dates | T*B*H*W float32 (t, b, row, col)
    mask  : b"MSK1" | u32 H, W | H*W u8 in {0, 1}

On-disk layout of a dataset root::

    <root>/chips/<chip_id>.chp
    <root>/masks/<mask_id>.msk
    <root>/splits/{train_chips,val_chips,train_masks,val_masks}.txt
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, FormatError

CHIP_MAGIC = b"CHP1"
MASK_MAGIC = b"MSK1"

DEFAULT_SCENES = 3
DEFAULT_BANDS = 6
DEFAULT_PATCH_SIZE = 8
MAX_GAP_DAYS = 200
# 2022-03-01, the start of the acquisition window of the original dataset.
FIRST_DATE = 19052


@dataclass
class Chip:
    id: str
    data: np.ndarray  # float32 [T, B, H, W]
    dates: np.ndarray  # int64 [T], days since epoch

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.dates)

    def validate(self) -> None:
        if self.data.ndim != 4:
            raise DataError(f"chip {self.id}: expected 4-d data, got shape {self.data.shape}")
        if self.dates.shape != (self.data.shape[0],):
            raise DataError(f"chip {self.id}: {len(self.dates)} dates for {self.data.shape[0]} scenes")
        if not np.all(np.isfinite(self.data)):
            raise DataError(f"chip {self.id}: non-finite reflectance")
        if self.data.min() < 0 or self.data.max() > 1:
            raise DataError(f"chip {self.id}: reflectance outside [0, 1]")
        gaps = self.gaps
        if np.any(gaps < 1) or np.any(gaps > MAX_GAP_DAYS):
            raise DataError(f"chip {self.id}: scene gaps {gaps.tolist()} outside [1, {MAX_GAP_DAYS}]")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Chip):
            return NotImplemented
        return (
            self.id == other.id
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.dates, other.dates)
        )


@dataclass
class CloudMask:
    id: str
    mask: np.ndarray  # uint8 [H, W], 1 = cloudy

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.mask.ndim != 2:
            raise DataError(f"mask {self.id}: expected 2-d array, got shape {self.mask.shape}")
        if np.any(self.mask > 1):
            raise DataError(f"mask {self.id}: values outside {{0, 1}}")
        if self.cloudy_count == 0:
            raise DataError(f"mask {self.id}: no cloudy pixels")

    @property
    def cloudy_count(self) -> int:
        return int(self.mask.sum(dtype=np.int64))

    @property
    def coverage(self) -> float:
        return self.cloudy_count / self.mask.size

    def coverage_bin(self, bins: int = 10) -> int:
        """Zero-based index k of the bin (k/bins, (k+1)/bins] holding the coverage.

        Integer arithmetic, so coverages that sit exactly on an edge land in the lower bin.
        """
        n = self.mask.size
        return (self.cloudy_count * bins + n - 1) // n - 1

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CloudMask):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.mask, other.mask)


@dataclass
class DatasetSplit:
    train_ids: list[str]
    val_ids: list[str]
    train_mask_ids: list[str]
    val_mask_ids: list[str]

    def __post_init__(self) -> None:
        if set(self.train_ids) & set(self.val_ids):
            raise DataError("train and validation chip ids overlap")
        if set(self.train_mask_ids) & set(self.val_mask_ids):
            raise DataError("train and validation mask ids overlap")


# ---------------------------------------------------------------------------
# synthetic generators


def _check_dims(height: int, width: int, patch_size: int) -> None:
    if height < 16 or width < 16:
        raise ConfigError(f"chip dimensions must be at least 16, got {height}x{width}")
    if height % patch_size or width % patch_size:
        raise ConfigError(
            f"chip dimensions {height}x{width} are not divisible by patch size {patch_size}"
        )


# Rough surface archetypes over (blue, green, red, NIR, SWIR1, SWIR2).
ARCHETYPES = np.array([
    [0.04, 0.07, 0.05, 0.35, 0.20, 0.10],  # vegetation
    [0.10, 0.13, 0.16, 0.25, 0.30, 0.25],  # bare soil
    [0.06, 0.05, 0.03, 0.02, 0.01, 0.01],  # water
    [0.12, 0.13, 0.14, 0.20, 0.22, 0.20],  # built-up
])


def _region_spectra(rng: np.random.Generator, n_regions: int, bands: int) -> np.ndarray:
    """Per-region spectra as random mixtures of the archetypes, scaled in brightness."""
    mix = rng.dirichlet(np.full(len(ARCHETYPES), 0.5), size=n_regions)
    brightness = rng.uniform(0.7, 1.3, size=(n_regions, 1))
    if bands == ARCHETYPES.shape[1]:
        base = ARCHETYPES
    else:
        x = np.linspace(0, 1, ARCHETYPES.shape[1])
        base = np.stack([np.interp(np.linspace(0, 1, bands), x, a) for a in ARCHETYPES])
    return mix @ base * brightness


def _land_cover(rng: np.random.Generator, height: int, width: int, bands: int) -> np.ndarray:
    """Piecewise-constant reflectance from a warped Voronoi partition."""
    n_regions = int(rng.integers(2, 7))
    seeds = rng.uniform(0, 1, size=(n_regions, 2)) * (height, width)
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    # Smooth warp turns straight Voronoi edges into blob outlines.
    warp_sigma = max(height, width) / 6
    warp = [
        ndimage.gaussian_filter(rng.normal(size=(height, width)), warp_sigma, mode="wrap")
        for _ in range(2)
    ]
    warp = [w / (np.abs(w).max() + 1e-12) * max(height, width) / 8 for w in warp]
    r = rows + warp[0]
    c = cols + warp[1]
    d2 = (r[None] - seeds[:, 0, None, None]) ** 2 + (c[None] - seeds[:, 1, None, None]) ** 2
    labels = np.argmin(d2, axis=0)
    spectra = _region_spectra(rng, n_regions, bands)
    return spectra[labels].transpose(2, 0, 1)  # [B, H, W]


def _scene_drift(rng: np.random.Generator, height: int, width: int, bands: int) -> np.ndarray:
    """Smooth multiplicative gain field for one scene: per-band level plus a planar tilt."""
    level = rng.uniform(-0.3, 0.3) + rng.uniform(-0.1, 0.1, size=(bands, 1, 1))
    tilt_r, tilt_c = rng.uniform(-0.1, 0.1, size=2)
    rows = np.linspace(-0.5, 0.5, height)[:, None]
    cols = np.linspace(-0.5, 0.5, width)[None, :]
    return 1.0 + level + tilt_r * rows + tilt_c * cols


def _one_chip(rng: np.random.Generator, chip_id: str, scenes: int, bands: int,
              height: int, width: int) -> Chip:
    base = _land_cover(rng, height, width, bands)
    data = np.empty((scenes, bands, height, width), dtype=np.float64)
    for t in range(scenes):
        noise = rng.uniform(-0.02, 0.02, size=(bands, height, width))
        data[t] = base * _scene_drift(rng, height, width, bands) + noise
    data = np.clip(data, 0.0, 1.0).astype(np.float32)
    gaps = rng.integers(1, MAX_GAP_DAYS + 1, size=scenes - 1)
    start = FIRST_DATE + int(rng.integers(0, 30))
    dates = np.concatenate([[start], start + np.cumsum(gaps)]).astype(np.int64)
    return Chip(chip_id, data, dates)


def generate_synthetic_chips(count: int, height: int, width: int, seed: int, *,
                             scenes: int = DEFAULT_SCENES, bands: int = DEFAULT_BANDS,
                             patch_size: int = DEFAULT_PATCH_SIZE) -> list[Chip]:
    """Generate ``count`` synthetic multi-temporal chips.

    Every scene of a chip shares the same land-cover partition; scenes differ
    by a smooth per-scene gain field and uniform noise of amplitude 0.02.
    The result is a pure function of the arguments.
    """
    if count < 1:
        raise ConfigError(f"count must be positive, got {count}")
    _check_dims(height, width, patch_size)
    chips = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        chips.append(_one_chip(rng, f"s{seed}-c{i:05d}", scenes, bands, height, width))
    return chips


def generate_synthetic_masks(count: int, height: int, width: int, seed: int) -> list[CloudMask]:
    """Cloud masks as the top-k pixels of smoothed noise, k drawn for a uniform coverage spread."""
    if count < 10:
        raise ConfigError(f"mask count must be at least 10, got {count}")
    if height < 1 or width < 1:
        raise ConfigError(f"invalid mask dimensions {height}x{width}")
    n = height * width
    masks = []
    for i in range(count):
        rng = np.random.default_rng([seed, 1_000_003, i])
        sigma = rng.uniform(1.5, max(height, width) / 5)
        field_ = ndimage.gaussian_filter(rng.normal(size=(height, width)), sigma, mode="wrap")
        # Stratify the target coverage over deciles so every bin gets filled.
        decile = i % 10
        coverage = (decile + rng.uniform(0.0, 1.0)) / 10
        k = int(np.clip(np.ceil(coverage * n), 1, n))
        order = np.argsort(-field_, axis=None, kind="stable")
        flat = np.zeros(n, dtype=np.uint8)
        flat[order[:k]] = 1
        masks.append(CloudMask(f"m{seed}-{i:05d}", flat.reshape(height, width)))
    return masks


# ---------------------------------------------------------------------------
# binary formats


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_chip(chip: Chip) -> bytes:
    t, b, h, w = chip.data.shape
    header = CHIP_MAGIC + struct.pack("<4I", t, b, h, w)
    dates = np.asarray(chip.dates, dtype="<u4").tobytes()
    values = np.ascontiguousarray(chip.data, dtype="<f4").tobytes()
    return header + dates + values


def decode_chip(buf: bytes, chip_id: str) -> Chip:
    if len(buf) < 4 or buf[:4] != CHIP_MAGIC:
        raise FormatError(f"bad chip magic {buf[:4]!r}", 0)
    if len(buf) < 20:
        raise FormatError("truncated chip header", len(buf))
    t, b, h, w = struct.unpack_from("<4I", buf, 4)
    dates_end = 20 + 4 * t
    end = dates_end + 4 * t * b * h * w
    if len(buf) < end:
        raise FormatError(f"truncated chip payload, expected {end} bytes", len(buf))
    if len(buf) > end:
        raise FormatError("trailing bytes after chip payload", end)
    dates = np.frombuffer(buf, dtype="<u4", count=t, offset=20).astype(np.int64)
    data = np.frombuffer(buf, dtype="<f4", count=t * b * h * w, offset=dates_end)
    return Chip(chip_id, data.astype(np.float32).reshape(t, b, h, w), dates)


def write_chip(chip: Chip, path: str | os.PathLike) -> None:
    _atomic_write(Path(path), encode_chip(chip))


def read_chip(path: str | os.PathLike) -> Chip:
    path = Path(path)
    return decode_chip(path.read_bytes(), path.stem)


def encode_mask(mask: CloudMask) -> bytes:
    h, w = mask.mask.shape
    return MASK_MAGIC + struct.pack("<2I", h, w) + np.ascontiguousarray(mask.mask, dtype=np.uint8).tobytes()


def decode_mask(buf: bytes, mask_id: str) -> CloudMask:
    if len(buf) < 4 or buf[:4] != MASK_MAGIC:
        raise FormatError(f"bad mask magic {buf[:4]!r}", 0)
    if len(buf) < 12:
        raise FormatError("truncated mask header", len(buf))
    h, w = struct.unpack_from("<2I", buf, 4)
    end = 12 + h * w
    if len(buf) < end:
        raise FormatError(f"truncated mask payload, expected {end} bytes", len(buf))
    if len(buf) > end:
        raise FormatError("trailing bytes after mask payload", end)
    values = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=12)
    bad = np.flatnonzero(values > 1)
    if bad.size:
        raise FormatError(f"mask value {values[bad[0]]} not in {{0, 1}}", 12 + int(bad[0]))
    if not values.any():
        raise FormatError("mask has no cloudy pixels", 12)
    return CloudMask(mask_id, values.reshape(h, w).copy())


def write_mask(mask: CloudMask, path: str | os.PathLike) -> None:
    _atomic_write(Path(path), encode_mask(mask))


def read_mask(path: str | os.PathLike) -> CloudMask:
    path = Path(path)
    return decode_mask(path.read_bytes(), path.stem)


# ---------------------------------------------------------------------------
# dataset directories


def save_chips(chips: Iterable[Chip], root: str | os.PathLike) -> None:
    for chip in chips:
        write_chip(chip, Path(root) / "chips" / f"{chip.id}.chp")


def save_masks(masks: Iterable[CloudMask], root: str | os.PathLike) -> None:
    for mask in masks:
        write_mask(mask, Path(root) / "masks" / f"{mask.id}.msk")


def _load_dir(root: str | os.PathLike, sub: str, suffix: str, reader, ids: Sequence[str] | None):
    directory = Path(root) / sub
    if not directory.is_dir():
        raise DataError(f"missing directory {directory}")
    if ids is None:
        return [reader(p) for p in sorted(directory.glob(f"*{suffix}"))]
    out = []
    for i in ids:
        p = directory / f"{i}{suffix}"
        if not p.exists():
            raise DataError(f"missing file {p}")
        out.append(reader(p))
    return out


def load_chips(root: str | os.PathLike, ids: Sequence[str] | None = None) -> list[Chip]:
    return _load_dir(root, "chips", ".chp", read_chip, ids)


def load_masks(root: str | os.PathLike, ids: Sequence[str] | None = None) -> list[CloudMask]:
    return _load_dir(root, "masks", ".msk", read_mask, ids)


_SPLIT_FILES = {
    "train_ids": "train_chips.txt",
    "val_ids": "val_chips.txt",
    "train_mask_ids": "train_masks.txt",
    "val_mask_ids": "val_masks.txt",
}


def write_split(split: DatasetSplit, root: str | os.PathLike) -> None:
    for attr, name in _SPLIT_FILES.items():
        ids = getattr(split, attr)
        _atomic_write(Path(root) / "splits" / name, "".join(f"{i}\n" for i in ids).encode())


def read_split(root: str | os.PathLike) -> DatasetSplit:
    kwargs = {}
    for attr, name in _SPLIT_FILES.items():
        p = Path(root) / "splits" / name
        if not p.exists():
            raise DataError(f"missing split manifest {p}")
        kwargs[attr] = [line.strip() for line in p.read_text().splitlines() if line.strip()]
    return DatasetSplit(**kwargs)


def split_dataset(chips: Sequence[Chip], masks: Sequence[CloudMask], train_fraction: float,
                  val_mask_count: int, seed: int, bins: int = 10) -> DatasetSplit:
    """Random chip partition plus a coverage-balanced validation mask pool."""
    from .masking import balance_mask_pool

    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if val_mask_count % bins:
        raise ConfigError(f"val_mask_count {val_mask_count} is not a multiple of {bins} bins")
    ids = [c.id for c in chips]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate chip ids")
    rng = np.random.default_rng([seed, 7])
    order = rng.permutation(len(ids))
    n_train = int(round(len(ids) * train_fraction))
    train_ids = [ids[i] for i in order[:n_train]]
    val_ids = [ids[i] for i in order[n_train:]]

    val_masks = balance_mask_pool(masks, bins=bins, per_bin=val_mask_count // bins, seed=seed)
    val_mask_ids = [m.id for m in val_masks]
    chosen = set(val_mask_ids)
    train_mask_ids = [m.id for m in masks if m.id not in chosen]
    return DatasetSplit(train_ids, val_ids, train_mask_ids, val_mask_ids)
