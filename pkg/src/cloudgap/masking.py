"""E1/E2 mask assignment, mask application and pixel-to-patch lifting."""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .chipstore import Chip, CloudMask
from .errors import ConfigError, DataError

Mode = Literal["E1", "E2"]
MODES: tuple[str, ...] = ("E1", "E2")


@dataclass
class MaskAssignment:
    mode: str
    per_scene: list[str | None]
    pixel_mask: np.ndarray  # uint8 [T, H, W]

    @property
    def masked_scenes(self) -> list[int]:
        return [t for t, m in enumerate(self.per_scene) if m is not None]


@dataclass
class MaskedChip:
    chip_id: str
    masked_data: np.ndarray  # float32 [T, B, H, W]
    assignment: MaskAssignment

    @property
    def pixel_mask(self) -> np.ndarray:
        return self.assignment.pixel_mask


def stable_id_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def _mode_code(mode: str) -> int:
    if mode not in MODES:
        raise ConfigError(f"unknown masking mode {mode!r}, expected one of {MODES}")
    return MODES.index(mode) + 1


def assign_masks(chip: Chip, mask_pool: Sequence[CloudMask], mode: str, seed: int) -> MaskAssignment:
    """Pick masks for a chip.

    E1 masks only the middle scene. E2 draws a uniformly random non-empty
    subset of scenes and an independent mask for each. The draw depends only
    on (chip id, mode, seed).
    """
    code = _mode_code(mode)
    if not mask_pool:
        raise DataError("mask pool is empty")
    t_count, _, h, w = chip.data.shape
    for m in mask_pool:
        if m.mask.shape != (h, w):
            raise DataError(f"mask {m.id} has shape {m.mask.shape}, chip {chip.id} is {h}x{w}")

    rng = np.random.default_rng([seed, code, stable_id_hash(chip.id)])
    if mode == "E1":
        scenes = [t_count // 2]
    else:
        subset = int(rng.integers(1, 2**t_count))
        scenes = [t for t in range(t_count) if subset >> t & 1]

    per_scene: list[str | None] = [None] * t_count
    pixel_mask = np.zeros((t_count, h, w), dtype=np.uint8)
    for t in scenes:
        m = mask_pool[int(rng.integers(len(mask_pool)))]
        per_scene[t] = m.id
        pixel_mask[t] = m.mask
    return MaskAssignment(mode, per_scene, pixel_mask)


def apply_mask(chip: Chip, assignment: MaskAssignment, fill: float = 0.0) -> MaskedChip:
    pm = assignment.pixel_mask
    if pm.shape != (chip.data.shape[0],) + chip.data.shape[2:]:
        raise DataError(f"pixel mask {pm.shape} does not match chip {chip.data.shape}")
    data = chip.data.copy()
    cloudy = np.broadcast_to(pm[:, None].astype(bool), data.shape)
    data[cloudy] = fill
    return MaskedChip(chip.id, data, assignment)


def lift_to_patch_mask(pixel_mask: np.ndarray, patch_size: int) -> np.ndarray:
    """A patch is dropped when any pixel of its footprint is cloudy. Works on [..., H, W]."""
    pixel_mask = np.asarray(pixel_mask)
    *lead, h, w = pixel_mask.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise ConfigError(f"mask dimensions {h}x{w} are not divisible by patch size {p}")
    blocks = pixel_mask.reshape(*lead, h // p, p, w // p, p)
    return blocks.any(axis=(-3, -1)).astype(np.uint8)


def balance_mask_pool(masks: Sequence[CloudMask], bins: int = 10, per_bin: int = 160,
                      seed: int = 0) -> list[CloudMask]:
    """Draw exactly ``per_bin`` masks from every coverage bin ((k-1)/bins, k/bins].

    The selection keeps the input order of the pool.
    """
    if bins < 1 or per_bin < 1:
        raise ConfigError(f"bins and per_bin must be positive, got {bins}, {per_bin}")
    by_bin: list[list[int]] = [[] for _ in range(bins)]
    for i, m in enumerate(masks):
        by_bin[m.coverage_bin(bins)].append(i)
    for k, members in enumerate(by_bin):
        if len(members) < per_bin:
            raise DataError(
                f"coverage bin ({k}/{bins}, {k + 1}/{bins}] has {len(members)} masks, "
                f"needs {per_bin} (short by {per_bin - len(members)})"
            )
    rng = np.random.default_rng([seed, 11])
    keep: set[int] = set()
    for members in by_bin:
        keep.update(int(i) for i in rng.choice(members, size=per_bin, replace=False))
    return [m for i, m in enumerate(masks) if i in keep]


def pair_masks(chips: Sequence[Chip], mask_pool: Sequence[CloudMask], mode: str, seed: int,
               fill: float = 0.0) -> list[MaskedChip]:
    return [apply_mask(c, assign_masks(c, mask_pool, mode, seed), fill) for c in chips]
