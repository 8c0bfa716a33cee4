"""Multi-temporal masked-autoencoder ViT imputer.

Each scene is cut into p x p patches (temporal tubelet size 1). Any patch
touching a cloudy pixel is dropped; the encoder sees only the remaining
patches, the decoder fills the dropped positions with a learned mask token
and predicts pixel values for every patch.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import read_checkpoint, write_checkpoint
from .chipstore import Chip, CloudMask
from .errors import ConfigError, DataError, DivergenceError, FullyMaskedError
from .masking import MaskedChip, assign_masks, apply_mask, lift_to_patch_mask

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VITC"


@dataclass
class ViTConfig:
    patch_size: int = 8
    embed_dim: int = 128
    encoder_depth: int = 4
    encoder_heads: int = 4
    decoder_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    mlp_ratio: float = 4.0
    scenes: int = 3
    bands: int = 6
    height: int = 32
    width: int = 32
    # Fixed reflectance standardization applied inside the model.
    value_mean: float = 0.15
    value_std: float = 0.07

    def __post_init__(self) -> None:
        for name in ("patch_size", "embed_dim", "encoder_heads", "decoder_dim", "decoder_heads",
                     "scenes", "bands", "height", "width"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.encoder_depth < 0 or self.decoder_depth < 0:
            raise ConfigError("depths must be non-negative")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(
                f"{self.height}x{self.width} is not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.encoder_heads or self.decoder_dim % self.decoder_heads:
            raise ConfigError("embedding dims must be divisible by their head counts")
        for dim in (self.embed_dim, self.decoder_dim):
            if dim < 16 or dim % 16:
                raise ConfigError(f"embedding dim {dim} must be a positive multiple of 16")

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.scenes, self.height // self.patch_size, self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        t, gh, gw = self.grid
        return t * gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.bands


# ---------------------------------------------------------------------------
# tokenization


@dataclass
class PatchSet:
    tokens: np.ndarray  # [n_visible, p*p*B]
    visible: np.ndarray  # flat patch indices
    masked: np.ndarray


def patchify_array(x, patch_size: int):
    """[..., T, B, H, W] -> [..., T*(H/p)*(W/p), B*p*p]; works for numpy arrays and tensors."""
    *lead, t, b, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"{h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = x.reshape(*lead, t, b, gh, p, gw, p)
    n = len(lead)
    perm = (*range(n), n, n + 2, n + 4, n + 1, n + 3, n + 5)
    x = x.transpose(*perm) if isinstance(x, np.ndarray) else x.permute(*perm)
    return x.reshape(*lead, t * gh * gw, b * p * p)


def unpatchify(patches, patch_size: int, scenes: int, bands: int, height: int, width: int):
    """Inverse of :func:`patchify_array`."""
    *lead, _, _ = patches.shape
    p = patch_size
    gh, gw = height // p, width // p
    x = patches.reshape(*lead, scenes, gh, gw, bands, p, p)
    n = len(lead)
    perm = (*range(n), n, n + 3, n + 1, n + 4, n + 2, n + 5)
    x = x.transpose(*perm) if isinstance(x, np.ndarray) else x.permute(*perm)
    return x.reshape(*lead, scenes, bands, height, width)


def patchify(masked_chip: MaskedChip, patch_size: int) -> PatchSet:
    patches = patchify_array(masked_chip.masked_data, patch_size)
    dropped = lift_to_patch_mask(masked_chip.pixel_mask, patch_size).reshape(-1).astype(bool)
    visible = np.flatnonzero(~dropped)
    return PatchSet(patches[visible], visible, np.flatnonzero(dropped))


# ---------------------------------------------------------------------------
# positional encodings


def sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2))
    out = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_3d(dim: int, grid: tuple[int, int, int]) -> np.ndarray:
    """Fixed encodings over (scene, row, col) in flat patch order; dim split 6/16, 6/16, 4/16."""
    t, gh, gw = grid
    d_space = dim // 16 * 6
    d_time = dim - 2 * d_space
    tt, rr, cc = np.meshgrid(np.arange(t), np.arange(gh), np.arange(gw), indexing="ij")
    return np.concatenate(
        [sincos_1d(d_time, tt.ravel()), sincos_1d(d_space, rr.ravel()), sincos_1d(d_space, cc.ravel())],
        axis=1,
    )


# ---------------------------------------------------------------------------
# model


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // self.heads)
        if key_valid is not None:
            scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, key_valid=None):
        x = x + self.attn(self.norm1(x), key_valid)
        return x + self.mlp(self.norm2(x))


class MaskedViT(nn.Module):
    def __init__(self, config: ViTConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = nn.Linear(c.patch_dim, c.embed_dim)
        self.register_buffer("pos_embed", torch.tensor(sincos_3d(c.embed_dim, c.grid), dtype=torch.float32),
                             persistent=False)
        self.blocks = nn.ModuleList(Block(c.embed_dim, c.encoder_heads, c.mlp_ratio) for _ in range(c.encoder_depth))
        self.norm = nn.LayerNorm(c.embed_dim)

        self.decoder_embed = nn.Linear(c.embed_dim, c.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, c.decoder_dim))
        self.register_buffer("decoder_pos_embed",
                             torch.tensor(sincos_3d(c.decoder_dim, c.grid), dtype=torch.float32),
                             persistent=False)
        self.decoder_blocks = nn.ModuleList(
            Block(c.decoder_dim, c.decoder_heads, c.mlp_ratio) for _ in range(c.decoder_depth)
        )
        self.decoder_norm = nn.LayerNorm(c.decoder_dim)
        self.decoder_pred = nn.Linear(c.decoder_dim, c.patch_dim)
        self._init_weights()

    def _init_weights(self) -> None:
        nn.init.normal_(self.mask_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, patches: torch.Tensor, dropped: torch.Tensor,
                token_order: torch.Tensor | None = None) -> torch.Tensor:
        """Predict every patch from the visible ones.

        patches: [N, L, P]; dropped: bool [N, L]. ``token_order`` optionally
        permutes the decoder sequence (positions stay attached to tokens).
        """
        n, length, _ = patches.shape
        visible = ~dropped
        counts = visible.sum(dim=1)
        if bool((counts == 0).any()):
            raise FullyMaskedError("fully-masked input: no visible patches to encode")
        keep = int(counts.max())
        # Stable sort puts visible patches first, in index order.
        ids = torch.argsort(dropped.to(torch.int8), dim=1, stable=True)[:, :keep]
        slot_valid = torch.arange(keep, device=patches.device)[None, :] < counts[:, None]

        c = self.config
        clean = (patches - c.value_mean) / c.value_std * visible[..., None].to(patches.dtype)
        x = torch.gather(clean, 1, ids[..., None].expand(-1, -1, clean.shape[-1]))
        x = self.patch_embed(x) + self.pos_embed[ids]
        for blk in self.blocks:
            x = blk(x, slot_valid)
        x = self.norm(x)

        y = self.decoder_embed(x) * slot_valid[..., None].to(x.dtype)
        d = y.shape[-1]
        scattered = torch.zeros(n, length, d, dtype=y.dtype, device=y.device)
        scattered = scattered.scatter_add(1, ids[..., None].expand(-1, -1, d), y)
        full = torch.where(visible[..., None], scattered, self.mask_token.to(y.dtype).expand(n, length, d))
        full = full + self.decoder_pos_embed

        if token_order is not None:
            full = full[:, token_order]
        for blk in self.decoder_blocks:
            full = blk(full)
        out = self.decoder_pred(self.decoder_norm(full)) * c.value_std + c.value_mean
        if token_order is not None:
            out = out[:, torch.argsort(token_order)]
        return out


def build_vit(config: ViTConfig, seed: int = 0) -> MaskedViT:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return MaskedViT(config)


# ---------------------------------------------------------------------------
# losses and inference


def _as_tensor(x, dtype=torch.float32) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def mse_masked_patches(reconstruction, truth, patch_mask, patch_size: int):
    """Mean squared error over the pixels of dropped patches only.

    Tensors in, tensor out (differentiable); numpy in, float out.
    """
    numpy_in = not isinstance(reconstruction, torch.Tensor)
    rec = _as_tensor(reconstruction, torch.float64 if numpy_in else None)
    tru = _as_tensor(truth, rec.dtype)
    pm = _as_tensor(patch_mask, rec.dtype)
    if rec.shape != tru.shape:
        raise DataError(f"shape mismatch {tuple(rec.shape)} vs {tuple(tru.shape)}")
    pix = pm.repeat_interleave(patch_size, dim=-2).repeat_interleave(patch_size, dim=-1)
    pix = pix.unsqueeze(-3)  # broadcast over bands
    weight = pix.expand_as(rec)
    total = weight.sum()
    if float(total) == 0:
        raise DataError("no masked patches: loss is undefined")
    loss = ((rec - tru) ** 2 * weight).sum() / total
    return float(loss) if numpy_in else loss


def _patch_loss(pred: torch.Tensor, target: torch.Tensor, dropped: torch.Tensor) -> torch.Tensor:
    """Same quantity as :func:`mse_masked_patches`, computed in patch space."""
    w = dropped.to(pred.dtype)
    per_patch = ((pred - target) ** 2).mean(dim=-1)
    return (per_patch * w).sum() / w.sum()


def _batch_tensors(model: MaskedViT, masked: Sequence[MaskedChip], dtype=torch.float32):
    c = model.config
    data = np.stack([m.masked_data for m in masked])
    dropped = np.stack([lift_to_patch_mask(m.pixel_mask, c.patch_size).reshape(-1) for m in masked])
    patches = patchify_array(torch.as_tensor(data, dtype=dtype), c.patch_size)
    return patches, torch.as_tensor(dropped.astype(bool))


def forward_reconstruct(model: MaskedViT, masked_chip: MaskedChip, patch_mask: np.ndarray | None = None,
                        token_order: torch.Tensor | None = None) -> np.ndarray:
    """Reconstruct one chip; returns [T, B, H, W] with every patch predicted."""
    c = model.config
    if patch_mask is None:
        patch_mask = lift_to_patch_mask(masked_chip.pixel_mask, c.patch_size)
    dtype = next(model.parameters()).dtype
    patches = patchify_array(torch.as_tensor(masked_chip.masked_data, dtype=dtype), c.patch_size)[None]
    dropped = torch.as_tensor(np.asarray(patch_mask).reshape(1, -1).astype(bool))
    with torch.no_grad():
        out = model(patches, dropped, token_order)
    return unpatchify(out[0], c.patch_size, c.scenes, c.bands, c.height, c.width).numpy()


def impute(model: MaskedViT, masked: Sequence[MaskedChip], batch_size: int = 32,
           fallback: float = 0.15) -> np.ndarray:
    """Batched reconstruction; chips with no visible patch get ``fallback`` everywhere."""
    c = model.config
    out = np.full((len(masked), c.scenes, c.bands, c.height, c.width), fallback, dtype=np.float32)
    model.eval()
    with torch.no_grad():
        for start in range(0, len(masked), batch_size):
            chunk = list(masked[start : start + batch_size])
            patches, dropped = _batch_tensors(model, chunk)
            ok = (~dropped).any(dim=1)
            if not bool(ok.any()):
                continue
            pred = model(patches[ok], dropped[ok])
            rec = unpatchify(pred, c.patch_size, c.scenes, c.bands, c.height, c.width).numpy()
            idx = start + np.flatnonzero(ok.numpy())
            out[idx] = rec
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    mode: str = "E1"
    weight_decay: float = 0.0
    fill: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError(f"invalid training config {self}")


@dataclass
class EpochResult:
    epoch: int
    train_loss: float
    val_mae: float | None = None
    val_records: list = field(default_factory=list)
    train_records: list = field(default_factory=list)


def epoch_assignments(chips: Sequence[Chip], masks: Sequence[CloudMask], mode: str, seed: int,
                      epoch: int, fill: float = 0.0) -> list[MaskedChip]:
    """Fresh training mask pairing for one epoch, reproducible from (seed, epoch)."""
    s = int(np.random.default_rng([seed, epoch, 17]).integers(2**31))
    return [apply_mask(c, assign_masks(c, masks, mode, s), fill) for c in chips]


def random_patch_masks(rng: np.random.Generator, n: int, config: ViTConfig,
                       ratio_range: tuple[float, float] = (0.2, 0.8)) -> np.ndarray:
    """Per-sample random patch drops for self-supervised pretraining; at least one kept and one dropped."""
    total = config.num_patches
    out = np.zeros((n, total), dtype=bool)
    for i in range(n):
        k = int(np.clip(round(rng.uniform(*ratio_range) * total), 1, total - 1))
        out[i, rng.permutation(total)[:k]] = True
    return out


def _train_step(model, opt, patches, dropped, target) -> float:
    pred = model(patches, dropped)
    loss = _patch_loss(pred, target, dropped)
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return float(loss.detach())


def train_vit(model: MaskedViT, train_chips: Sequence[Chip], train_masks: Sequence[CloudMask],
              config: TrainConfig, evaluate: Callable[[MaskedViT, int], float | None] | None = None,
              pretrain: bool = False) -> Iterator[EpochResult]:
    """Adam on masked-patch MSE; yields one result per epoch.

    With ``pretrain`` the cloud masks are ignored and random patches are
    dropped instead. ``evaluate(model, epoch)`` returns the validation MAE
    used for best-epoch tracking; the best state is kept in ``model.best_state``.
    """
    if not train_chips:
        raise DataError("empty training set")
    c = model.config
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    truth_all = torch.as_tensor(np.stack([ch.data for ch in train_chips]), dtype=torch.float32)
    target_all = patchify_array(truth_all, c.patch_size)
    model.best_state = None
    model.best_val = math.inf
    model.best_epoch = -1

    for epoch in range(1, config.epochs + 1):
        model.train()
        rng = np.random.default_rng([config.seed, epoch, 3])
        if pretrain:
            patches_all = target_all
            dropped_all = torch.as_tensor(random_patch_masks(rng, len(train_chips), c))
        else:
            masked = epoch_assignments(train_chips, train_masks, config.mode, config.seed, epoch, config.fill)
            patches_all, dropped_all = _batch_tensors(model, masked)
        order = rng.permutation(len(train_chips))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = torch.as_tensor(order[start : start + config.batch_size])
            dropped = dropped_all[idx]
            usable = (~dropped).any(dim=1)
            if not bool(usable.any()):
                continue
            idx = idx[usable]
            loss = _train_step(model, opt, patches_all[idx], dropped_all[idx], target_all[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite ViT loss at epoch {epoch}, batch {b}", epoch, "vit", b)
            losses.append(loss)
        result = EpochResult(epoch, float(np.mean(losses)) if losses else float("nan"))
        if evaluate is not None:
            result.val_mae = evaluate(model, epoch)
            if result.val_mae is not None and result.val_mae < model.best_val:
                model.best_val = result.val_mae
                model.best_epoch = epoch
                model.best_state = copy.deepcopy(model.state_dict())
        log.debug("vit epoch %d loss %.5f val_mae %s", epoch, result.train_loss, result.val_mae)
        yield result


# ---------------------------------------------------------------------------
# checkpoints


def save_vit(model: MaskedViT, path, metadata: dict | None = None) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    write_checkpoint(path, CHECKPOINT_MAGIC, asdict(model.config), arrays, metadata or {})


def load_vit(path) -> tuple[MaskedViT, dict]:
    config, arrays, metadata = read_checkpoint(path, CHECKPOINT_MAGIC)
    model = MaskedViT(ViTConfig(**config))
    model.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
    return model, metadata
