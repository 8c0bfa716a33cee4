"""Conditional GAN imputer: U-Net generator and a two-scale patch discriminator.

The generator sees the masked time series stacked as T*B image channels
plus T mask channels and predicts all T*B channels. The discriminator
judges the composited series (truth outside clouds, generated inside) at
full and half resolution, and its hinge loss only counts score cells whose
receptive field contains at least one cloudy pixel.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import read_checkpoint, write_checkpoint
from .chipstore import Chip, CloudMask
from .errors import ConfigError, DataError, DivergenceError
from .masking import MaskedChip
from .vit import EpochResult, epoch_assignments

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CGNC"


@dataclass
class CGANConfig:
    scenes: int = 3
    bands: int = 6
    height: int = 32
    width: int = 32
    gen_channels: int = 32
    gen_depth: int = 3
    disc_channels: int = 32
    disc_downsamples: int = 2
    # Fixed reflectance standardization for network inputs and loss terms.
    value_mean: float = 0.15
    value_std: float = 0.07

    def __post_init__(self) -> None:
        if min(self.scenes, self.bands, self.gen_channels, self.gen_depth, self.disc_channels) < 1:
            raise ConfigError("CGAN sizes must be positive")
        step = 2**self.gen_depth
        if self.height % step or self.width % step:
            raise ConfigError(f"{self.height}x{self.width} is not divisible by 2**gen_depth = {step}")
        for scale in (1, 2):
            h = d = min(self.height, self.width) // scale
            for _ in range(self.disc_downsamples):
                h = h // 2
            if h - 2 < 1:
                raise ConfigError(
                    f"discriminator with {self.disc_downsamples} downsamples has an empty score map "
                    f"at {d}px; lower disc_downsamples"
                )

    @property
    def image_channels(self) -> int:
        return self.scenes * self.bands


@dataclass
class GanTrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr_d: float = 1e-4
    lr_g: float = 5e-4
    alpha: float = 5.0
    seed: int = 0
    mode: str = "E1"
    fill: float = 0.0

    def __post_init__(self) -> None:
        if self.lr_d < 0 or self.lr_g < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"invalid training config {self}")


# ---------------------------------------------------------------------------
# networks


class Generator(nn.Module):
    """U-Net: stride-2 conv encoder, transposed-conv decoder, skip connections at every level."""

    def __init__(self, config: CGANConfig):
        super().__init__()
        self.config = config
        c_in = config.image_channels + config.scenes
        ch = [c_in] + [config.gen_channels * min(2**i, 8) for i in range(config.gen_depth)]
        self.down = nn.ModuleList(nn.Conv2d(ch[i], ch[i + 1], 4, 2, 1) for i in range(config.gen_depth))
        self.up = nn.ModuleList()
        for i in reversed(range(config.gen_depth)):
            c_from = ch[i + 1] if i == config.gen_depth - 1 else ch[i + 1] * 2
            c_to = ch[i] if i > 0 else config.gen_channels
            self.up.append(nn.ConvTranspose2d(c_from, c_to, 4, 2, 1))
        self.head = nn.Conv2d(config.gen_channels + c_in, config.image_channels, 3, 1, 1)
        # Output is head * std, so starting the bias at mean/std centres predictions on the data mean.
        nn.init.constant_(self.head.bias, config.value_mean / config.value_std)

    def forward(self, masked: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """masked: [N, T, B, H, W]; mask: [N, T, H, W] -> [N, T, B, H, W]."""
        n, t, b, h, w = masked.shape
        c = self.config
        x0 = torch.cat([((masked - c.value_mean) / c.value_std).reshape(n, t * b, h, w), mask], dim=1)
        skips = [x0]
        x = x0
        for conv in self.down:
            x = F.leaky_relu(conv(x), 0.2)
            skips.append(x)
        skips.pop()
        for deconv in self.up:
            x = F.relu(deconv(x))
            x = torch.cat([x, skips.pop()], dim=1)
        return (self.head(x) * c.value_std).reshape(n, t, b, h, w)


class PatchDiscriminator(nn.Module):
    """PatchGAN: ``downsamples`` stride-2 convs, one stride-1 conv, a 1-channel score conv; all 4x4."""

    def __init__(self, in_channels: int, channels: int, downsamples: int):
        super().__init__()
        layers = []
        c = in_channels
        for i in range(downsamples):
            layers.append(nn.Conv2d(c, channels * min(2**i, 8), 4, 2, 1))
            c = channels * min(2**i, 8)
        layers.append(nn.Conv2d(c, c * 2, 4, 1, 1))
        layers.append(nn.Conv2d(c * 2, 1, 4, 1, 1))
        self.layers = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers[:-1]:
            x = F.leaky_relu(layer(x), 0.2)
        return self.layers[-1](x)

    def lift(self, pixel_valid: torch.Tensor) -> torch.Tensor:
        """Score-map cells whose receptive field touches any valid pixel."""
        x = pixel_valid
        for layer in self.layers:
            x = F.max_pool2d(x, layer.kernel_size, layer.stride, layer.padding)
        return x > 0


class TwoScaleDiscriminator(nn.Module):
    def __init__(self, config: CGANConfig):
        super().__init__()
        self.config = config
        c_in = config.image_channels + config.scenes
        self.d_full = PatchDiscriminator(c_in, config.disc_channels, config.disc_downsamples)
        self.d_half = PatchDiscriminator(c_in, config.disc_channels, config.disc_downsamples)

    def forward(self, series: torch.Tensor, mask: torch.Tensor) -> list[torch.Tensor]:
        """series is in standardized units."""
        n, t, b, h, w = series.shape
        x = torch.cat([series.reshape(n, t * b, h, w), mask], dim=1)
        return [self.d_full(x), self.d_half(F.avg_pool2d(x, 2))]

    def validity(self, mask: torch.Tensor) -> list[torch.Tensor]:
        """Per-scale score cells covering at least one cloudy pixel of any scene."""
        union = mask.amax(dim=1, keepdim=True).to(torch.float32)
        return [self.d_full.lift(union), self.d_half.lift(F.max_pool2d(union, 2))]


def build_cgan(config: CGANConfig, seed: int = 0) -> tuple[Generator, TwoScaleDiscriminator]:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Generator(config), TwoScaleDiscriminator(config)


# ---------------------------------------------------------------------------
# losses


def _masked_mean(x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    v = valid.to(x.dtype)
    count = v.sum()
    if float(count) == 0:
        raise DataError("no valid discriminator patches (mask has no cloudy pixels)")
    return (x * v).sum() / count


def hinge_d_loss(real_scores: Sequence[torch.Tensor], fake_scores: Sequence[torch.Tensor],
                 valid: Sequence[torch.Tensor]) -> torch.Tensor:
    terms = [
        _masked_mean(F.relu(1 - r) + F.relu(1 + f), v)
        for r, f, v in zip(real_scores, fake_scores, valid, strict=True)
    ]
    return torch.stack(terms).mean()


def hinge_g_loss(fake_scores: Sequence[torch.Tensor], valid: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.stack([-_masked_mean(f, v) for f, v in zip(fake_scores, valid, strict=True)]).mean()


def masked_mse(generated: torch.Tensor, truth: torch.Tensor, pixel_mask: torch.Tensor) -> torch.Tensor:
    """Squared error pooled over every band of every cloudy pixel; pixel_mask is [..., T, H, W]."""
    if generated.shape != truth.shape:
        raise DataError(f"shape mismatch {tuple(generated.shape)} vs {tuple(truth.shape)}")
    w = pixel_mask.to(generated.dtype).unsqueeze(-3).expand_as(generated)
    total = w.sum()
    if float(total) == 0:
        raise DataError("no masked pixels: loss is undefined")
    return ((generated - truth) ** 2 * w).sum() / total


def total_g_loss(generated, truth, fake_scores, pixel_mask, alpha: float, valid) -> torch.Tensor:
    return hinge_g_loss(fake_scores, valid) + alpha * masked_mse(generated, truth, pixel_mask)


def composite_t(generated: torch.Tensor, truth: torch.Tensor, pixel_mask: torch.Tensor) -> torch.Tensor:
    return torch.where(pixel_mask.unsqueeze(-3).bool(), generated, truth)


# ---------------------------------------------------------------------------
# inference and training


def generate(gen: Generator, masked_chip: MaskedChip, pixel_mask: np.ndarray | None = None) -> np.ndarray:
    pm = masked_chip.pixel_mask if pixel_mask is None else pixel_mask
    dtype = next(gen.parameters()).dtype
    with torch.no_grad():
        out = gen(torch.as_tensor(masked_chip.masked_data, dtype=dtype)[None],
                  torch.as_tensor(np.asarray(pm), dtype=dtype)[None])
    return out[0].numpy()


def impute(gen: Generator, masked: Sequence[MaskedChip], batch_size: int = 32) -> np.ndarray:
    gen.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, len(masked), batch_size):
            data, pm = _stack(masked[start : start + batch_size])
            outs.append(gen(data, pm).numpy())
    return np.concatenate(outs)


def _stack(masked: Sequence[MaskedChip]) -> tuple[torch.Tensor, torch.Tensor]:
    data = torch.as_tensor(np.stack([m.masked_data for m in masked]), dtype=torch.float32)
    pm = torch.as_tensor(np.stack([m.pixel_mask for m in masked]), dtype=torch.float32)
    return data, pm


def d_step(gen: Generator, disc: TwoScaleDiscriminator, opt_d: torch.optim.Optimizer,
           data: torch.Tensor, pm: torch.Tensor, truth_std: torch.Tensor) -> float:
    """One discriminator update with the generator frozen. ``truth_std`` is standardized."""
    mu, sd = gen.config.value_mean, gen.config.value_std
    with torch.no_grad():
        fake = composite_t((gen(data, pm) - mu) / sd, truth_std, pm)
    loss = hinge_d_loss(disc(truth_std, pm), disc(fake, pm), disc.validity(pm))
    if not torch.isfinite(loss):
        return float("nan")
    opt_d.zero_grad(set_to_none=True)
    loss.backward()
    opt_d.step()
    return float(loss.detach())


def g_step(gen: Generator, disc: TwoScaleDiscriminator, opt_g: torch.optim.Optimizer,
           data: torch.Tensor, pm: torch.Tensor, truth_std: torch.Tensor, alpha: float) -> float:
    """One generator update against a frozen discriminator."""
    mu, sd = gen.config.value_mean, gen.config.value_std
    disc.requires_grad_(False)
    try:
        generated = (gen(data, pm) - mu) / sd
        scores = disc(composite_t(generated, truth_std, pm), pm)
        loss = total_g_loss(generated, truth_std, scores, pm, alpha, disc.validity(pm))
        if not torch.isfinite(loss):
            return float("nan")
        opt_g.zero_grad(set_to_none=True)
        loss.backward()
        opt_g.step()
    finally:
        disc.requires_grad_(True)
    return float(loss.detach())


def train_cgan(gen: Generator, disc: TwoScaleDiscriminator, train_chips: Sequence[Chip],
               train_masks: Sequence[CloudMask], config: GanTrainConfig,
               evaluate: Callable[[Generator, int], float | None] | None = None) -> Iterator[EpochResult]:
    """Alternate one discriminator step (generator frozen) and one generator step per batch.

    Both losses see standardized reflectance, so alpha weighs a unit-scale MSE.

    ``train_loss`` in the yielded results is the mean generator loss. The
    best generator state by ``evaluate`` is kept in ``gen.best_state``.
    """
    if not train_chips:
        raise DataError("empty training set")
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_d, betas=(0.5, 0.999))
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_g, betas=(0.5, 0.999))
    truth_all = torch.as_tensor(np.stack([c.data for c in train_chips]), dtype=torch.float32)
    truth_std_all = (truth_all - gen.config.value_mean) / gen.config.value_std
    gen.best_state, gen.best_val, gen.best_epoch = None, math.inf, -1
    disc.best_state = None

    for epoch in range(1, config.epochs + 1):
        gen.train()
        disc.train()
        masked = epoch_assignments(train_chips, train_masks, config.mode, config.seed, epoch, config.fill)
        data_all, pm_all = _stack(masked)
        order = np.random.default_rng([config.seed, epoch, 5]).permutation(len(train_chips))
        g_losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = torch.as_tensor(order[start : start + config.batch_size])
            data, pm, truth = data_all[idx], pm_all[idx], truth_std_all[idx]
            d_loss = d_step(gen, disc, opt_d, data, pm, truth)
            if not math.isfinite(d_loss):
                raise DivergenceError(f"non-finite discriminator loss at epoch {epoch}, batch {b}",
                                      epoch, "discriminator", b)
            g_loss = g_step(gen, disc, opt_g, data, pm, truth, config.alpha)
            if not math.isfinite(g_loss):
                raise DivergenceError(f"non-finite generator loss at epoch {epoch}, batch {b}",
                                      epoch, "generator", b)
            g_losses.append(g_loss)

        result = EpochResult(epoch, float(np.mean(g_losses)))
        if evaluate is not None:
            result.val_mae = evaluate(gen, epoch)
            if result.val_mae is not None and result.val_mae < gen.best_val:
                gen.best_val, gen.best_epoch = result.val_mae, epoch
                gen.best_state = copy.deepcopy(gen.state_dict())
                disc.best_state = copy.deepcopy(disc.state_dict())
        log.debug("cgan epoch %d g_loss %.5f val_mae %s", epoch, result.train_loss, result.val_mae)
        yield result


# ---------------------------------------------------------------------------
# checkpoints


def save_cgan(gen: Generator, disc: TwoScaleDiscriminator, path, metadata: dict | None = None) -> None:
    arrays = {f"gen.{k}": v.detach().cpu().numpy() for k, v in gen.state_dict().items()}
    arrays.update({f"disc.{k}": v.detach().cpu().numpy() for k, v in disc.state_dict().items()})
    write_checkpoint(path, CHECKPOINT_MAGIC, asdict(gen.config), arrays, metadata or {})


def load_cgan(path) -> tuple[Generator, TwoScaleDiscriminator, dict]:
    config, arrays, metadata = read_checkpoint(path, CHECKPOINT_MAGIC)
    gen = Generator(CGANConfig(**config))
    disc = TwoScaleDiscriminator(gen.config)
    gen.load_state_dict({k[4:]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("gen.")})
    disc.load_state_dict({k[5:]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("disc.")})
    return gen, disc, metadata
