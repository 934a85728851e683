"""Untrained U-Net generator used as a Deep Image Prior."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError

DEFAULT_CHANNELS = (16, 32, 64, 128)
Z_CHANNELS = 32
SKIP_CHANNELS = 4


def _act():
    return nn.LeakyReLU(0.2, inplace=True)


def _norm(ch, enabled):
    return nn.BatchNorm2d(ch) if enabled else nn.Identity()


class DIPGenerator(nn.Module):
    """x = g(theta; z) with a fixed noise tensor ``z``.

    Each encoder level halves the resolution with a strided conv; each
    decoder level upsamples bilinearly and concatenates a 1x1 skip branch
    taken from the encoder input at the same resolution. A sigmoid keeps the
    output in [0, 1].
    """

    def __init__(self, output_shape, channels=DEFAULT_CHANNELS, z_channels: int = Z_CHANNELS,
                 skip_channels: int = SKIP_CHANNELS, jitter_std: float = 0.0, batch_norm: bool = True):
        super().__init__()
        h, w, c = (int(s) for s in output_shape)
        depth = len(channels)
        if depth < 1:
            raise InputError("generator needs at least one level")
        if h % 2**depth or w % 2**depth:
            raise InputError(f"output {h}x{w} is not divisible by 2^{depth}")
        self.output_shape = (h, w, c)
        self.depth = depth
        self.channels = tuple(int(ch) for ch in channels)
        self.jitter_std = float(jitter_std)

        self.down = nn.ModuleList()
        self.skip = nn.ModuleList()
        self.up = nn.ModuleList()
        prev = z_channels
        for ch in self.channels:
            self.skip.append(nn.Sequential(
                nn.Conv2d(prev, skip_channels, 1), _norm(skip_channels, batch_norm), _act(),
            ))
            self.down.append(nn.Sequential(
                nn.Conv2d(prev, ch, 3, stride=2, padding=1), _norm(ch, batch_norm), _act(),
                nn.Conv2d(ch, ch, 3, padding=1), _norm(ch, batch_norm), _act(),
            ))
            prev = ch
        # decoder level i consumes the output of level i + 1 (or the bottleneck)
        for i in range(depth):
            deeper = self.channels[i + 1] if i + 1 < depth else self.channels[-1]
            self.up.append(nn.Sequential(
                nn.Conv2d(deeper + skip_channels, self.channels[i], 3, padding=1),
                _norm(self.channels[i], batch_norm), _act(),
                nn.Conv2d(self.channels[i], self.channels[i], 1), _norm(self.channels[i], batch_norm), _act(),
            ))
        self.head = nn.Conv2d(self.channels[0], c, 1)
        self.register_buffer("z", torch.zeros(1, z_channels, h, w))

    def forward(self, z=None):
        h = self.z if z is None else z
        skips = []
        for down, skip in zip(self.down, self.skip):
            skips.append(skip(h))
            h = down(h)
        for i in reversed(range(self.depth)):
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = self.up[i](torch.cat([h, skips[i]], dim=1))
        return torch.sigmoid(self.head(h))


def init_generator(output_shape, seed: int = 0, channels=DEFAULT_CHANNELS, z_channels: int = Z_CHANNELS,
                   jitter_std: float = 0.0, batch_norm: bool = True, dtype=torch.float32) -> DIPGenerator:
    """Seeded generator; z ~ U[0, 0.1] is drawn once and kept fixed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        gen = DIPGenerator(output_shape, channels, z_channels, jitter_std=jitter_std, batch_norm=batch_norm)
        gen.z.uniform_(0.0, 0.1)
    gen.z.requires_grad_(False)
    return gen.to(dtype)


def generate(gen: DIPGenerator, rng: torch.Generator | None = None) -> torch.Tensor:
    """Current generator image as an (H, W, C) tensor, differentiable in theta.

    With ``jitter_std > 0`` and an ``rng``, z is perturbed by Gaussian noise
    for this call only; the stored z never changes.
    """
    z = gen.z
    if gen.jitter_std > 0 and rng is not None:
        z = z + gen.jitter_std * torch.randn(z.shape, generator=rng, dtype=z.dtype)
    return gen(z)[0].permute(1, 2, 0)


def parameter_count(gen: nn.Module) -> int:
    return sum(p.numel() for p in gen.parameters())
