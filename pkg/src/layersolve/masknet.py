"""Encoder-decoder network mapping a fixed noise input to the blending mask.

The net is optimized per run from scratch; its only input is a frozen noise
buffer sampled at construction, so (parameters, buffer) fully determine the
output mask. Stride-2 convolutions encode, nearest-neighbor upsampling plus
convolution decodes, with skip concatenations at matching resolutions and a
final sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .imaging import BlendMask


@dataclass(frozen=True)
class MaskNetConfig:
    resolution: int = 64
    depth: int = 4
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    skips: Tuple[bool, ...] = (True, True, True, True)
    noise_channels: int = 8

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if len(self.widths) != self.depth or len(self.skips) != self.depth:
            raise ConfigError("widths and skips must have one entry per level")
        if self.resolution % (2**self.depth) != 0:
            raise ConfigError(
                f"resolution {self.resolution} is not a multiple of 2^{self.depth}"
            )


class MaskNet(nn.Module):
    def __init__(self, cfg: MaskNetConfig, seed: int):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)

        enc = []
        c_in = cfg.noise_channels
        for w in cfg.widths:
            enc.append(nn.Conv2d(c_in, w, 3, stride=2, padding=1))
            c_in = w
        self.encoder = nn.ModuleList(enc)

        # Decoder level j consumes the features at resolution r / 2^(j+1) and
        # produces resolution r / 2^j; skips[j] concatenates the encoder
        # features at the target resolution (the raw input noise for j = 0).
        dec = []
        c_cur = cfg.widths[-1]
        for j in range(cfg.depth - 1, -1, -1):
            skip_ch = 0
            if cfg.skips[j]:
                skip_ch = cfg.widths[j - 1] if j >= 1 else cfg.noise_channels
            c_out = cfg.widths[j - 1] if j >= 1 else cfg.widths[0]
            dec.append(nn.Conv2d(c_cur + skip_ch, c_out, 3, padding=1))
            c_cur = c_out
        self.decoder = nn.ModuleList(dec)
        self.head = nn.Conv2d(c_cur, 1, 1)

        with torch.no_grad():
            for conv in [*self.encoder, *self.decoder]:
                nn.init.kaiming_normal_(conv.weight, a=0.2, generator=gen)
                conv.bias.zero_()
            # modest head weights keep the initial mask near 0.5, unsaturated
            nn.init.normal_(self.head.weight, std=0.05, generator=gen)
            self.head.bias.zero_()

        noise = torch.empty(cfg.noise_channels, cfg.resolution, cfg.resolution)
        noise.uniform_(0.0, 0.1, generator=gen)
        self.register_buffer("input_noise", noise)

    def forward(self) -> torch.Tensor:
        x = self.input_noise[None]
        taps = [x]
        for conv in self.encoder:
            x = F.leaky_relu(conv(x), 0.2)
            taps.append(x)
        for idx, conv in enumerate(self.decoder):
            j = self.cfg.depth - 1 - idx
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if self.cfg.skips[j]:
                x = torch.cat([x, taps[j]], dim=1)
            x = F.leaky_relu(conv(x), 0.2)
        return torch.sigmoid(self.head(x))[0]


def init_masknet(cfg: MaskNetConfig, seed: int) -> MaskNet:
    return MaskNet(cfg, seed)


def mask_from_net(net: MaskNet) -> BlendMask:
    with torch.no_grad():
        values = net().detach()
    return BlendMask.from_tensor(values, mode="soft")
