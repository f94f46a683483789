"""
Domain-Flagged Encoder
Image + domain flag → W+ codes around the generator's average latent, plus skip residuals
"""
from typing import Tuple, Union

import torch
from torch import nn

from vesseladapt.nets.generator import FeatureStack
from vesseladapt.nets.layers import (
    EncoderBlock,
    EqualConv2d,
    EqualLinear,
    SkipFusion,
    domain_vector,
)
from vesseladapt.schemas import AblationFlags, NetConfig


class Encoder(nn.Module):
    """
    Residual downsampling pyramid from the image size to 4×4.

    The flag d is embedded and concatenated to the input; with `dsbn` every batch norm
    keeps separate statistics per domain. Residual heads project encoder activations to
    the generator's channel widths for resolutions >= `skip_min_res`, and the matching
    SkipFusion gates live here so they train with the encoder.
    """

    def __init__(self, net: NetConfig, flags: AblationFlags, generator_channels: dict):
        super().__init__()
        self.net = net
        self.n_latent = net.num_ws
        self.w_dim = net.w_dim
        num_domains = 2 if flags.dsbn else 1
        width = encoder_widths(net)

        self.domain_embed = nn.Embedding(2, net.domain_embed_dim)
        self.stem = EncoderBlock(net.channels + net.domain_embed_dim, width(net.image_size), num_domains,
                                 downsample=False)
        self.blocks = nn.ModuleList()
        res = net.image_size
        while res > 4:
            self.blocks.append(EncoderBlock(width(res), width(res // 2), num_domains))
            res //= 2

        self.skip_resolutions = [r for r in sorted(generator_channels) if r >= net.skip_min_res]
        self.residual_heads = nn.ModuleDict({
            str(r): EqualConv2d(width(r), generator_channels[r], 1) for r in self.skip_resolutions
        })
        self.fusion = nn.ModuleDict({str(r): SkipFusion(generator_channels[r]) for r in self.skip_resolutions})

        hidden = 4 * net.w_dim
        self.latent_head = nn.Sequential(
            EqualLinear(width(4) * 16, hidden, activation=True),
            EqualLinear(hidden, self.n_latent * net.w_dim),
        )
        self.register_buffer("w_avg", torch.zeros(net.w_dim))

    def set_average_latent(self, w_avg: torch.Tensor) -> None:
        self.w_avg.copy_(w_avg.detach().to(self.w_avg))

    def forward(self, x: torch.Tensor, d: Union[int, torch.Tensor]) -> Tuple[torch.Tensor, FeatureStack]:
        batch, _, height, width = x.shape
        d = domain_vector(d, batch, x.device)
        embed = self.domain_embed(d).to(x.dtype)[:, :, None, None].expand(-1, -1, height, width)
        out = self.stem(torch.cat([x, embed], dim=1), d)

        activations = {height: out}
        for block in self.blocks:
            out = block(out, d)
            activations[out.shape[-1]] = out

        residuals = {r: self.residual_heads[str(r)](activations[r]) for r in self.skip_resolutions}
        delta = self.latent_head(out.flatten(1)).view(batch, self.n_latent, self.w_dim)
        return self.w_avg + delta, residuals


def encoder_widths(net: NetConfig):
    """Channel width per resolution: encoder_channels at 32² and above, doubling below, capped at 2×"""
    return lambda res: min(2 * net.encoder_channels, max(net.encoder_channels, net.encoder_channels * 32 // res))
