"""
Generator and Label-Synthesis Branch
Mapping network, style-based synthesis pyramid with exposed features, per-pixel label head
"""
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from vesseladapt.exceptions import ResolutionMismatch
from vesseladapt.nets.layers import ConstantInput, EqualLinear, PixelNorm, StyledConv, ToImage
from vesseladapt.schemas import NUM_CLASSES, NetConfig

FeatureStack = Dict[int, torch.Tensor]


class Generator(nn.Module):
    """
    z → w (mapping) → W+ → image.

    Synthesis starts from a learned 4×4 constant and doubles up to `image_size`; the
    activations after the last styled conv of every resolution form the feature stack.
    """

    def __init__(self, net: NetConfig):
        super().__init__()
        self.net = net
        self.size = net.image_size
        self.log_size = net.log_size
        self.style_dim = net.w_dim

        layers = [PixelNorm(), EqualLinear(net.z_dim, net.w_dim, lr_mul=net.lr_mlp, activation=True)]
        for _ in range(net.n_mlp - 1):
            layers.append(EqualLinear(net.w_dim, net.w_dim, lr_mul=net.lr_mlp, activation=True))
        self.style = nn.Sequential(*layers)

        self.channels = {2 ** i: net.channels_at(2 ** i) for i in range(2, self.log_size + 1)}
        self.input = ConstantInput(self.channels[4])
        self.conv1 = StyledConv(self.channels[4], self.channels[4], 3, net.w_dim)
        self.to_rgb1 = ToImage(self.channels[4], net.w_dim, im_channel=net.channels, upsample=False)

        self.num_layers = (self.log_size - 2) * 2 + 1
        self.n_latent = net.num_ws

        self.convs = nn.ModuleList()
        self.to_rgbs = nn.ModuleList()
        self.noises = nn.Module()
        for layer_idx in range(self.num_layers):
            res = (layer_idx + 5) // 2
            self.noises.register_buffer(f"noise_{layer_idx}", torch.randn(1, 1, 2 ** res, 2 ** res))

        in_channel = self.channels[4]
        for i in range(3, self.log_size + 1):
            out_channel = self.channels[2 ** i]
            self.convs.append(StyledConv(in_channel, out_channel, 3, net.w_dim, upsample=True))
            self.convs.append(StyledConv(out_channel, out_channel, 3, net.w_dim))
            self.to_rgbs.append(ToImage(out_channel, net.w_dim, im_channel=net.channels))
            in_channel = out_channel

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        """(B, Dz) → (B, L, Dw), one w broadcast to every synthesis layer"""
        w = self.style(z)
        return w.unsqueeze(1).repeat(1, self.n_latent, 1)

    @torch.no_grad()
    def mean_latent(self, n_samples: int = 4096, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        device = self.input.input.device
        z = torch.randn(n_samples, self.net.z_dim, generator=generator, device=device,
                        dtype=self.input.input.dtype)
        return self.style(z).mean(0)

    def fixed_noise(self):
        return [getattr(self.noises, f"noise_{i}") for i in range(self.num_layers)]

    def forward(
        self,
        latent: torch.Tensor,
        residuals: Optional[FeatureStack] = None,
        fusion: Optional[nn.ModuleDict] = None,
        randomize_noise: bool = True,
    ) -> Tuple[torch.Tensor, FeatureStack]:
        """
        latent: (B, L, Dw) codes of W+.
        residuals/fusion: encoder residuals per resolution and the gates merging them into
        the synthesis features (skip connections); both optional.
        """
        if latent.ndim != 3 or latent.shape[1] != self.n_latent:
            raise ResolutionMismatch(
                f"expected latent codes of shape (B, {self.n_latent}, {self.style_dim}), got {tuple(latent.shape)}"
            )
        noise = [None] * self.num_layers if randomize_noise else self.fixed_noise()

        def fuse(res, out):
            if residuals is None or fusion is None or res not in residuals:
                return out
            return fusion[str(res)](out, residuals[res])

        features: FeatureStack = {}
        out = self.input(latent.shape[0])
        out = self.conv1(out, latent[:, 0], noise=noise[0])
        out = fuse(4, out)
        features[4] = out
        skip = self.to_rgb1(out, latent[:, 1])

        i = 1
        for conv1, conv2, noise1, noise2, to_rgb in zip(
            self.convs[::2], self.convs[1::2], noise[1::2], noise[2::2], self.to_rgbs
        ):
            out = conv1(out, latent[:, i], noise=noise1)
            out = conv2(out, latent[:, i + 1], noise=noise2)
            res = out.shape[-1]
            out = fuse(res, out)
            features[res] = out
            skip = to_rgb(out, latent[:, i + 2], skip)
            i += 2

        return skip, features


class LabelSynthesisBranch(nn.Module):
    """
    Per-pixel classifier over the generator's feature stack: every resolution is
    upsampled to the image grid, concatenated, and passed through three 1×1 layers.
    """

    def __init__(self, net: NetConfig, feature_channels: Dict[int, int]):
        super().__init__()
        self.size = net.image_size
        self.resolutions = sorted(feature_channels)
        in_channel = sum(feature_channels.values())
        hidden = net.lsb_hidden
        self.layers = nn.Sequential(
            nn.Conv2d(in_channel, hidden, 1),
            nn.ReLU(),
            nn.BatchNorm2d(hidden),
            nn.Conv2d(hidden, hidden // 2, 1),
            nn.ReLU(),
            nn.BatchNorm2d(hidden // 2),
            nn.Conv2d(hidden // 2, NUM_CLASSES, 1),
        )

    def forward(self, features: FeatureStack) -> torch.Tensor:
        if sorted(features) != self.resolutions:
            raise ResolutionMismatch(
                f"feature stack resolutions {sorted(features)} differ from {self.resolutions}"
            )
        stacked = []
        for res in self.resolutions:
            feature = features[res]
            if feature.shape[-1] != res or feature.shape[-2] != res:
                raise ResolutionMismatch(f"feature keyed {res} has spatial size {tuple(feature.shape[-2:])}")
            if res != self.size:
                feature = F.interpolate(feature, size=(self.size, self.size), mode="bilinear", align_corners=False)
            stacked.append(feature)
        return self.layers(torch.cat(stacked, dim=1))
