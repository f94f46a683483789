"""
Network Building Blocks
Equalized-learning-rate layers, modulated convolutions, domain-specific batch norm
"""
import math
from typing import Optional, Union

import torch
import torch.nn.functional as F
from torch import nn

NEGATIVE_SLOPE = 0.2
ACT_GAIN = math.sqrt(2)


class PixelNorm(nn.Module):
    def forward(self, input):
        return input * torch.rsqrt(torch.mean(input ** 2, dim=1, keepdim=True) + 1e-8)


class ScaledLeakyReLU(nn.Module):
    """Bias + leaky ReLU rescaled to preserve activation variance"""

    def __init__(self, channel: int, bias: bool = True):
        super().__init__()
        self.bias = nn.Parameter(torch.zeros(channel)) if bias else None

    def forward(self, input):
        if self.bias is not None:
            shape = (1, -1) + (1,) * (input.ndim - 2)
            input = input + self.bias.view(shape)
        return F.leaky_relu(input, NEGATIVE_SLOPE) * ACT_GAIN


class EqualLinear(nn.Module):
    def __init__(self, in_dim, out_dim, bias=True, bias_init=0.0, lr_mul=1.0, activation=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim).div_(lr_mul))
        self.bias = nn.Parameter(torch.zeros(out_dim).fill_(bias_init)) if bias else None
        self.activation = activation
        self.scale = (1 / math.sqrt(in_dim)) * lr_mul
        self.lr_mul = lr_mul

    def forward(self, input):
        bias = self.bias * self.lr_mul if self.bias is not None else None
        if self.activation:
            out = F.linear(input, self.weight * self.scale)
            if bias is not None:
                out = out + bias
            return F.leaky_relu(out, NEGATIVE_SLOPE) * ACT_GAIN
        return F.linear(input, self.weight * self.scale, bias=bias)

    def __repr__(self):
        return f"{self.__class__.__name__}({self.weight.shape[1]}, {self.weight.shape[0]})"


class EqualConv2d(nn.Module):
    def __init__(self, in_channel, out_channel, kernel_size, stride=1, padding=0, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channel, in_channel, kernel_size, kernel_size))
        self.scale = 1 / math.sqrt(in_channel * kernel_size ** 2)
        self.stride = stride
        self.padding = padding
        self.bias = nn.Parameter(torch.zeros(out_channel)) if bias else None

    def forward(self, input):
        return F.conv2d(input, self.weight * self.scale, bias=self.bias, stride=self.stride, padding=self.padding)

    def __repr__(self):
        return (
            f"{self.__class__.__name__}({self.weight.shape[1]}, {self.weight.shape[0]},"
            f" {self.weight.shape[2]}, stride={self.stride}, padding={self.padding})"
        )


def upsample2x(input):
    return F.interpolate(input, scale_factor=2, mode="bilinear", align_corners=False)


class ModulatedConv2d(nn.Module):
    """
    Style-modulated convolution (optionally demodulated) run as one grouped conv per batch.

    Upsampling is bilinear ×2 ahead of the convolution.
    """

    def __init__(self, in_channel, out_channel, kernel_size, style_dim, demodulate=True, upsample=False):
        super().__init__()
        self.eps = 1e-8
        self.kernel_size = kernel_size
        self.in_channel = in_channel
        self.out_channel = out_channel
        self.upsample = upsample
        self.scale = 1 / math.sqrt(in_channel * kernel_size ** 2)
        self.padding = kernel_size // 2
        self.weight = nn.Parameter(torch.randn(1, out_channel, in_channel, kernel_size, kernel_size))
        self.modulation = EqualLinear(style_dim, in_channel, bias_init=1.0)
        self.demodulate = demodulate

    def __repr__(self):
        return (
            f"{self.__class__.__name__}({self.in_channel}, {self.out_channel}, {self.kernel_size}, "
            f"upsample={self.upsample})"
        )

    def forward(self, input, style):
        batch, in_channel, _, _ = input.shape
        style = self.modulation(style).view(batch, 1, in_channel, 1, 1)
        weight = self.scale * self.weight * style

        if self.demodulate:
            demod = torch.rsqrt(weight.pow(2).sum([2, 3, 4]) + self.eps)
            weight = weight * demod.view(batch, self.out_channel, 1, 1, 1)

        weight = weight.view(batch * self.out_channel, in_channel, self.kernel_size, self.kernel_size)
        if self.upsample:
            input = upsample2x(input)
        _, _, height, width = input.shape
        out = F.conv2d(input.reshape(1, batch * in_channel, height, width), weight,
                       padding=self.padding, groups=batch)
        return out.view(batch, self.out_channel, height, width)


class NoiseInjection(nn.Module):
    def __init__(self):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(1))

    def forward(self, image, noise=None):
        if noise is None:
            batch, _, height, width = image.shape
            noise = image.new_empty(batch, 1, height, width).normal_()
        return image + self.weight * noise


class ConstantInput(nn.Module):
    def __init__(self, channel, size=4):
        super().__init__()
        self.input = nn.Parameter(torch.randn(1, channel, size, size))

    def forward(self, batch):
        return self.input.repeat(batch, 1, 1, 1)


class StyledConv(nn.Module):
    def __init__(self, in_channel, out_channel, kernel_size, style_dim, upsample=False, demodulate=True):
        super().__init__()
        self.conv = ModulatedConv2d(in_channel, out_channel, kernel_size, style_dim,
                                    upsample=upsample, demodulate=demodulate)
        self.noise = NoiseInjection()
        self.activate = ScaledLeakyReLU(out_channel)

    def forward(self, input, style, noise=None):
        out = self.conv(input, style)
        out = self.noise(out, noise=noise)
        return self.activate(out)


class ToImage(nn.Module):
    """1×1 modulated projection to image channels, accumulated over resolutions"""

    def __init__(self, in_channel, style_dim, im_channel=3, upsample=True):
        super().__init__()
        self.upsample = upsample
        self.conv = ModulatedConv2d(in_channel, im_channel, 1, style_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(1, im_channel, 1, 1))

    def forward(self, input, style, skip=None):
        out = self.conv(input, style) + self.bias
        if skip is not None:
            out = out + (upsample2x(skip) if self.upsample else skip)
        return out


class ConvLayer(nn.Sequential):
    def __init__(self, in_channel, out_channel, kernel_size, downsample=False, bias=True, activate=True):
        layers = [
            EqualConv2d(in_channel, out_channel, kernel_size, padding=kernel_size // 2,
                        bias=bias and not activate)
        ]
        if activate:
            layers.append(ScaledLeakyReLU(out_channel, bias=bias))
        if downsample:
            layers.append(nn.AvgPool2d(2))
        super().__init__(*layers)


class ResBlock(nn.Module):
    """Downsampling residual block of the discriminator"""

    def __init__(self, in_channel, out_channel):
        super().__init__()
        self.conv1 = ConvLayer(in_channel, in_channel, 3)
        self.conv2 = ConvLayer(in_channel, out_channel, 3, downsample=True)
        self.skip = ConvLayer(in_channel, out_channel, 1, downsample=True, activate=False, bias=False)

    def forward(self, input):
        out = self.conv2(self.conv1(input))
        return (out + self.skip(input)) / math.sqrt(2)


# ==================== Domain-specific normalization ====================

def domain_vector(d: Union[int, torch.Tensor], batch: int, device=None) -> torch.Tensor:
    """Per-sample domain flags as a long tensor of shape (batch,)"""
    if isinstance(d, torch.Tensor):
        d = d.to(device=device, dtype=torch.long).reshape(-1)
        return d.expand(batch) if d.numel() == 1 else d
    return torch.full((batch,), int(d), dtype=torch.long, device=device)


class DomainBatchNorm2d(nn.Module):
    """
    One BatchNorm2d per domain, selected per sample by the flag vector.

    With a single domain every sample shares one set of statistics (plain batch norm).
    """

    def __init__(self, num_features: int, num_domains: int = 2):
        super().__init__()
        self.num_domains = num_domains
        self.bns = nn.ModuleList([nn.BatchNorm2d(num_features) for _ in range(num_domains)])

    def forward(self, x, d):
        d = domain_vector(d, x.shape[0], x.device)
        if self.num_domains == 1:
            return self.bns[0](x)
        out = torch.empty_like(x)
        for domain in torch.unique(d).tolist():
            select = (d == domain).nonzero(as_tuple=True)[0]
            out = out.index_copy(0, select, self.bns[domain](x.index_select(0, select)))
        return out


class EncoderBlock(nn.Module):
    """Residual downsampling block whose normalizations follow the domain flag"""

    def __init__(self, in_channel, out_channel, num_domains, downsample=True):
        super().__init__()
        self.conv1 = EqualConv2d(in_channel, out_channel, 3, padding=1, bias=False)
        self.norm1 = DomainBatchNorm2d(out_channel, num_domains)
        self.conv2 = EqualConv2d(out_channel, out_channel, 3, padding=1, bias=False)
        self.norm2 = DomainBatchNorm2d(out_channel, num_domains)
        self.skip = EqualConv2d(in_channel, out_channel, 1, bias=False)
        self.downsample = downsample

    def forward(self, x, d):
        out = F.leaky_relu(self.norm1(self.conv1(x), d), NEGATIVE_SLOPE)
        out = F.leaky_relu(self.norm2(self.conv2(out), d), NEGATIVE_SLOPE)
        out = (out + self.skip(x)) / math.sqrt(2)
        return F.avg_pool2d(out, 2) if self.downsample else out


class SkipFusion(nn.Module):
    """Gate g = σ(conv1×1[feature, residual]); feature + g · residual"""

    def __init__(self, channel):
        super().__init__()
        self.gate = EqualConv2d(2 * channel, channel, 1)
        # gates start mostly closed (sigmoid(-2))
        nn.init.constant_(self.gate.bias, -2.0)

    def forward(self, feature, residual: Optional[torch.Tensor]):
        if residual is None:
            return feature
        gate = torch.sigmoid(self.gate(torch.cat([feature, residual], dim=1)))
        return feature + gate * residual
