"""
Discriminator
Residual downsampling critic producing one realism logit per image
"""
import torch
from torch import nn

from vesseladapt.nets.layers import ConvLayer, EqualLinear, ResBlock
from vesseladapt.schemas import NetConfig


class Discriminator(nn.Module):
    def __init__(self, net: NetConfig):
        super().__init__()
        channels = {2 ** i: net.channels_at(2 ** i) for i in range(2, net.log_size + 1)}

        convs = [ConvLayer(net.channels, channels[net.image_size], 1)]
        in_channel = channels[net.image_size]
        for i in range(net.log_size, 2, -1):
            out_channel = channels[2 ** (i - 1)]
            convs.append(ResBlock(in_channel, out_channel))
            in_channel = out_channel
        self.convs = nn.Sequential(*convs)

        self.final_conv = ConvLayer(in_channel, channels[4], 3)
        self.final_linear = nn.Sequential(
            EqualLinear(channels[4] * 4 * 4, channels[4], activation=True),
            EqualLinear(channels[4], 1),
        )

    def forward(self, input: torch.Tensor) -> torch.Tensor:
        out = self.final_conv(self.convs(input))
        return self.final_linear(out.flatten(1)).squeeze(1)
