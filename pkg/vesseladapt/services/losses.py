"""
Losses
Non-saturating adversarial loss, R1 and path-length regularizers, Dice/CE segmentation, reconstruction
"""
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import autograd, nn

from vesseladapt.exceptions import NonFiniteGradient, ShapeMismatch
from vesseladapt.schemas import BRAIN, VESSEL

DICE_EPS = 1e-5
FOREGROUND = (BRAIN, VESSEL)


# ==================== Adversarial ====================

def adv_nonsat(
    scores_fake: torch.Tensor,
    scores_real: Optional[torch.Tensor] = None,
    side: Literal["G", "D"] = "G",
) -> torch.Tensor:
    """G: mean softplus(-fake); D: mean softplus(-real) + mean softplus(fake)"""
    if side == "G":
        return F.softplus(-scores_fake).mean()
    if scores_real is None:
        raise ValueError("the discriminator side needs real scores")
    return F.softplus(-scores_real).mean() + F.softplus(scores_fake).mean()


def r1_penalty(score_fn: Callable[[torch.Tensor], torch.Tensor], x_real: torch.Tensor, gamma: float) -> torch.Tensor:
    """(γ/2) · batch mean of ‖∇_x score(x_real)‖², differentiable w.r.t. the critic's parameters"""
    x = x_real.detach().requires_grad_(True)
    scores = score_fn(x)
    if not scores.requires_grad:
        return x.new_zeros(())
    (grad,) = autograd.grad(scores.sum(), x, create_graph=True, allow_unused=True)
    if grad is None:
        return x.new_zeros(())
    if not torch.isfinite(grad).all():
        raise NonFiniteGradient("R1 input gradient is not finite")
    return (gamma / 2.0) * grad.square().flatten(1).sum(1).mean()


# ==================== Path length ====================

@dataclass(frozen=True)
class PathLengthState:
    """Running average `a` of the generator's w-gradient norm"""
    a: float = 0.0
    decay: float = 0.99

    def as_dict(self) -> dict:
        return {"a": self.a, "decay": self.decay}


def path_length(
    gen_fn: Callable[[torch.Tensor], torch.Tensor],
    w: torch.Tensor,
    state: PathLengthState,
    directions: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, PathLengthState, torch.Tensor]:
    """
    mean (g_i - a)² with g_i = ‖J_i^T u_i‖ for random image-space directions u_i.

    Image directions are standard normal scaled by 1/sqrt(H·W). For W+ codes (B, L, Dw)
    the norm is taken per style and averaged over L before the square root.
    Returns (loss, updated state, per-sample lengths).
    """
    if not w.requires_grad:
        w = w.detach().requires_grad_(True)
    image = gen_fn(w)
    if directions is None:
        pixels = math.prod(image.shape[2:]) if image.ndim > 2 else 1
        directions = torch.randn_like(image) / math.sqrt(pixels)
    (grad,) = autograd.grad((image * directions).sum(), w, create_graph=True)
    if not torch.isfinite(grad).all():
        raise NonFiniteGradient("path-length gradient is not finite")

    if grad.ndim == 3:
        lengths = grad.square().sum(2).mean(1).sqrt()
    else:
        lengths = grad.square().flatten(1).sum(1).sqrt()
    loss = (lengths - state.a).square().mean()
    mean_length = float(lengths.detach().mean())
    updated = replace(state, a=state.decay * state.a + (1.0 - state.decay) * mean_length)
    return loss, updated, lengths.detach()


# ==================== Segmentation ====================

def _channel_dim(t: torch.Tensor) -> int:
    return 1 if t.ndim == 4 else 0


def dice_loss(
    probs: torch.Tensor,
    onehot: torch.Tensor,
    classes: Sequence[int] = FOREGROUND,
    eps: float = DICE_EPS,
) -> torch.Tensor:
    """
    -(2TP + ε)/(2TP + FP + FN + ε) from soft counts, averaged over `classes`.
    Counts pool every non-channel dimension, batch included.
    """
    dim = _channel_dim(probs)
    terms = []
    for k in classes:
        p = probs.select(dim, k)
        y = onehot.select(dim, k)
        tp = (p * y).sum()
        fp = (p * (1 - y)).sum()
        fn = ((1 - p) * y).sum()
        terms.append(-(2 * tp + eps) / (2 * tp + fp + fn + eps))
    return torch.stack(terms).mean()


def ce_loss(logits: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel negative log-softmax of the true class"""
    dim = _channel_dim(logits)
    return -(onehot * F.log_softmax(logits, dim=dim)).sum(dim).mean()


def seg_loss(logits: torch.Tensor, onehot: torch.Tensor, w_dice: float = 1.0, w_ce: float = 1.0) -> torch.Tensor:
    probs = F.softmax(logits, dim=_channel_dim(logits))
    return w_dice * dice_loss(probs, onehot) + w_ce * ce_loss(logits, onehot)


# ==================== Reconstruction ====================

class PerceptualExtractor(nn.Module):
    """Frozen, randomly initialised four-level conv pyramid (fixed seed)"""

    def __init__(self, in_channels: int, width: int = 16, seed: int = 0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        layers = []
        channels = in_channels
        for level in range(4):
            conv = nn.Conv2d(channels, width * 2 ** min(level, 2), 3, stride=1 if level == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers.append(conv)
            channels = conv.out_channels
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        features = []
        out = x
        for conv in self.layers:
            out = F.leaky_relu(conv(out), 0.2)
            features.append(out)
        return features


def unit_normalize(feature: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return feature / (feature.square().sum(dim=1, keepdim=True).sqrt() + eps)


def perceptual_distance(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    extractor: Callable[[torch.Tensor], Sequence[torch.Tensor]],
) -> torch.Tensor:
    """Sum over levels of the mean squared difference of channel-normalized features"""
    total = x.new_zeros(())
    for fx, fy in zip(extractor(x), extractor(x_hat)):
        total = total + (unit_normalize(fx) - unit_normalize(fy)).square().sum(1).mean()
    return total


def mse_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(x_hat, x)


def recon_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    perceptual_fn: Callable[[torch.Tensor], Sequence[torch.Tensor]],
    w_mse: float = 1.0,
    w_perceptual: float = 1.0,
) -> torch.Tensor:
    """MSE plus perceptual distance"""
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"reconstruction shape {tuple(x_hat.shape)} differs from input {tuple(x.shape)}")
    return w_mse * mse_loss(x, x_hat) + w_perceptual * perceptual_distance(x, x_hat, perceptual_fn)
