"""Global appearance variation augmentation.

A brightness-gated residual enhancement network perturbs whole-image
appearance during training and is discarded at inference. Images live in
[-1, 1]; the brightness threshold tau is defined on [0, 1], so the gate
compares against mean((x+1)/2). The enhancement net is three 3x3
convolutions at 3 channels (252 learnable scalars) with a zero-initialized
output layer, making it exactly the identity before the first optimizer
step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass
class GvaConfig:
    tau: float = 0.4          # 0.4 fundus-style, 0.03 prostate-style
    n_blocks: int = 1         # middle conv blocks in the enhancement net
    channels: int = 3

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0,1), got {self.tau}")


def mean_brightness(x: Tensor | np.ndarray) -> np.ndarray:
    """Per-instance mean intensity on the [0,1] scale of a [-1,1] batch."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return ((data + 1.0) * 0.5).mean(axis=(1, 2, 3))


def gate_mask(brightness: np.ndarray, tau: float) -> np.ndarray:
    """1.0 where an instance is strictly darker than tau, else 0.0. [B, 1]."""
    return (brightness < tau).astype(np.float64)[:, None]


class EnhancementNet(nn.Module):
    """Residual conv stack: x + R(x), clamped back to [-1, 1].

    conv_in and the enhancement blocks are 3->3 channel 3x3 convs with a
    ReLU between; conv_out is zero-initialized so the net starts as the
    identity. Parameter count: (n_blocks + 2) * (81 + 3) = 252 at the
    default depth.
    """

    def __init__(self, rng: np.random.Generator, cfg: GvaConfig | None = None):
        super().__init__()
        cfg = cfg or GvaConfig()
        c = cfg.channels
        s = 1.0 / np.sqrt(c * 9)

        def conv_param(zero=False):
            w = np.zeros((c, c, 3, 3)) if zero else rng.uniform(-s, s, (c, c, 3, 3))
            return nn.param(w), nn.param(np.zeros(c))

        self.w_in, self.b_in = conv_param()
        self.n_blocks = cfg.n_blocks
        for i in range(cfg.n_blocks):
            w, b = conv_param()
            setattr(self, f"w_blk{i}", w)
            setattr(self, f"b_blk{i}", b)
        self.w_out, self.b_out = conv_param(zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(nn.conv3x3(x, self.w_in, self.b_in))
        for i in range(self.n_blocks):
            h = ad.relu(nn.conv3x3(h, getattr(self, f"w_blk{i}"), getattr(self, f"b_blk{i}")))
        r = nn.conv3x3(h, self.w_out, self.b_out)
        return ad.clip(x + r, -1.0, 1.0)


def enhance(x: Tensor, net: EnhancementNet) -> Tensor:
    """Apply the enhancement network, replicating grayscale inputs to three
    channels (and averaging back) so one architecture serves all inputs."""
    if x.shape[1] == 3:
        return net(x)
    if x.shape[1] == 1:
        x3 = ad.concat([x, x, x], axis=1)
        y3 = net(x3)
        return ad.mean(y3, axis=1, keepdims=True)
    raise ValueError(f"expected 1 or 3 channels, got {x.shape[1]}")


def gva_forward(x: Tensor, net: EnhancementNet, tau: float,
                training: bool) -> Tensor:
    """Training: enhanced image for instances darker than tau, passthrough
    otherwise (bitwise). Inference: passthrough always."""
    if not training:
        return x
    m = gate_mask(mean_brightness(x), tau)
    if not m.any():
        return x
    y = enhance(x, net)
    mt = Tensor(m[:, :, None, None])
    return y * mt + x * (1.0 - mt)
