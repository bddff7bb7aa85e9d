"""SSM-based encoder-decoder segmentation network.

U-shape at desk scale: patch embedding, stages of VSSDG blocks (the
four-direction scan with optional local style augmentation), strided
patch-merge downsampling, nearest-neighbor upsampling with skip fusion,
and a patch-expanding head. Per-class sigmoid outputs (classes may
overlap). The local augmentation adds no parameters, so a block is
byte-identical with it on or off.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import augment_lsa, nn, ssm_core
from .autodiff import Tensor

CHECKPOINT_SCHEMA = 1


@dataclass
class NetworkConfig:
    depths: list[int] = field(default_factory=lambda: [2, 2])
    dims: list[int] = field(default_factory=lambda: [16, 32])
    n_state: int = 8
    patch_size: int = 4
    n_classes: int = 2
    in_channels: int = 3
    lsa_encoder: bool = True
    lsa_decoder: bool = True
    lsa_p: float = 0.75
    use_d_skip: bool = True

    def __post_init__(self):
        if len(self.depths) != len(self.dims):
            raise ValueError("depths and dims must have equal length")
        if any(b <= a for a, b in zip(self.dims, self.dims[1:])):
            raise ValueError("dims must be strictly increasing")
        if not 0.0 <= self.lsa_p <= 1.0:
            raise ValueError("lsa_p must be in [0,1]")

    @property
    def divisor(self) -> int:
        return self.patch_size * 2 ** (len(self.depths) - 1)


class VssdgBlock(nn.Module):
    """Pre-norm token block around the four-direction scan.

    norm -> in_proj (2x width, gate split) -> depthwise 3x3 + SiLU ->
    scan (with training-time style augmentation) -> norm -> gate ->
    out_proj -> residual.
    """

    def __init__(self, dim: int, n_state: int, rng: np.random.Generator,
                 lsa_stage: bool, use_d_skip: bool = True):
        super().__init__()
        self.dim = dim
        self.lsa_stage = lsa_stage
        self.norm1 = nn.LayerNorm(dim)
        self.in_proj = nn.Linear(dim, 2 * dim, rng)
        s = 1.0 / 3.0
        self.dw_w = nn.param(rng.uniform(-s, s, size=(dim, 3, 3)))
        self.dw_b = nn.param(np.zeros(dim))
        self.ssm = ssm_core.SsmParams(dim, n_state, rng, use_d_skip=use_d_skip)
        self.norm2 = nn.LayerNorm(dim)
        self.out_proj = nn.Linear(dim, dim, rng)

    def __call__(self, x: Tensor, training: bool, lsa_on: bool, lsa_p: float,
                 rng: np.random.Generator | None) -> Tensor:
        B, C, H, W = x.shape
        t = nn.to_tokens(x)
        h = self.norm1(t)
        h = self.in_proj(h)
        x1 = ad.narrow(h, 2, 0, C)
        z = ad.narrow(h, 2, C, C)
        m = nn.to_map(x1, H, W)
        m = ad.silu(nn.depthwise_conv3x3(m, self.dw_w, self.dw_b))
        augment = training and lsa_on and self.lsa_stage
        m = augment_lsa.lsa_block(m, self.ssm, lsa_p, rng, training=augment)
        t2 = self.norm2(nn.to_tokens(m))
        t2 = t2 * ad.silu(z)
        out = self.out_proj(t2)
        return x + nn.to_map(out, H, W)


class _Stage(nn.Module):
    def __init__(self, dim, depth, n_state, rng, lsa_stage, use_d_skip):
        super().__init__()
        self.blocks = nn.ModuleList([
            VssdgBlock(dim, n_state, rng, lsa_stage, use_d_skip)
            for _ in range(depth)])

    def __call__(self, x, training, lsa_on, lsa_p, rng):
        for blk in self.blocks:
            x = blk(x, training, lsa_on, lsa_p, rng)
        return x


class SegmentationNetwork(nn.Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        dims = cfg.dims
        p = cfg.patch_size
        self.embed = nn.Linear(cfg.in_channels * p * p, dims[0], rng)
        self.embed_norm = nn.LayerNorm(dims[0])
        self.enc_stages = nn.ModuleList([
            _Stage(dims[i], cfg.depths[i], cfg.n_state, rng, cfg.lsa_encoder,
                   cfg.use_d_skip)
            for i in range(len(dims))])
        self.down_proj = nn.ModuleList([
            nn.Linear(4 * dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)])
        self.down_norm = nn.ModuleList([
            nn.LayerNorm(dims[i + 1]) for i in range(len(dims) - 1)])
        self.dec_stages = nn.ModuleList([
            _Stage(dims[i], cfg.depths[i], cfg.n_state, rng, cfg.lsa_decoder,
                   cfg.use_d_skip)
            for i in range(len(dims))])
        self.up_proj = nn.ModuleList([
            nn.Linear(dims[i + 1], dims[i], rng) for i in range(len(dims) - 1)])
        self.fuse_proj = nn.ModuleList([
            nn.Linear(2 * dims[i], dims[i], rng) for i in range(len(dims) - 1)])
        self.fuse_norm = nn.ModuleList([
            nn.LayerNorm(dims[i]) for i in range(len(dims) - 1)])
        self.head = nn.Linear(dims[0], cfg.n_classes * p * p, rng)

    def _tok_linear(self, x: Tensor, lin: nn.Linear,
                    norm: nn.LayerNorm | None = None) -> Tensor:
        B, C, H, W = x.shape
        t = lin(nn.to_tokens(x))
        if norm is not None:
            t = norm(t)
        return nn.to_map(t, H, W)

    def forward(self, x, training: bool = False,
                rng: np.random.Generator | None = None,
                lsa: bool = True) -> Tensor:
        """Image batch [B, C, H, W] -> logits [B, n_classes, H, W]."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.cfg
        B, C, H, W = x.shape
        if C != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {C}")
        if H % cfg.divisor or W % cfg.divisor:
            raise ValueError(
                f"spatial size ({H},{W}) must be divisible by {cfg.divisor}")
        lsa_p = cfg.lsa_p

        h = nn.space_to_depth(x, cfg.patch_size)
        h = self._tok_linear(h, self.embed, self.embed_norm)
        skips = []
        n_stages = len(cfg.dims)
        for i in range(n_stages):
            h = self.enc_stages[i](h, training, lsa, lsa_p, rng)
            skips.append(h)
            if i < n_stages - 1:
                h = nn.space_to_depth(h, 2)
                h = self._tok_linear(h, self.down_proj[i], self.down_norm[i])
        for i in range(n_stages - 1, -1, -1):
            h = self.dec_stages[i](h, training, lsa, lsa_p, rng)
            if i > 0:
                h = nn.upsample_nearest2x(h)
                h = self._tok_linear(h, self.up_proj[i - 1])
                h = ad.concat([h, skips[i - 1]], axis=1)
                h = self._tok_linear(h, self.fuse_proj[i - 1], self.fuse_norm[i - 1])
        logits = self._tok_linear(h, self.head)
        return nn.depth_to_space(logits, cfg.patch_size)


def predict_masks(logits: np.ndarray) -> np.ndarray:
    """Per-class sigmoid thresholded at 0.5 (sigma(0) = 0.5 maps to 1)."""
    logits = np.asarray(logits)
    return (logits >= 0.0).astype(np.uint8)


# -- checkpoint container -----------------------------------------------


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray],
                    meta: dict | None = None):
    """Single-file archive: canonical path -> array, plus schema/meta."""
    payload = {f"param::{k}": np.ascontiguousarray(v) for k, v in arrays.items()}
    payload["__schema_version__"] = np.asarray(CHECKPOINT_SCHEMA)
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta or {}).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as z:
        version = int(z["__schema_version__"])
        if version != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {version}")
        meta = json.loads(bytes(z["__meta__"]).decode() or "{}")
        arrays = {k[len("param::"):]: z[k] for k in z.files
                  if k.startswith("param::")}
    return arrays, meta
