"""Local sequence-wise style transformation augmentation.

Training-time only: per scan direction, channel statistics of the
post-scan sequence are perturbed by batch-level uncertainty draws and
the restyled sequence replaces the original over one random contiguous
token window (wrap-around). Introduces no learnable parameters and is
skipped entirely at inference.

Statistics use population variance (divide by L, and by B at the batch
level); the channel sigma carries the stabilizer inside the square root
while the batch-level deviations are exact (zero for B = 1) with a
gradient-capped square root.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ssm_core
from .autodiff import Tensor

EPS_STABILITY = 1e-6


@dataclass
class SequenceStats:
    mu: Tensor        # [B, D]
    sigma: Tensor     # [B, D], >= sqrt(eps_stability)
    eps_stability: float = EPS_STABILITY


@dataclass
class StatUncertainty:
    sigma_mu: Tensor     # [D]
    sigma_sigma: Tensor  # [D]


@dataclass
class SubSequenceMask:
    mask: np.ndarray     # [1, L] binary
    p: float
    j_start: int         # 1-based start index


def channel_stats(f: Tensor, eps: float = EPS_STABILITY) -> SequenceStats:
    """Per-instance, per-channel mean and std over the sequence axis of
    [B, D, L]."""
    mu = ad.mean(f, axis=2)
    centered = f - ad.expand_dims(mu, 2)
    var = ad.mean(centered * centered, axis=2)
    sigma = ad.sqrt(var + eps)
    return SequenceStats(mu=mu, sigma=sigma, eps_stability=eps)


def _grouped_deviation(x: Tensor, groups: int) -> Tensor:
    """Population std over the batch axis of [G*B, D], computed per group
    of B consecutive rows -> [G, 1, D] (broadcastable over the group)."""
    gb, d = x.shape
    xr = ad.reshape(x, (groups, gb // groups, d))
    m = ad.mean(xr, axis=1, keepdims=True)
    c = xr - m
    return ad.safe_sqrt(ad.mean(c * c, axis=1, keepdims=True))


def batch_uncertainty(stats: SequenceStats) -> StatUncertainty:
    """Batch-level standard deviation of the per-instance statistics,
    per channel. Exactly zero for a single-instance batch."""
    d = stats.mu.shape[1]
    return StatUncertainty(
        sigma_mu=ad.reshape(_grouped_deviation(stats.mu, 1), (d,)),
        sigma_sigma=ad.reshape(_grouped_deviation(stats.sigma, 1), (d,)))


def resample_stats(stats: SequenceStats, unc: StatUncertainty,
                   eps_mu: np.ndarray, eps_sigma: np.ndarray):
    """Gaussian reparameterization of the statistics. The standard-normal
    draws are supplied by the caller (shape [B, D]) so tests can pin them.
    Returns (beta, gamma); gamma is floored at sqrt(eps_stability)."""
    beta = stats.mu + Tensor(eps_mu) * unc.sigma_mu
    gamma = stats.sigma + Tensor(eps_sigma) * unc.sigma_sigma
    gamma = ad.clip(gamma, np.sqrt(stats.eps_stability), None)
    return beta, gamma


def style_transform(f: Tensor, stats: SequenceStats, beta: Tensor,
                    gamma: Tensor) -> Tensor:
    """Re-statistic the sequence: beta + (f - mu)/sigma * gamma."""
    mu = ad.expand_dims(stats.mu, 2)
    sigma = ad.expand_dims(stats.sigma, 2)
    return ad.expand_dims(beta, 2) + (f - mu) / sigma * ad.expand_dims(gamma, 2)


def sequence_mask(L: int, p: float, j_start: int) -> SubSequenceMask:
    """Contiguous wrap-around window of round(p*L) ones (ties round up)
    starting at 1-based position j_start."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0,1], got {p}")
    if not 1 <= j_start <= L:
        raise ValueError(f"j_start must be in [1,{L}], got {j_start}")
    n_ones = int(np.floor(p * L + 0.5))
    mask = np.zeros((1, L))
    idx = (j_start - 1 + np.arange(n_ones)) % L
    mask[0, idx] = 1.0
    return SubSequenceMask(mask=mask, p=p, j_start=j_start)


def lsa_mixup(f: Tensor, f_aug: Tensor, masks: np.ndarray) -> Tensor:
    """Blend per instance: augmented tokens inside the window, original
    tokens outside. masks: [B, 1, L] binary, broadcast over channels."""
    if masks.shape[0] != f.shape[0] or masks.shape[-1] != f.shape[-1]:
        raise ValueError(f"mask shape {masks.shape} incompatible with {f.shape}")
    m = Tensor(masks)
    return f_aug * m + f * (1.0 - m)


def _augment_sequence(seq: Tensor, p: float, rng: np.random.Generator,
                      groups: int = 1) -> Tensor:
    """Style-perturb a [G*B, D, L] batch; batch-level uncertainty is
    estimated within each group of B consecutive rows, so a stacked
    multi-direction batch keeps exact per-direction statistics."""
    gb, d, L = seq.shape
    b = gb // groups
    stats = channel_stats(seq)
    dev_mu = _grouped_deviation(stats.mu, groups)
    dev_sigma = _grouped_deviation(stats.sigma, groups)
    eps_mu = rng.standard_normal((groups, b, d))
    eps_sigma = rng.standard_normal((groups, b, d))
    mu_r = ad.reshape(stats.mu, (groups, b, d))
    sg_r = ad.reshape(stats.sigma, (groups, b, d))
    beta = ad.reshape(mu_r + Tensor(eps_mu) * dev_mu, (gb, d))
    gamma = ad.reshape(sg_r + Tensor(eps_sigma) * dev_sigma, (gb, d))
    gamma = ad.clip(gamma, np.sqrt(stats.eps_stability), None)
    f_aug = style_transform(seq, stats, beta, gamma)
    starts = rng.integers(1, L + 1, size=gb)
    masks = np.stack([sequence_mask(L, p, int(j)).mask for j in starts])
    return lsa_mixup(seq, f_aug, masks)


def _stacked_lsa(x: Tensor, params: ssm_core.SsmParams, p: float,
                 rng: np.random.Generator | None, training: bool):
    """Scan the four directions in one stacked batch and (in training)
    restyle each direction independently. Returns the stacked [4B, D, L]
    output plus the bookkeeping needed to merge."""
    B, D, H, W = x.shape
    perms, inv = ssm_core.direction_perms(H, W)
    native = ad.reshape(x, (B, D, H * W))
    y4 = ssm_core.selective_scan_4dir(native, params, perms, inv)
    if training:
        if rng is None:
            raise ValueError("training-mode lsa_block needs an rng")
        y4 = _augment_sequence(y4, p, rng, groups=4)
    return y4, B, perms, inv


def lsa_direction_outputs(x: Tensor, params: ssm_core.SsmParams, p: float,
                          rng: np.random.Generator | None,
                          training: bool) -> list[Tensor]:
    """Pre-merge per-direction sequences (row fwd/rev, col fwd/rev)."""
    y4, B, _, _ = _stacked_lsa(x, params, p, rng, training)
    return [ad.narrow(y4, 0, k * B, B) for k in range(4)]


def lsa_block(x: Tensor, params: ssm_core.SsmParams, p: float,
              rng: np.random.Generator | None, training: bool) -> Tensor:
    """Four-direction scan with per-direction style augmentation.

    expand -> selective scan per direction -> (training only) restyle a
    random sub-sequence with fresh draws and a unique mask per direction
    and instance -> merge. With training=False this is the plain
    expand/scan/merge pathway.
    """
    B, D, H, W = x.shape
    y4, _, perms, inv = _stacked_lsa(x, params, p, rng, training)
    merged = ssm_core.merge_stacked(y4, B, perms, inv)
    return ad.reshape(merged, (B, D, H, W))
