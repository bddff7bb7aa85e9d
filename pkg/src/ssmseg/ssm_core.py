"""Selective state-space core: discretization, the input-dependent scan,
and the four-direction 2D expansion/merge the local augmentation wraps.

The state matrix is diagonal per channel and parameterized as
A = -exp(a_log), which keeps exp(delta*A) elementwise and guarantees
|exp(delta*A)| < 1 for positive delta. Discretization is exact
zero-order hold:

    a_bar = exp(delta * a)
    b_bar = ((exp(delta * a) - 1) / a) * b_t

with a second-order Taylor branch delta*(1 + delta*a/2)*b_t once
|delta*a| < 1e-6 (the exact form of that limit; it also covers a = 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels, nn
from .autodiff import Tensor, make_op

TAYLOR_CUTOFF = 1e-6

DIRECTION_NAMES = ("row_fwd", "row_rev", "col_fwd", "col_rev")


class NumericalInstabilityError(RuntimeError):
    """Raised when the scan produces non-finite values."""


# -- discretization -----------------------------------------------------


def discretize(a: np.ndarray, b_t: np.ndarray, delta_t: np.ndarray):
    """Zero-order-hold discretization of the diagonal system.

    a: [D,N], b_t: [B,N,L], delta_t: [B,D,L] ->
    (a_bar, b_bar), both [B,D,N,L].
    """
    a = np.asarray(a, dtype=np.float64)
    b_t = np.asarray(b_t, dtype=np.float64)
    delta_t = np.asarray(delta_t, dtype=np.float64)
    for name, arr in (("a", a), ("b_t", b_t), ("delta_t", delta_t)):
        if not np.isfinite(arr).all():
            raise ValueError(f"non-finite values in {name}")
    if np.any(delta_t <= 0.0):
        raise ValueError("delta_t must be strictly positive")
    ab, kco = kernels.zoh_terms(a, delta_t)            # [B, D, L, N]
    a_bar = ab.transpose(0, 1, 3, 2)
    b_bar = kco.transpose(0, 1, 3, 2) * b_t[:, None, :, :]
    return a_bar, b_bar


# -- parameters ----------------------------------------------------------


class SsmParams(nn.Module):
    """Learnable parameters of one selective scan (shared by the four
    directions of a block).

    delta starts in [dt_min, dt_max] exactly: the delta projection weight
    is zero-initialized and the bias is the softplus-inverse of log-uniform
    draws from that range.
    """

    def __init__(self, dim: int, n_state: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 0.1,
                 use_d_skip: bool = True):
        super().__init__()
        self.dim = dim
        self.n_state = n_state
        self.use_d_skip = use_d_skip
        # S4D-real style: state n decays with rate -(n+1), per channel
        self.a_log = nn.param(np.tile(np.log(np.arange(1, n_state + 1.0)), (dim, 1)))
        self.delta_w = nn.param(np.zeros((dim, dim)))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=dim))
        self.delta_b = nn.param(np.log(np.expm1(dt)))
        s = 1.0 / np.sqrt(dim)
        self.b_w = nn.param(rng.uniform(-s, s, size=(dim, n_state)))
        self.b_b = nn.param(np.zeros(n_state))
        self.c_w = nn.param(rng.uniform(-s, s, size=(dim, n_state)))
        self.c_b = nn.param(np.zeros(n_state))
        if use_d_skip:
            self.d_skip = nn.param(np.ones(dim))
        else:
            self.d_skip = Tensor(np.zeros(dim))


# -- the scan ------------------------------------------------------------


def _scan_op(a: Tensor, bt: Tensor, ct: Tensor, dt: Tensor, u: Tensor,
             dskip: Tensor) -> Tensor:
    y, ab, kco = kernels.scan_forward_terms(a.data, bt.data, ct.data,
                                            dt.data, u.data, dskip.data)
    if not np.isfinite(y).all():
        raise NumericalInstabilityError("selective scan produced non-finite values")

    def backward(g):
        return kernels.scan_backward(a.data, bt.data, ct.data, dt.data,
                                     u.data, dskip.data, g, ab=ab, kco=kco)

    return make_op(y, (a, bt, ct, dt, u, dskip), backward)


def _token_projections(u: Tensor, params: SsmParams):
    """Per-token affine maps: delta (softplus-positive), b_t, c_t."""
    tok = ad.transpose(u, (0, 2, 1))                      # [B, L, D]
    dt_logits = ad.matmul(tok, params.delta_w) + params.delta_b
    dt = ad.transpose(ad.softplus(dt_logits), (0, 2, 1))  # [B, D, L]
    bt = ad.transpose(ad.matmul(tok, params.b_w) + params.b_b, (0, 2, 1))
    ct = ad.transpose(ad.matmul(tok, params.c_w) + params.c_b, (0, 2, 1))
    return dt, bt, ct


def selective_scan(u: Tensor, params: SsmParams) -> Tensor:
    """Input-dependent recurrence over a [B, D, L] sequence batch.

    b_t, c_t and delta_t are affine functions of the current token;
    output is c_t . h_t + d_skip * u_t with h_0 = 0.
    """
    if not np.isfinite(u.data).all():
        raise ValueError("non-finite scan input")
    dt, bt, ct = _token_projections(u, params)
    a = -ad.exp(params.a_log)
    return _scan_op(a, bt, ct, dt, u, params.d_skip)


def stack_directions(x: Tensor, perms: np.ndarray, inv_perms: np.ndarray) -> Tensor:
    """[B, *, L] -> [4B, *, L]: the four directional reorderings stacked
    along the batch axis (direction-major)."""
    out = np.concatenate([x.data[..., p] for p in perms], axis=0)
    b = x.shape[0]

    def backward(g):
        total = None
        for k in range(len(perms)):
            gk = g[k * b:(k + 1) * b][..., inv_perms[k]]
            total = gk if total is None else total + gk
        return (total,)

    return make_op(out, (x,), backward)


def merge_stacked(y: Tensor, b: int, perms: np.ndarray,
                  inv_perms: np.ndarray) -> Tensor:
    """Adjoint of stack_directions: inverse-permute each direction block
    back to native order and sum. [4B, *, L] -> [B, *, L]."""
    total = None
    for k in range(len(perms)):
        gk = y.data[k * b:(k + 1) * b][..., inv_perms[k]]
        total = gk if total is None else total + gk

    def backward(g):
        return (np.concatenate([g[..., p] for p in perms], axis=0),)

    return make_op(total, (y,), backward)


def selective_scan_4dir(u_native: Tensor, params: SsmParams,
                        perms: np.ndarray, inv_perms: np.ndarray) -> Tensor:
    """Scan all four directional reorderings of a native [B, D, L] batch
    in one stacked kernel call, returning [4B, D, L] (direction-major).

    Token projections commute with reorderings along L, so they are
    computed once on the native sequence and permuted afterwards."""
    if not np.isfinite(u_native.data).all():
        raise ValueError("non-finite scan input")
    dt, bt, ct = _token_projections(u_native, params)
    dt4 = stack_directions(dt, perms, inv_perms)
    bt4 = stack_directions(bt, perms, inv_perms)
    ct4 = stack_directions(ct, perms, inv_perms)
    u4 = stack_directions(u_native, perms, inv_perms)
    a = -ad.exp(params.a_log)
    return _scan_op(a, bt4, ct4, dt4, u4, params.d_skip)


def global_conv_kernel(a: np.ndarray, b: np.ndarray, c: np.ndarray,
                       delta: np.ndarray, L: int) -> np.ndarray:
    """Impulse-response taps (C B_bar, C A_bar B_bar, ..., C A_bar^{L-1} B_bar)
    of the time-invariant system, per channel: a [D,N], b [N], c [N],
    delta [D] -> [D, L]. Test-only pathway for the recurrence/convolution
    equivalence; assumes d_skip = 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    D, N = a.shape
    a_bar, b_bar = discretize(a, b[None, :, None], delta[None, :, None])
    a_bar = a_bar[0, :, :, 0]                              # [D, N]
    b_bar = b_bar[0, :, :, 0]
    kbar = np.empty((D, L))
    pw = np.ones_like(a_bar)                               # a_bar^l
    for l in range(L):
        kbar[:, l] = (c[None, :] * pw * b_bar).sum(axis=1)
        pw = pw * a_bar
    return kbar


def apply_global_conv(u: np.ndarray, kbar: np.ndarray) -> np.ndarray:
    """Causal per-channel convolution of u [B,D,L] with taps [D,L]."""
    B, D, L = u.shape
    y = np.empty_like(u)
    for bi in range(B):
        for d in range(D):
            y[bi, d] = np.convolve(u[bi, d], kbar[d])[:L]
    return y


# -- four-direction 2D scan ------------------------------------------------


def direction_perms(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Permutations taking the native row-major flattening to each of the
    four traversal orders, plus their inverses. Returns (perms, inv_perms),
    each [4, h*w]."""
    native = np.arange(h * w)
    col = native.reshape(h, w).T.ravel()
    perms = np.stack([native, native[::-1], col, col[::-1]])
    inv = np.stack([np.argsort(p) for p in perms])
    return perms, inv


@dataclass
class DirectionalBundle:
    """The four directional views of one [B, D, H, W] feature map."""
    seqs: list[Tensor]
    h: int
    w: int
    perms: np.ndarray = field(repr=False)
    inv_perms: np.ndarray = field(repr=False)
    layouts: tuple[str, ...] = DIRECTION_NAMES


def scan_expand(x: Tensor) -> DirectionalBundle:
    """Flatten a [B, D, H, W] map into four directional [B, D, L] sequences."""
    B, D, H, W = x.shape
    perms, inv = direction_perms(H, W)
    native = ad.reshape(x, (B, D, H * W))
    seqs = [ad.permute_l(native, perms[k], inv[k]) for k in range(4)]
    return DirectionalBundle(seqs=seqs, h=H, w=W, perms=perms, inv_perms=inv)


def scan_merge(bundle: DirectionalBundle, h: int, w: int) -> Tensor:
    """Inverse-permute each directional sequence to native order and sum."""
    L = h * w
    for k, s in enumerate(bundle.seqs):
        if s.shape[-1] != L:
            raise ValueError(
                f"direction {bundle.layouts[k]} has length {s.shape[-1]}, expected {L}")
    total = None
    for k, s in enumerate(bundle.seqs):
        native = ad.permute_l(s, bundle.inv_perms[k], bundle.perms[k])
        total = native if total is None else total + native
    B, D = total.shape[0], total.shape[1]
    return ad.reshape(total, (B, D, h, w))
