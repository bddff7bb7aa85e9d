"""Layer primitives on top of the autodiff engine.

Holds the parameter-registry Module base plus the layers the network is
assembled from: Linear, LayerNorm, small stride-1 convolutions (shift
based, which is fast enough at desk scale), and the exact reshaping ops
used for patch embedding / merging / expansion.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_op


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Tracks parameters and submodules by attribute assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, mod in self._modules.items():
            out.update(mod.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def n_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))

    def zero_grads(self):
        for p in self.parameters():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in params.items():
            if p.data.shape != arrays[k].shape:
                raise ValueError(f"shape mismatch for {k}: {p.data.shape} vs {arrays[k].shape}")
            p.data = np.ascontiguousarray(arrays[k], dtype=np.float64)


class ModuleList(Module):
    def __init__(self, mods):
        super().__init__()
        self._list = list(mods)
        for i, m in enumerate(self._list):
            self._modules[str(i)] = m

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 zero_init: bool = False):
        super().__init__()
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            s = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-s, s, size=(n_in, n_out))
        self.w = param(w)
        self.b = param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.w = param(np.ones(dim))
        self.b = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.w, self.b, self.eps)


def layer_norm(x: Tensor, w: Tensor, b: Tensor, eps: float) -> Tensor:
    """Normalization over the last axis, fused into one graph node."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = xn * w.data + b.data

    def backward(g):
        gxn = g * w.data
        m1 = gxn.mean(axis=-1, keepdims=True)
        m2 = (gxn * xn).mean(axis=-1, keepdims=True)
        gx = inv * (gxn - m1 - xn * m2)
        dims = tuple(range(g.ndim - 1))
        return gx, (g * xn).sum(axis=dims), g.sum(axis=dims)

    return make_op(out, (x, w, b), backward)


# -- spatial ops (feature maps are [B, C, H, W]) ---------------------------


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Dense 3x3 convolution, stride 1, zero padding 1 (shift form)."""
    B, C, H, W = x.shape
    O = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((B, O, H, W))
    for i in range(3):
        for j in range(3):
            out += np.einsum("oc,bchw->bohw", w.data[:, :, i, j],
                             xp[:, :, i:i + H, j:j + W])
    out += b.data[None, :, None, None]

    def backward(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                win = xp[:, :, i:i + H, j:j + W]
                gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, win)
                gxp[:, :, i:i + H, j:j + W] += np.einsum(
                    "oc,bohw->bchw", w.data[:, :, i, j], g)
        gx = gxp[:, :, 1:-1, 1:-1]
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return make_op(out, (x, w, b), backward)


def depthwise_conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel 3x3 convolution, stride 1, zero padding 1."""
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((B, C, H, W))
    for i in range(3):
        for j in range(3):
            out += w.data[None, :, i, j, None, None] * xp[:, :, i:i + H, j:j + W]
    out += b.data[None, :, None, None]

    def backward(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                win = xp[:, :, i:i + H, j:j + W]
                gw[:, i, j] = np.einsum("bchw,bchw->c", g, win)
                gxp[:, :, i:i + H, j:j + W] += w.data[None, :, i, j, None, None] * g
        return gxp[:, :, 1:-1, 1:-1], gw, g.sum(axis=(0, 2, 3))

    return make_op(out, (x, w, b), backward)


def space_to_depth(x: Tensor, p: int) -> Tensor:
    """[B,C,H,W] -> [B,C*p*p,H/p,W/p]; exact inverse used in backward."""
    B, C, H, W = x.shape
    if H % p or W % p:
        raise ValueError(f"spatial size ({H},{W}) not divisible by {p}")
    hh, ww = H // p, W // p
    out = (x.data.reshape(B, C, hh, p, ww, p)
           .transpose(0, 1, 3, 5, 2, 4).reshape(B, C * p * p, hh, ww))

    def backward(g):
        return (g.reshape(B, C, p, p, hh, ww)
                .transpose(0, 1, 4, 2, 5, 3).reshape(B, C, H, W),)

    return make_op(np.ascontiguousarray(out), (x,), backward)


def depth_to_space(x: Tensor, p: int) -> Tensor:
    """[B,K*p*p,H,W] -> [B,K,H*p,W*p]."""
    B, Cpp, H, W = x.shape
    K = Cpp // (p * p)
    if K * p * p != Cpp:
        raise ValueError(f"channel count {Cpp} not divisible by {p * p}")
    out = (x.data.reshape(B, K, p, p, H, W)
           .transpose(0, 1, 4, 2, 5, 3).reshape(B, K, H * p, W * p))

    def backward(g):
        return (g.reshape(B, K, H, p, W, p)
                .transpose(0, 1, 3, 5, 2, 4).reshape(B, Cpp, H, W),)

    return make_op(np.ascontiguousarray(out), (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return make_op(out, (x,), backward)


def to_tokens(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B, H*W, C] (row-major token order)."""
    B, C, H, W = x.shape
    return ad.transpose(ad.reshape(x, (B, C, H * W)), (0, 2, 1))


def to_map(x: Tensor, h: int, w: int) -> Tensor:
    """[B, L, C] -> [B, C, h, w]."""
    B, L, C = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1)), (B, C, h, w))


def global_grad_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    return float(np.sqrt(sq))
