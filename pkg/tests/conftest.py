import numpy as np
import pytest

from ssmseg import kernels
from ssmseg.autodiff import Tensor


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    kernels.warmup()


def fd_check(build, leaves: dict[str, Tensor], n_coords: int = 100,
             eps: float = 1e-5, rtol: float = 1e-4, seed: int = 0) -> float:
    """Compare analytic gradients of the scalar build() against central
    finite differences at randomly chosen coordinates of the leaves.

    build() must reconstruct the graph from the leaves' current .data.
    Returns the worst relative error seen (and asserts it <= rtol)."""
    rng = np.random.default_rng(seed)
    out = build()
    for t in leaves.values():
        t.grad = None
    out.backward()
    grads = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
             for k, t in leaves.items()}
    names = sorted(leaves)
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.integers(0, len(names))]
        t = leaves[name]
        idx = tuple(int(rng.integers(0, s)) for s in t.data.shape)
        orig = t.data[idx]
        t.data[idx] = orig + eps
        fp = build().item()
        t.data[idx] = orig - eps
        fm = build().item()
        t.data[idx] = orig
        fd = (fp - fm) / (2.0 * eps)
        an = grads[name][idx]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        worst = max(worst, rel)
    assert worst <= rtol, f"worst FD relative error {worst:.2e} > {rtol:g}"
    return worst


def rand_weight(t: Tensor, seed: int) -> np.ndarray:
    """Fixed random projection to turn a tensor-valued op into a scalar."""
    return np.random.default_rng(seed).standard_normal(t.shape)
