"""Fast invariant suite behind the `self-test` command.

Each check is named, independent, and quick; the whole suite stays well
under a minute. Failures report the failing invariant by name.
"""

from __future__ import annotations

import time

import numpy as np

from . import augment_gva, augment_lsa, metrics, ssm_core
from .autodiff import Tensor


class _ZeroDraws:
    """Generator stub whose normal draws are all zero (masks still vary)."""

    def __init__(self, seed=0):
        self._rng = np.random.default_rng(seed)

    def standard_normal(self, size):
        return np.zeros(size)

    def integers(self, *args, **kwargs):
        return self._rng.integers(*args, **kwargs)


def check_recurrence_convolution_equivalence():
    rng = np.random.default_rng(7)
    for _ in range(5):
        D = int(rng.integers(1, 5))
        N = int(rng.integers(1, 5))
        L = int(rng.integers(2, 33))
        a = -np.exp(rng.standard_normal((D, N)))
        b = rng.standard_normal(N)
        c = rng.standard_normal(N)
        delta = np.exp(rng.uniform(-3, -1, D))
        u = rng.standard_normal((2, D, L))
        kbar = ssm_core.global_conv_kernel(a, b, c, delta, L)
        y_conv = ssm_core.apply_global_conv(u, kbar)
        from . import kernels
        bt = np.broadcast_to(b[None, :, None], (2, N, L)).copy()
        ct = np.broadcast_to(c[None, :, None], (2, N, L)).copy()
        dt = np.broadcast_to(delta[None, :, None], (2, D, L)).copy()
        y_scan = kernels.scan_forward(a, bt, ct, dt, u, np.zeros(D))
        rel = np.abs(y_scan - y_conv).max() / max(np.abs(y_conv).max(), 1e-12)
        assert rel <= 1e-5, f"recurrence/convolution relative error {rel:.2e}"


def check_lsa_identity_zero_noise():
    rng = np.random.default_rng(3)
    params = ssm_core.SsmParams(4, 3, rng)
    x = Tensor(rng.standard_normal((2, 4, 4, 4)))
    ref = augment_lsa.lsa_block(x, params, 0.75, None, training=False)
    out = augment_lsa.lsa_block(x, params, 0.75, _ZeroDraws(), training=True)
    rel = np.abs(out.data - ref.data).max() / max(np.abs(ref.data).max(), 1e-12)
    assert rel <= 1e-12, f"zero-noise identity violated: {rel:.2e}"


def check_mask_cardinality():
    for L in (1, 4, 7, 64):
        for p in (0.0, 0.25, 0.5, 0.75, 1.0):
            for j in range(1, L + 1):
                m = augment_lsa.sequence_mask(L, p, j)
                want = int(np.floor(p * L + 0.5))
                got = int(m.mask.sum())
                assert got == want, f"mask(L={L}, p={p}, j={j}): {got} != {want}"


def check_gva_gating():
    rng = np.random.default_rng(5)
    net = augment_gva.EnhancementNet(rng)
    n_params = net.n_parameters()
    assert 200 <= n_params <= 300, f"enhancement net has {n_params} params"
    x = np.clip(rng.standard_normal((4, 3, 16, 16)) * 0.2, -1, 1)
    x[0] += 0.8   # bright instance, gate must stay closed
    x = np.clip(x, -1, 1)
    out = augment_gva.gva_forward(Tensor(x), net, tau=0.4, training=True)
    bright = augment_gva.mean_brightness(x) >= 0.4
    for i in np.where(bright)[0]:
        assert np.array_equal(out.data[i], x[i]), f"gated-off row {i} changed"
    # zero-initialized output layer: identity before any step
    y = augment_gva.enhance(Tensor(x), net)
    assert np.array_equal(y.data, x), "enhancement net is not identity at init"


def check_metric_oracles():
    rng = np.random.default_rng(11)
    for _ in range(10):
        a = rng.random((12, 12)) > 0.6
        b = rng.random((12, 12)) > 0.6
        got = metrics.dice_coefficient(a, b)
        inter = np.logical_and(a, b).sum()
        want = 1.0 if a.sum() + b.sum() == 0 else 2 * inter / (a.sum() + b.sum())
        assert abs(got - want) < 1e-15, "dice oracle mismatch"
        if a.any() and b.any():
            got_asd = metrics.average_surface_distance(a, b)
            pa = metrics.boundary_points(a)
            pb = metrics.boundary_points(b)
            d_ab = [min(np.hypot(*(p - q)) for q in pb) for p in pa]
            d_ba = [min(np.hypot(*(q - p)) for p in pa) for q in pb]
            want_asd = (sum(d_ab) + sum(d_ba)) / (len(pa) + len(pb))
            assert abs(got_asd - want_asd) < 1e-12, "asd oracle mismatch"


CHECKS = [
    ("recurrence_convolution_equivalence", check_recurrence_convolution_equivalence),
    ("lsa_identity_zero_noise", check_lsa_identity_zero_noise),
    ("mask_cardinality", check_mask_cardinality),
    ("gva_gating", check_gva_gating),
    ("metric_oracles", check_metric_oracles),
]


def self_test(verbose: bool = True) -> int:
    """Run every invariant; 0 if all pass, else 2 with the failure named."""
    failures = []
    for name, fn in CHECKS:
        t0 = time.time()
        try:
            fn()
            status = "PASS"
        except AssertionError as exc:
            status = f"FAIL ({exc})"
            failures.append(name)
        except Exception as exc:  # noqa: BLE001 - report, do not crash the suite
            status = f"ERROR ({type(exc).__name__}: {exc})"
            failures.append(name)
        if verbose:
            print(f"[self-test] {name}: {status} [{time.time() - t0:.2f}s]")
    if failures:
        if verbose:
            print(f"[self-test] FAILED invariants: {', '.join(failures)}")
        return 2
    if verbose:
        print("[self-test] all invariants passed")
    return 0
