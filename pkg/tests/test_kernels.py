"""Backend parity: the jitted path and the pure-numpy fallback must agree
to rounding on forward values and every gradient."""

import numpy as np
import pytest

from ssmseg import kernels


def random_system(seed, B=3, D=5, N=4, L=17):
    rng = np.random.default_rng(seed)
    return dict(
        a=-np.exp(rng.standard_normal((D, N)) * 0.5),
        bt=rng.standard_normal((B, N, L)),
        ct=rng.standard_normal((B, N, L)),
        dt=np.exp(rng.standard_normal((B, D, L)) * 0.3 - 2.0),
        u=rng.standard_normal((B, D, L)),
        dskip=rng.standard_normal(D),
    )


def numpy_forward(sys):
    ab, kco = kernels.zoh_terms(sys["a"], sys["dt"])
    return kernels._recur_fwd_numpy(ab, kco, sys["bt"], sys["ct"], sys["u"],
                                    sys["dskip"])


def numpy_backward(sys, gy):
    ab, kco = kernels.zoh_terms(sys["a"], sys["dt"])
    dk_ddt, dk_da = kernels._zoh_derivatives(sys["a"], sys["dt"], ab)
    return kernels._recur_bwd_numpy(ab, kco, sys["bt"], sys["ct"], sys["dt"],
                                    sys["u"], sys["dskip"], dk_ddt, dk_da,
                                    sys["a"], gy)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_parity(seed):
    sys = random_system(seed)
    y = kernels.scan_forward(**sys)
    y_ref = numpy_forward(sys)
    assert np.abs(y - y_ref).max() < 1e-12


@pytest.mark.parametrize("seed", [0, 1])
def test_backward_parity(seed):
    sys = random_system(seed)
    gy = np.random.default_rng(seed + 100).standard_normal(sys["u"].shape)
    got = kernels.scan_backward(**sys, gy=gy)
    want = numpy_backward(sys, gy)
    for g, w in zip(got, want):
        assert np.abs(g - w).max() < 1e-11


def test_forward_terms_match_plain_forward():
    sys = random_system(3)
    y1 = kernels.scan_forward(**sys)
    y2, ab, kco = kernels.scan_forward_terms(**sys)
    assert np.array_equal(y1, y2)
    ab_ref, kco_ref = kernels.zoh_terms(sys["a"], sys["dt"])
    assert np.abs(ab - ab_ref).max() < 1e-14
    assert np.abs(kco - kco_ref).max() < 1e-14


def test_backward_with_and_without_saved_terms():
    sys = random_system(4)
    gy = np.random.default_rng(9).standard_normal(sys["u"].shape)
    _, ab, kco = kernels.scan_forward_terms(**sys)
    g1 = kernels.scan_backward(**sys, gy=gy, ab=ab, kco=kco)
    g2 = kernels.scan_backward(**sys, gy=gy)
    for a, b in zip(g1, g2):
        assert np.abs(a - b).max() < 1e-12


def test_kernel_gradients_vs_fd():
    sys = random_system(5, B=2, D=3, N=2, L=9)
    gy = np.random.default_rng(11).standard_normal(sys["u"].shape)
    grads = dict(zip(["a", "bt", "ct", "dt", "u", "dskip"],
                     kernels.scan_backward(**sys, gy=gy)))
    rng = np.random.default_rng(12)
    eps = 1e-6
    worst = 0.0
    for name in grads:
        arr = sys[name]
        for _ in range(20):
            idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
            orig = arr[idx]
            arr[idx] = orig + eps
            fp = float((kernels.scan_forward(**sys) * gy).sum())
            arr[idx] = orig - eps
            fm = float((kernels.scan_forward(**sys) * gy).sum())
            arr[idx] = orig
            fd = (fp - fm) / (2 * eps)
            an = grads[name][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    assert worst <= 1e-4


def test_backend_selection_reported():
    assert kernels.BACKEND in ("numba", "numpy")
