import numpy as np
import pytest

from ssmseg import augment_gva as gva
from ssmseg import autodiff as ad
from ssmseg.autodiff import Tensor

from conftest import fd_check


def make_net(seed=0, **cfg):
    return gva.EnhancementNet(np.random.default_rng(seed),
                              gva.GvaConfig(**cfg) if cfg else None)


class TestBrightness:
    def test_constant_extremes(self):
        assert gva.mean_brightness(np.ones((1, 3, 4, 4)))[0] == pytest.approx(1.0)
        assert gva.mean_brightness(-np.ones((1, 3, 4, 4)))[0] == pytest.approx(0.0)

    def test_half_half(self):
        x = -np.ones((1, 3, 2, 2))
        x[:, :, :, 1] = 1.0
        assert gva.mean_brightness(x)[0] == pytest.approx(0.5)


class TestGateMask:
    def test_below_threshold_opens(self):
        assert gva.gate_mask(np.array([0.2]), 0.4)[0, 0] == 1.0

    def test_boundary_excluded(self):
        assert gva.gate_mask(np.array([0.4]), 0.4)[0, 0] == 0.0

    def test_per_instance(self):
        m = gva.gate_mask(np.array([0.1, 0.9]), 0.4)
        assert np.array_equal(m[:, 0], [1.0, 0.0])


class TestEnhancementNet:
    def test_identity_at_initialization(self):
        net = make_net()
        rng = np.random.default_rng(1)
        x = np.clip(rng.standard_normal((2, 3, 8, 8)), -1, 1)
        y = gva.enhance(Tensor(x), net)
        assert np.array_equal(y.data, x)

    def test_shape_preserved(self):
        net = make_net()
        x = Tensor(np.zeros((3, 3, 16, 12)))
        assert gva.enhance(x, net).shape == (3, 3, 16, 12)

    def test_parameter_budget(self):
        assert 200 <= make_net().n_parameters() <= 300
        assert make_net().n_parameters() == 252

    def test_range_preserved_after_training_drift(self):
        net = make_net(2)
        rng = np.random.default_rng(3)
        for p in net.parameters():
            p.data = p.data + rng.standard_normal(p.data.shape) * 0.5
        x = np.clip(rng.standard_normal((2, 3, 8, 8)), -1, 1)
        y = gva.enhance(Tensor(x), net)
        assert y.data.min() >= -1.0 and y.data.max() <= 1.0

    def test_grayscale_replication(self):
        net = make_net()
        x = Tensor(np.clip(np.random.default_rng(4).standard_normal((2, 1, 8, 8)), -1, 1))
        y = gva.enhance(x, net)
        assert y.shape == (2, 1, 8, 8)
        assert np.allclose(y.data, x.data)  # identity at init
        with pytest.raises(ValueError):
            gva.enhance(Tensor(np.zeros((1, 2, 4, 4))), net)

    def test_gradients(self):
        net = make_net(5)
        rng = np.random.default_rng(6)
        for p in net.parameters():
            p.data = p.data + rng.standard_normal(p.data.shape) * 0.1
        x = Tensor(np.clip(rng.standard_normal((1, 3, 6, 6)) * 0.4, -0.9, 0.9),
                   requires_grad=True)
        w = rng.standard_normal((1, 3, 6, 6))

        def build():
            return ad.sum(net(x) * w)

        leaves = {"x": x, "w_in": net.w_in, "w_out": net.w_out, "b_out": net.b_out}
        fd_check(build, leaves, n_coords=60)


class TestGvaForward:
    def test_inference_passthrough(self):
        net = make_net()
        x = np.clip(np.random.default_rng(0).standard_normal((2, 3, 8, 8)), -1, 1)
        out = gva.gva_forward(Tensor(x), net, tau=0.9, training=False)
        assert out.data is x or np.array_equal(out.data, x)

    def test_fully_closed_gate_bitwise(self):
        net = make_net(1)
        # perturb so the net is not identity, then gate everything off
        for p in net.parameters():
            p.data = p.data + 0.3
        x = np.clip(np.random.default_rng(2).standard_normal((2, 3, 8, 8)) + 1.5,
                    -1, 1)  # bright batch
        assert np.all(gva.mean_brightness(x) >= 0.4)
        out = gva.gva_forward(Tensor(x), net, tau=0.4, training=True)
        assert np.array_equal(out.data, x)

    def test_mixed_batch_rowwise(self):
        net = make_net(3)
        for p in net.parameters():
            p.data = p.data + 0.2
        rng = np.random.default_rng(4)
        dark = np.clip(rng.standard_normal((1, 3, 8, 8)) * 0.1 - 0.8, -1, 1)
        bright = np.clip(rng.standard_normal((1, 3, 8, 8)) * 0.1 + 0.8, -1, 1)
        x = np.concatenate([dark, bright])
        out = gva.gva_forward(Tensor(x), net, tau=0.4, training=True)
        phi = gva.enhance(Tensor(x), net)
        assert np.array_equal(out.data[0], phi.data[0])    # gated row
        assert np.array_equal(out.data[1], x[1])           # passthrough row
        assert not np.array_equal(out.data[0], x[0])

    def test_gradients_reach_phi_only_through_gated(self):
        net = make_net(5)
        rng = np.random.default_rng(6)
        bright = np.clip(rng.standard_normal((2, 3, 6, 6)) * 0.1 + 0.8, -1, 1)
        out = gva.gva_forward(Tensor(bright), net, tau=0.4, training=True)
        ad.sum(out * 1.0).backward()
        assert all(p.grad is None for p in net.parameters())

        dark = np.clip(rng.standard_normal((2, 3, 6, 6)) * 0.1 - 0.8, -1, 1)
        net.zero_grads()
        out = gva.gva_forward(Tensor(dark), net, tau=0.4, training=True)
        ad.sum(out * rng.standard_normal(out.shape)).backward()
        assert net.w_out.grad is not None and np.abs(net.w_out.grad).max() > 0

    def test_tau_validation(self):
        with pytest.raises(ValueError):
            gva.GvaConfig(tau=0.0)
        with pytest.raises(ValueError):
            gva.GvaConfig(tau=1.0)
