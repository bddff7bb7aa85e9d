import numpy as np
import pytest

from ssmseg import augment_lsa as lsa
from ssmseg import autodiff as ad
from ssmseg import ssm_core
from ssmseg.autodiff import Tensor

from conftest import fd_check


class ZeroDraws:
    """rng stub: normal draws are zero, integer draws follow a real stream."""

    def __init__(self, seed=0):
        self._rng = np.random.default_rng(seed)

    def standard_normal(self, size):
        return np.zeros(size)

    def integers(self, *args, **kwargs):
        return self._rng.integers(*args, **kwargs)


class TestChannelStats:
    def test_constant_sequence(self):
        f = Tensor(np.full((2, 3, 5), 4.0))
        stats = lsa.channel_stats(f)
        assert np.allclose(stats.mu.data, 4.0)
        assert np.allclose(stats.sigma.data, np.sqrt(lsa.EPS_STABILITY))

    def test_hand_computed_population_variance(self):
        f = Tensor(np.array([0.0, 2.0]).reshape(1, 1, 2))
        stats = lsa.channel_stats(f)
        assert stats.mu.data[0, 0] == pytest.approx(1.0)
        assert stats.sigma.data[0, 0] == pytest.approx(np.sqrt(1.0 + lsa.EPS_STABILITY))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((2, 3, 7))
        perm = rng.permutation(7)
        s1 = lsa.channel_stats(Tensor(f))
        s2 = lsa.channel_stats(Tensor(f[:, :, perm]))
        assert np.allclose(s1.mu.data, s2.mu.data)
        assert np.allclose(s1.sigma.data, s2.sigma.data)


class TestBatchUncertainty:
    def test_single_instance_is_zero(self):
        f = Tensor(np.random.default_rng(0).standard_normal((1, 4, 6)))
        unc = lsa.batch_uncertainty(lsa.channel_stats(f))
        assert np.array_equal(unc.sigma_mu.data, np.zeros(4))
        assert np.array_equal(unc.sigma_sigma.data, np.zeros(4))

    def test_identical_instances_zero(self):
        one = np.random.default_rng(1).standard_normal((1, 3, 5))
        f = Tensor(np.repeat(one, 4, axis=0))
        unc = lsa.batch_uncertainty(lsa.channel_stats(f))
        assert np.allclose(unc.sigma_mu.data, 0.0)
        assert np.allclose(unc.sigma_sigma.data, 0.0)

    def test_hand_computed_two_instance(self):
        # per-channel means 0 and 2 -> population std 1
        f = np.zeros((2, 1, 3))
        f[1] = 2.0
        unc = lsa.batch_uncertainty(lsa.channel_stats(Tensor(f)))
        assert unc.sigma_mu.data[0] == pytest.approx(1.0)


class TestResampleStats:
    def test_zero_draws_identity(self):
        f = Tensor(np.random.default_rng(0).standard_normal((3, 4, 8)))
        stats = lsa.channel_stats(f)
        unc = lsa.batch_uncertainty(stats)
        beta, gamma = lsa.resample_stats(stats, unc, np.zeros((3, 4)),
                                         np.zeros((3, 4)))
        assert np.allclose(beta.data, stats.mu.data)
        assert np.allclose(gamma.data, stats.sigma.data)

    def test_zero_uncertainty_ignores_draws(self):
        one = np.random.default_rng(1).standard_normal((1, 2, 6))
        f = Tensor(np.repeat(one, 3, axis=0))
        stats = lsa.channel_stats(f)
        unc = lsa.batch_uncertainty(stats)
        rng = np.random.default_rng(2)
        beta, _ = lsa.resample_stats(stats, unc, rng.standard_normal((3, 2)),
                                     rng.standard_normal((3, 2)))
        assert np.allclose(beta.data, stats.mu.data)

    def test_direct_substitution(self):
        stats = lsa.SequenceStats(mu=Tensor(np.full((1, 1), 1.0)),
                                  sigma=Tensor(np.full((1, 1), 2.0)))
        unc = lsa.StatUncertainty(sigma_mu=Tensor(np.full(1, 2.0)),
                                  sigma_sigma=Tensor(np.zeros(1)))
        beta, _ = lsa.resample_stats(stats, unc, np.full((1, 1), 0.5),
                                     np.zeros((1, 1)))
        assert beta.data[0, 0] == pytest.approx(2.0)

    def test_gamma_floor(self):
        stats = lsa.SequenceStats(mu=Tensor(np.zeros((1, 1))),
                                  sigma=Tensor(np.full((1, 1), 0.01)))
        unc = lsa.StatUncertainty(sigma_mu=Tensor(np.zeros(1)),
                                  sigma_sigma=Tensor(np.full(1, 1.0)))
        _, gamma = lsa.resample_stats(stats, unc, np.zeros((1, 1)),
                                      np.full((1, 1), -5.0))
        assert gamma.data[0, 0] == pytest.approx(np.sqrt(lsa.EPS_STABILITY))


class TestStyleTransform:
    def test_identity_reparameterization(self):
        f = Tensor(np.random.default_rng(0).standard_normal((2, 3, 9)))
        stats = lsa.channel_stats(f)
        out = lsa.style_transform(f, stats, stats.mu, stats.sigma)
        assert np.allclose(out.data, f.data, atol=1e-12)

    def test_constant_input_maps_to_beta(self):
        f = Tensor(np.full((1, 2, 4), 3.0))
        stats = lsa.channel_stats(f)
        beta = Tensor(np.array([[5.0, -1.0]]))
        gamma = Tensor(np.array([[2.0, 2.0]]))
        out = lsa.style_transform(f, stats, beta, gamma)
        assert np.allclose(out.data[0, 0], 5.0)
        assert np.allclose(out.data[0, 1], -1.0)

    def test_hand_evaluation(self):
        f = Tensor(np.array([0.0, 2.0]).reshape(1, 1, 2))
        stats = lsa.SequenceStats(mu=Tensor(np.full((1, 1), 1.0)),
                                  sigma=Tensor(np.full((1, 1), 1.0)))
        out = lsa.style_transform(f, stats, Tensor(np.full((1, 1), 5.0)),
                                  Tensor(np.full((1, 1), 3.0)))
        assert np.allclose(out.data[0, 0], [2.0, 8.0])

    def test_statistic_preservation(self):
        rng = np.random.default_rng(3)
        f = Tensor(rng.standard_normal((2, 4, 32)) * 2.0 + 1.0)
        stats = lsa.channel_stats(f)
        beta = Tensor(rng.standard_normal((2, 4)))
        gamma = Tensor(np.abs(rng.standard_normal((2, 4))) + 0.5)
        out = lsa.style_transform(f, stats, beta, gamma)
        new_stats = lsa.channel_stats(out)
        assert np.allclose(new_stats.mu.data, beta.data, atol=1e-10)
        assert np.allclose(new_stats.sigma.data, gamma.data, atol=1e-3)


class TestSequenceMask:
    def test_empty_and_full(self):
        for L in (1, 5, 8):
            assert lsa.sequence_mask(L, 0.0, 1).mask.sum() == 0
            for j in range(1, L + 1):
                assert lsa.sequence_mask(L, 1.0, j).mask.sum() == L

    def test_derived_example(self):
        m = lsa.sequence_mask(8, 0.75, 2)
        assert m.mask.sum() == 6
        assert np.array_equal(m.mask[0], [0, 1, 1, 1, 1, 1, 1, 0])

    def test_cardinality_grid(self):
        for L in (1, 4, 7, 64):
            for p in (0.0, 0.25, 0.5, 0.75, 1.0):
                for j in range(1, L + 1):
                    m = lsa.sequence_mask(L, p, j)
                    assert m.mask.sum() == int(np.floor(p * L + 0.5))

    def test_wraparound_contiguity(self):
        m = lsa.sequence_mask(6, 0.5, 5).mask[0]
        assert np.array_equal(m, [1, 0, 0, 0, 1, 1])

    def test_bounds_checked(self):
        with pytest.raises(ValueError):
            lsa.sequence_mask(4, 1.5, 1)
        with pytest.raises(ValueError):
            lsa.sequence_mask(4, 0.5, 0)
        with pytest.raises(ValueError):
            lsa.sequence_mask(4, 0.5, 5)


class TestMixup:
    def test_all_zero_mask_is_noop(self):
        rng = np.random.default_rng(0)
        f = Tensor(rng.standard_normal((2, 3, 4)))
        fa = Tensor(rng.standard_normal((2, 3, 4)))
        out = lsa.lsa_mixup(f, fa, np.zeros((2, 1, 4)))
        assert np.array_equal(out.data, f.data)

    def test_all_one_mask_full_replacement(self):
        rng = np.random.default_rng(1)
        f = Tensor(rng.standard_normal((2, 3, 4)))
        fa = Tensor(rng.standard_normal((2, 3, 4)))
        out = lsa.lsa_mixup(f, fa, np.ones((2, 1, 4)))
        assert np.array_equal(out.data, fa.data)

    def test_positionwise_blend(self):
        f = Tensor(np.zeros((1, 2, 4)))
        fa = Tensor(np.ones((1, 2, 4)))
        mask = np.array([[[1.0, 1.0, 0.0, 0.0]]])
        out = lsa.lsa_mixup(f, fa, mask)
        assert np.array_equal(out.data[0, 0], [1, 1, 0, 0])
        assert np.array_equal(out.data[0, 1], [1, 1, 0, 0])

    def test_shape_mismatch(self):
        f = Tensor(np.zeros((1, 2, 4)))
        with pytest.raises(ValueError):
            lsa.lsa_mixup(f, f, np.ones((2, 1, 4)))


def make_params(dim, n, seed=0):
    return ssm_core.SsmParams(dim, n, np.random.default_rng(seed))


class TestLsaBlock:
    def test_inference_equals_plain_ss2d(self):
        params = make_params(3, 4)
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
        out = lsa.lsa_block(x, params, 0.75, None, training=False)
        bundle = ssm_core.scan_expand(x)
        bundle.seqs = [ssm_core.selective_scan(s, params) for s in bundle.seqs]
        ref = ssm_core.scan_merge(bundle, 4, 4)
        assert np.allclose(out.data, ref.data, atol=1e-12)

    def test_zero_noise_identity(self):
        params = make_params(3, 4, seed=1)
        rng = np.random.default_rng(2)
        for _ in range(10):
            x = Tensor(rng.standard_normal((2, 3, 4, 4)))
            ref = lsa.lsa_block(x, params, 0.75, None, training=False)
            out = lsa.lsa_block(x, params, 0.75, ZeroDraws(), training=True)
            rel = np.abs(out.data - ref.data).max() / np.abs(ref.data).max()
            assert rel <= 1e-12

    def test_positions_differing_count(self):
        params = make_params(2, 3, seed=3)
        x = Tensor(np.random.default_rng(4).standard_normal((2, 2, 2, 4)))
        L = 8
        plain = lsa.lsa_direction_outputs(x, params, 0.5, None, training=False)
        auged = lsa.lsa_direction_outputs(x, params, 0.5,
                                          np.random.default_rng(5), training=True)
        for k in range(4):
            diff = ~np.isclose(plain[k].data, auged[k].data, rtol=1e-12, atol=1e-14)
            per_instance = diff.any(axis=1)          # [B, L] position-wise
            for b in range(2):
                assert per_instance[b].sum() == round(0.5 * L)

    def test_unique_masks_per_direction_and_instance(self):
        params = make_params(2, 3, seed=6)
        x = Tensor(np.random.default_rng(7).standard_normal((3, 2, 4, 4)))
        plain = lsa.lsa_direction_outputs(x, params, 0.5, None, training=False)
        auged = lsa.lsa_direction_outputs(x, params, 0.5,
                                          np.random.default_rng(8), training=True)
        patterns = set()
        for k in range(4):
            diff = ~np.isclose(plain[k].data, auged[k].data, rtol=1e-12, atol=1e-14)
            for b in range(3):
                patterns.add(tuple(diff[b].any(axis=0)))
        assert len(patterns) > 1

    def test_requires_rng_in_training(self):
        params = make_params(2, 2)
        x = Tensor(np.zeros((1, 2, 2, 2)))
        with pytest.raises(ValueError):
            lsa.lsa_block(x, params, 0.5, None, training=True)

    def test_introduces_no_parameters(self):
        p1 = make_params(3, 4, seed=9)
        n_before = sum(v.data.size for v in p1.named_parameters().values())
        x = Tensor(np.random.default_rng(10).standard_normal((2, 3, 4, 4)))
        lsa.lsa_block(x, p1, 0.75, np.random.default_rng(0), training=True)
        n_after = sum(v.data.size for v in p1.named_parameters().values())
        assert n_before == n_after

    def test_gradients_through_mixed_pathway(self):
        params = make_params(4, 2, seed=11)
        x = Tensor(np.random.default_rng(12).standard_normal((2, 4, 2, 4)),
                   requires_grad=True)
        w = np.random.default_rng(13).standard_normal((2, 4, 2, 4))

        def build():
            out = lsa.lsa_block(x, params, 0.5, np.random.default_rng(42),
                                training=True)
            return ad.sum(out * w)

        leaves = {"x": x, "a_log": params.a_log, "delta_w": params.delta_w,
                  "b_w": params.b_w, "c_w": params.c_w}
        fd_check(build, leaves, n_coords=100, rtol=1e-4)
