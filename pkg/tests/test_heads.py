"""Mean-field head, KL, local reparameterization, predictive sampling."""

import numpy as np
import pytest

from raterbayes import tensor as T
from raterbayes.errors import ConfigError, DimensionError
from raterbayes.heads import (
    MaskEnsemble,
    MeanFieldGaussianHead,
    PriorConfig,
    SamplerConfig,
    binarize,
    ensemble_predict,
    foreground_prob,
    kl_mean_field,
    local_reparam_forward,
    mean_forward,
    sample_predictive,
    softplus_sigma,
)
from raterbayes.tensor import Tensor
from raterbayes.unet import UNetConfig, build

from conftest import finite_diff_check


class TestSoftplusSigma:
    def test_known_values(self):
        assert abs(softplus_sigma(0.0) - np.log(2.0)) < 1e-12
        assert abs(softplus_sigma(-4.0) - np.log1p(np.exp(-4.0))) < 1e-12

    def test_large_rho_identity_branch(self):
        assert softplus_sigma(1000.0) == 1000.0
        assert np.isfinite(softplus_sigma(750.0))

    def test_always_positive(self):
        for rho in (-50.0, -10.0, 0.0, 5.0):
            assert softplus_sigma(rho) > 0


class TestConfigs:
    def test_prior_rejects_nonpositive_std(self):
        with pytest.raises(ConfigError):
            PriorConfig(prior_std=0.0)

    @pytest.mark.parametrize("kwargs", [{"mc_samples": 0}, {"ensemble_size": 0},
                                        {"binarize_threshold": 0.0}, {"binarize_threshold": 1.0}])
    def test_sampler_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            SamplerConfig(**kwargs)


class TestHeadInit:
    def test_shapes_and_scales(self):
        head = MeanFieldGaussianHead(64, 3, np.random.default_rng(0))
        assert head.mu.shape == (64, 3)
        assert head.rho.shape == (64, 3)
        assert abs(head.mu.data.std() - 0.05) < 0.01
        assert abs(head.rho.data.mean() + 4.0) < 0.05
        assert not head.bias.data.any()

    def test_sigma_matches_scalar_softplus(self):
        head = MeanFieldGaussianHead(4, 2, np.random.default_rng(1))
        expected = np.array([[softplus_sigma(r) for r in row] for row in head.rho.data])
        np.testing.assert_allclose(head.sigma(), expected, atol=1e-12)

    def test_state_round_trip(self):
        head = MeanFieldGaussianHead(4, 2, np.random.default_rng(2))
        state = head.copy_state()
        other = MeanFieldGaussianHead.from_arrays(state)
        for k, v in other.state_arrays().items():
            np.testing.assert_array_equal(v, state[k])


class TestKL:
    def test_zero_when_posterior_equals_prior(self):
        head = MeanFieldGaussianHead(8, 2, np.random.default_rng(0))
        head.mu.data[:] = 0.0
        head.rho.data[:] = np.log(np.e - 1.0)  # softplus -> exactly 1
        assert abs(float(kl_mean_field(head).data)) < 1e-12

    def test_single_weight_hand_value(self):
        # mu=1, sigma=1 against N(0,1): ln 1 + (1 + 1)/2 - 1/2 = 0.5 per weight
        head = MeanFieldGaussianHead(1, 1, np.random.default_rng(0))
        head.mu.data[:] = 1.0
        head.rho.data[:] = np.log(np.e - 1.0)
        head.bias.data[:] = 0.0
        assert abs(float(kl_mean_field(head).data) - 0.5) < 1e-12

    def test_matches_monte_carlo_oracle(self):
        rng = np.random.default_rng(3)
        head = MeanFieldGaussianHead(3, 2, np.random.default_rng(4))
        head.mu.data[:] = rng.normal(0, 0.5, size=(3, 2))
        head.rho.data[:] = rng.normal(-1.0, 0.3, size=(3, 2))
        sigma = head.sigma()
        draws = head.mu.data + sigma * rng.standard_normal((200_000, 3, 2))
        log_q = -0.5 * ((draws - head.mu.data) / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)
        log_p = -0.5 * draws ** 2 - 0.5 * np.log(2 * np.pi)
        mc = (log_q - log_p).sum(axis=(1, 2)).mean()
        assert abs(float(kl_mean_field(head).data) - mc) < 1e-2

    def test_grows_with_mean_shift(self):
        head = MeanFieldGaussianHead(2, 2, np.random.default_rng(0))
        head.rho.data[:] = -2.0
        head.mu.data[:] = 0.0
        k0 = float(kl_mean_field(head).data)
        head.mu.data[:] = 2.0
        assert float(kl_mean_field(head).data) > k0

    def test_gradcheck(self):
        head = MeanFieldGaussianHead(3, 2, np.random.default_rng(5))
        finite_diff_check(lambda: kl_mean_field(head), [head.mu, head.rho],
                          np.random.default_rng(6), n_coords=20)


class TestLocalReparam:
    def _head(self, i=2, o=2, seed=0):
        return MeanFieldGaussianHead(i, o, np.random.default_rng(seed))

    def test_rejects_channel_mismatch(self):
        with pytest.raises(DimensionError):
            local_reparam_forward(Tensor(np.zeros((1, 3, 2, 2))), self._head(2, 2),
                                  np.random.default_rng(0))

    def test_sigma_zero_limit_is_mean_forward(self):
        head = self._head(3, 2, seed=1)
        head.rho.data[:] = -40.0  # sigma ~ 4e-18
        z = Tensor(np.random.default_rng(2).standard_normal((1, 3, 4, 4)))
        out = local_reparam_forward(z, head, np.random.default_rng(3))
        np.testing.assert_allclose(out.data, mean_forward(z, head).data, atol=1e-12)

    def test_zero_features_give_exact_bias(self):
        head = self._head(2, 2, seed=4)
        head.bias.data[:] = (0.7, -0.3)
        out = local_reparam_forward(Tensor(np.zeros((1, 2, 3, 3))), head,
                                    np.random.default_rng(5))
        np.testing.assert_array_equal(out.data[0, 0], 0.7)
        np.testing.assert_array_equal(out.data[0, 1], -0.3)

    def test_moments_match_analytic(self):
        head = self._head(2, 2, seed=6)
        head.rho.data[:] = np.array([[0.2, -0.5], [-1.0, 0.1]])
        z = np.array([[[[0.8]], [[-1.3]]]])
        rng = np.random.default_rng(7)
        draws = np.stack([local_reparam_forward(Tensor(z), head, rng).data[0, :, 0, 0]
                          for _ in range(40_000)])
        m = z[0, :, 0, 0] @ head.mu.data + head.bias.data
        s = np.sqrt((z[0, :, 0, 0] ** 2) @ (head.sigma() ** 2))
        np.testing.assert_allclose(draws.mean(axis=0), m, atol=4 * s.max() / 200)
        np.testing.assert_allclose(draws.std(axis=0), s, rtol=0.02)

    def test_gradcheck_with_frozen_noise(self):
        head = self._head(2, 2, seed=8)
        z = Tensor(np.random.default_rng(9).standard_normal((1, 2, 2, 2)))

        def loss_fn():
            out = local_reparam_forward(z, head, np.random.default_rng(42))
            return (out * out).mean()

        finite_diff_check(loss_fn, head.parameters(), np.random.default_rng(10), n_coords=20)


class TestMaskEnsemble:
    def test_requires_masks(self):
        with pytest.raises(ConfigError):
            MaskEnsemble([])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(DimensionError):
            MaskEnsemble([np.zeros((2, 2)), np.zeros((3, 3))])

    def test_rejects_non_binary(self):
        with pytest.raises(ConfigError):
            MaskEnsemble([np.full((2, 2), 0.5)])

    def test_casts_to_uint8(self):
        ens = MaskEnsemble([np.ones((2, 2), dtype=bool)])
        assert ens.masks[0].dtype == np.uint8
        assert len(ens) == 1


class TestBinarizeAndNesting:
    def test_strictly_above_threshold(self):
        probs = np.array([[0.499, 0.5], [0.501, 1.0]])
        np.testing.assert_array_equal(binarize(probs), [[0, 0], [1, 1]])

    def test_threshold_bounds(self):
        with pytest.raises(ConfigError):
            binarize(np.zeros((2, 2)), threshold=1.0)

    def test_foreground_prob_nested_levels(self):
        probs = np.array([0.2, 0.3, 0.5]).reshape(3, 1, 1) * np.ones((3, 2, 2))
        np.testing.assert_allclose(foreground_prob(probs, 1), 0.8)
        np.testing.assert_allclose(foreground_prob(probs, 2), 0.5)
        with pytest.raises(ConfigError):
            foreground_prob(probs, 3)
        with pytest.raises(ConfigError):
            foreground_prob(probs, 0)


class TestSamplePredictive:
    CFG = UNetConfig(depth=1, base_channels=2, head_features=4, num_classes=2)

    def _x(self):
        return Tensor(np.random.default_rng(0).standard_normal((1, 1, 8, 8)))

    def test_neural_linear_requires_head(self):
        model = build(self.CFG, np.random.default_rng(1), with_head=False)
        with pytest.raises(ConfigError):
            sample_predictive(model, self._x(), SamplerConfig(), "neural_linear")

    def test_mc_dropout_rejects_head(self):
        model = build(self.CFG, np.random.default_rng(1))
        head = MeanFieldGaussianHead(4, 2, np.random.default_rng(2))
        with pytest.raises(ConfigError):
            sample_predictive(model, self._x(), SamplerConfig(), "mc_dropout", head=head)

    def test_unknown_scheme(self):
        model = build(self.CFG, np.random.default_rng(1))
        with pytest.raises(ConfigError):
            sample_predictive(model, self._x(), SamplerConfig(), "deep_ensemble")

    @pytest.mark.parametrize("scheme", ["neural_linear", "mc_dropout"])
    def test_count_shape_and_simplex(self, scheme):
        with_head = scheme == "mc_dropout"
        model = build(self.CFG, np.random.default_rng(1), with_head=with_head)
        head = None if with_head else MeanFieldGaussianHead(4, 2, np.random.default_rng(2))
        maps = sample_predictive(model, self._x(), SamplerConfig(mc_samples=5), scheme, head=head)
        assert len(maps) == 5
        for p in maps:
            assert p.shape == (2, 8, 8)
            np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)

    @pytest.mark.parametrize("scheme", ["neural_linear", "mc_dropout"])
    def test_deterministic_from_config_seed(self, scheme):
        with_head = scheme == "mc_dropout"
        model = build(self.CFG, np.random.default_rng(1), with_head=with_head)
        head = None if with_head else MeanFieldGaussianHead(4, 2, np.random.default_rng(2))
        cfg = SamplerConfig(mc_samples=3, seed=77)
        a = sample_predictive(model, self._x(), cfg, scheme, head=head)
        b = sample_predictive(model, self._x(), cfg, scheme, head=head)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa, pb)

    def test_samples_actually_vary(self):
        model = build(self.CFG, np.random.default_rng(1))
        maps = sample_predictive(model, self._x(), SamplerConfig(mc_samples=2), "mc_dropout")
        assert np.abs(maps[0] - maps[1]).max() > 0


class TestEnsemblePredict:
    CFG = UNetConfig(depth=1, base_channels=2, head_features=4, num_classes=2)

    def test_mean_is_average_and_permutation_invariant(self):
        models = [build(self.CFG, np.random.default_rng(s)) for s in range(3)]
        x = Tensor(np.random.default_rng(9).standard_normal((1, 1, 8, 8)))
        maps, mean = ensemble_predict(models, x, SamplerConfig())
        np.testing.assert_allclose(mean, sum(maps) / 3, atol=1e-15)
        _, mean_rev = ensemble_predict(models[::-1], x, SamplerConfig())
        np.testing.assert_allclose(mean, mean_rev, atol=1e-15)

    def test_rejects_empty_and_mismatched(self):
        with pytest.raises(ConfigError):
            ensemble_predict([], Tensor(np.zeros((1, 1, 8, 8))), SamplerConfig())
        other = UNetConfig(depth=1, base_channels=3, head_features=4, num_classes=2)
        models = [build(self.CFG, np.random.default_rng(0)), build(other, np.random.default_rng(1))]
        with pytest.raises(ConfigError):
            ensemble_predict(models, Tensor(np.zeros((1, 1, 8, 8))), SamplerConfig())
