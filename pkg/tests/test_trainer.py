"""Optimizer, schedules, objective composition, target sampling, training loop."""

import numpy as np
import pytest

from raterbayes import tensor as T
from raterbayes.errors import ConfigError, DimensionError
from raterbayes.heads import MeanFieldGaussianHead, kl_mean_field, local_reparam_forward
from raterbayes.tensor import Tensor
from raterbayes.train import (
    AdamState,
    TrainConfig,
    adam_step,
    case_target,
    cosine_lr,
    draw_training_target,
    elbo_loss,
    train,
    validation_dice,
)
from raterbayes.unet import UNetConfig, build, forward_features

TINY_UNET = UNetConfig(depth=1, base_channels=2, head_features=4, num_classes=3)


class TestTrainConfig:
    @pytest.mark.parametrize("kwargs", [
        {"learning_rate": 0.0}, {"epochs": 0}, {"batch_size": 0},
        {"scheme": "laplace"}, {"sampling_strategy": "random"},
        {"mc_samples_T_train": 0},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_rater_index_parsing(self):
        assert TrainConfig(sampling_strategy="per_expert:2").rater_index() == 2
        assert TrainConfig(sampling_strategy="all_experts").rater_index() is None
        with pytest.raises(ConfigError):
            TrainConfig(sampling_strategy="per_expert").rater_index()


class TestCosineLr:
    def test_endpoint_values(self):
        assert cosine_lr(0, 100, 0.001) == 0.001
        assert abs(cosine_lr(100, 100, 0.001)) < 1e-18
        assert abs(cosine_lr(50, 100, 0.001) - 0.0005) < 1e-18

    def test_quarter_point(self):
        # lr(25/100) = 0.5 (1 + cos(pi/4)) lr_max
        expected = 0.5 * (1 + np.cos(np.pi / 4)) * 0.01
        assert abs(cosine_lr(25, 100, 0.01) - expected) < 1e-15

    def test_monotone_decreasing(self):
        vals = [cosine_lr(e, 50, 0.1, lr_min=0.001) for e in range(51)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert abs(vals[-1] - 0.001) < 1e-15

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            cosine_lr(11, 10, 0.1)


class TestAdam:
    def test_zero_grad_no_move(self):
        p = np.array([1.0, -2.0])
        adam_step([p], [np.zeros(2)], AdamState(), lr=0.1)
        np.testing.assert_array_equal(p, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        # with bias correction, step 1 moves by lr * sign(g) (up to eps)
        p = np.zeros(3)
        g = np.array([3.0, -0.5, 1e-3])
        adam_step([p], [g], AdamState(), lr=0.01)
        np.testing.assert_allclose(p, -0.01 * np.sign(g), rtol=1e-4)

    def test_minimizes_quadratic_bowl(self):
        rng = np.random.default_rng(0)
        p = rng.standard_normal(5) * 3
        target = rng.standard_normal(5)
        state = AdamState()
        for i in range(800):
            adam_step([p], [2 * (p - target)], state, lr=0.05)
        np.testing.assert_allclose(p, target, atol=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step([np.zeros(2)], [np.zeros(3)], AdamState(), lr=0.1)
        with pytest.raises(DimensionError):
            adam_step([np.zeros(2)], [], AdamState(), lr=0.1)


class TestElboLoss:
    def _setup(self):
        model = build(TINY_UNET, np.random.default_rng(0), with_head=False)
        head = MeanFieldGaussianHead(4, 3, np.random.default_rng(1))
        x = Tensor(np.random.default_rng(2).standard_normal((1, 1, 4, 4)))
        tgt = np.random.default_rng(3).integers(0, 3, size=(1, 4, 4))
        return model, head, x, tgt

    def test_composition_oracle(self):
        # elbo with T=1 equals CE of the same reparam draw plus scaled KL
        model, head, x, tgt = self._setup()
        loss = elbo_loss(model, head, x, tgt, mc_samples=1, kl_scale=0.2,
                         rng=np.random.default_rng(7))
        feats = Tensor(forward_features(model, x).data)
        logits = local_reparam_forward(feats, head, np.random.default_rng(7))
        expected = float(T.cross_entropy(T.softmax_channels(logits), tgt).data) \
            + 0.2 * float(kl_mean_field(head).data)
        assert abs(float(loss.data) - expected) < 1e-12

    def test_kl_scale_zero_drops_kl(self):
        model, head, x, tgt = self._setup()
        a = float(elbo_loss(model, head, x, tgt, 1, 0.0, np.random.default_rng(7)).data)
        b = float(elbo_loss(model, head, x, tgt, 1, 0.5, np.random.default_rng(7)).data)
        assert abs((b - a) - 0.5 * float(kl_mean_field(head).data)) < 1e-12

    def test_more_samples_reduce_variance(self):
        model, head, x, tgt = self._setup()
        head.rho.data[:] = 1.0  # inflate sigma so draws differ noticeably

        def losses(t, n=30):
            return [float(elbo_loss(model, head, x, tgt, t, 0.0,
                                    np.random.default_rng(100 + i)).data) for i in range(n)]

        assert np.var(losses(8)) < np.var(losses(1))

    def test_requires_samples(self):
        model, head, x, tgt = self._setup()
        with pytest.raises(ConfigError):
            elbo_loss(model, head, x, tgt, 0, 0.0, np.random.default_rng(0))


class TestTargets:
    def _case(self, ds):
        return ds.cases[0]

    def test_case_target_is_containment_depth(self, tiny_vessel_dataset):
        _, _, ds = tiny_vessel_dataset
        case = self._case(ds)
        tgt = case_target(case, case.annotations[0], ds.structures)
        anno = case.annotations[0]
        assert set(np.unique(tgt)) <= {0, 1, 2}
        np.testing.assert_array_equal(tgt == 2, anno["lumen"].astype(bool))
        np.testing.assert_array_equal(tgt >= 1, anno["eem"].astype(bool))

    def test_consensus_strategy(self, tiny_vessel_dataset):
        _, _, ds = tiny_vessel_dataset
        case = self._case(ds)
        tgt = draw_training_target(case, "consensus", np.random.default_rng(0), ds.structures)
        np.testing.assert_array_equal(tgt, case_target(case, case.consensus, ds.structures))

    def test_per_expert_strategy_fixed(self, tiny_vessel_dataset):
        _, _, ds = tiny_vessel_dataset
        case = self._case(ds)
        for r in range(case.num_annotations):
            tgt = draw_training_target(case, f"per_expert:{r}", np.random.default_rng(0),
                                       ds.structures)
            np.testing.assert_array_equal(
                tgt, case_target(case, case.annotations[r], ds.structures))
        with pytest.raises(ConfigError):
            draw_training_target(case, "per_expert:9", np.random.default_rng(0), ds.structures)

    def test_all_experts_uniform_frequencies(self, tiny_vessel_dataset):
        _, _, ds = tiny_vessel_dataset
        case = self._case(ds)
        rng = np.random.default_rng(1)
        refs = [case_target(case, a, ds.structures) for a in case.annotations]
        counts = np.zeros(len(refs))
        n = 400
        for _ in range(n):
            tgt = draw_training_target(case, "all_experts", rng, ds.structures)
            hit = [i for i, r in enumerate(refs) if np.array_equal(tgt, r)]
            assert hit
            counts[hit[0]] += 1
        # chi-square against uniform over 4 raters, 99.9% critical value 16.27
        expected = n / len(refs)
        chi2 = ((counts - expected) ** 2 / expected).sum()
        assert chi2 < 16.27


class TestTrainingLoop:
    def test_overfits_single_image(self, tiny_vessel_dataset):
        _, _, ds = tiny_vessel_dataset
        one = type(ds)(task=ds.task, structures=ds.structures,
                       cases=[ds.split("train")[0], ds.split("val")[0]])
        one.cases[0].split = "train"
        one.cases[1].split = "val"
        cfg = TrainConfig(scheme="deep_ensemble", sampling_strategy="consensus",
                          epochs=200, batch_size=1, ensemble_members=1, seed=2,
                          val_interval=20)
        ucfg = UNetConfig(depth=2, base_channels=8, head_features=16, num_classes=3,
                          dropout_rate=0.0)
        res = train(one, ucfg, cfg)
        case = one.cases[0]
        vd = validation_dice(res.models[0], None, "deep_ensemble", [case],
                             ds.structures, 1, np.random.default_rng(0))
        assert vd > 0.9

    def test_same_seed_bit_identical(self, tiny_vessel_dataset):
        _, _, ds = tiny_vessel_dataset
        cfg = TrainConfig(scheme="mc_dropout", epochs=2, seed=5, val_interval=1)
        ucfg = UNetConfig(depth=1, base_channels=2, head_features=4, num_classes=3)
        a = train(ds, ucfg, cfg)
        b = train(ds, ucfg, cfg)
        for k in a.models[0].params:
            np.testing.assert_array_equal(a.models[0].params[k].data,
                                          b.models[0].params[k].data)
        assert a.histories[0].loss == b.histories[0].loss

    def test_ensemble_members_distinct(self, tiny_vessel_dataset):
        _, _, ds = tiny_vessel_dataset
        cfg = TrainConfig(scheme="deep_ensemble", epochs=2, ensemble_members=2, seed=1)
        ucfg = UNetConfig(depth=1, base_channels=2, head_features=4, num_classes=3)
        res = train(ds, ucfg, cfg)
        assert len(res.models) == 2
        w0 = res.models[0].params["enc0.conv0.weight"].data
        w1 = res.models[1].params["enc0.conv0.weight"].data
        assert np.abs(w0 - w1).max() > 0

    def test_neural_linear_returns_head(self, tiny_vessel_dataset):
        _, _, ds = tiny_vessel_dataset
        cfg = TrainConfig(scheme="neural_linear", epochs=2, seed=0)
        ucfg = UNetConfig(depth=1, base_channels=2, head_features=4, num_classes=3)
        res = train(ds, ucfg, cfg)
        assert res.heads[0] is not None
        assert not res.models[0].has_head

    def test_loss_decreases(self, tiny_vessel_dataset):
        _, _, ds = tiny_vessel_dataset
        cfg = TrainConfig(scheme="deep_ensemble", epochs=12, ensemble_members=1,
                          sampling_strategy="consensus", seed=4, val_interval=4)
        ucfg = UNetConfig(depth=1, base_channels=4, head_features=8, num_classes=3,
                          dropout_rate=0.0)
        res = train(ds, ucfg, cfg)
        loss = res.histories[0].loss
        assert np.mean(loss[-3:]) < np.mean(loss[:3])
