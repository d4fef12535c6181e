"""Loss values, sampling, gradients, the optimiser, and the fit loop."""

import math

import numpy as np
import pytest

from framerec.data import Dataset, split_ratings
from framerec.errors import ConfigError, SamplingError
from framerec.model import ModelConfig, init_params
from framerec.synth import SynthConfig, generate_synthetic
from framerec.training import (
    AdamState,
    TrainConfig,
    adam_step,
    batch_gradients,
    batch_loss,
    bpr_pair_loss,
    finite_diff_check,
    fit,
    gradcheck_instance,
    init_adam_state,
    sample_epoch,
)

LN2 = math.log(2.0)


def small_split(seed=0, **synth_kw):
    kw = dict(num_users=10, num_items=16, frames_per_item=3, feature_dim=5,
              latent_dim=3, ratings_per_user=6, frame_likes_per_pair=1, seed=seed)
    kw.update(synth_kw)
    ds, likes, _ = generate_synthetic(SynthConfig(**kw))
    return split_ratings(ds, 0.6, 0.2, seed=seed, frame_likes=likes)


def small_model(**kw):
    base = dict(d1=4, d2=4, attn_hidden_visual=4, attn_hidden_rating=4,
                reduced_visual_dim=4, visual_mode="att", fusion_mode="att",
                init_scale=0.2, seed=1)
    base.update(kw)
    return ModelConfig(**base)


class TestPairLoss:
    def test_equal_scores_give_log_two(self):
        np.testing.assert_allclose(bpr_pair_loss(1.7, 1.7), LN2, rtol=1e-15)

    def test_log_three_margin(self):
        # softplus(-ln 3) = ln(4/3)
        np.testing.assert_allclose(
            bpr_pair_loss(math.log(3.0), 0.0), math.log(4.0 / 3.0), rtol=1e-14
        )

    def test_extreme_margins_stay_finite(self):
        assert bpr_pair_loss(1000.0, 0.0) == 0.0
        big = bpr_pair_loss(-1000.0, 0.0)
        assert np.isfinite(big) and abs(big - 1000.0) < 1e-9
        arr = bpr_pair_loss(np.array([50.0, -50.0]), np.array([0.0, 0.0]))
        assert np.isfinite(arr).all()


class TestSampling:
    def test_shape_and_validity(self):
        split = small_split()
        rng = np.random.default_rng(0)
        triples = sample_epoch(split, neg_ratio=4, rng=rng)
        assert triples.shape == (len(split.train) * 4, 3)
        rated = {(int(u), int(i)) for u, i in split.base.ratings}
        train = set(map(tuple, split.train_array.tolist()))
        for u, i, j in triples.tolist():
            assert (u, i) in train
            assert (u, j) not in rated  # negatives avoid every portion

    def test_each_training_pair_appears_neg_ratio_times(self):
        split = small_split()
        triples = sample_epoch(split, neg_ratio=3, rng=np.random.default_rng(1))
        pairs, counts = np.unique(triples[:, :2], axis=0, return_counts=True)
        assert (counts == 3).all()
        assert len(pairs) == len(split.train)

    def test_deterministic_given_rng(self):
        split = small_split()
        a = sample_epoch(split, 2, np.random.default_rng(5))
        b = sample_epoch(split, 2, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_saturated_user_raises(self):
        ds = Dataset(
            num_users=1, num_items=2, num_frames=2, feature_dim=1,
            ratings=frozenset({(0, 0), (0, 1)}),
            frames_of_item=((0,), (1,)),
            frame_parent=np.array([0, 1], dtype=np.int64),
            frame_features=np.ones((2, 1)),
            user_ids=("u",), item_ids=("a", "b"), frame_ids=("fa", "fb"),
        )
        split = split_ratings(ds, 0.5, 0.25, seed=0)
        with pytest.raises(SamplingError):
            sample_epoch(split, 1, np.random.default_rng(0))


class TestBatchLoss:
    def test_full_vs_touched_reg_scopes(self):
        params, cfg, ds, batch = gradcheck_instance(seed=2)
        full = batch_loss(params, cfg, ds, batch, reg_scope="full")
        touched = batch_loss(params, cfg, ds, batch, reg_scope="batch")
        users = np.unique(batch[:, 0])
        items = np.unique(batch[:, 1:3])
        out_u = np.setdiff1d(np.arange(ds.num_users), users)
        out_i = np.setdiff1d(np.arange(ds.num_items), items)
        untouched = (
            np.sum(params.user_collab[out_u] ** 2)
            + np.sum(params.user_visual[out_u] ** 2)
            + np.sum(params.item_collab[out_i] ** 2)
        )
        np.testing.assert_allclose(full - touched, cfg.lambda1 * untouched, rtol=1e-9)

    def test_mean_and_sum_reductions(self):
        params, cfg, ds, batch = gradcheck_instance(seed=4, lambda1=0.0)
        mean = batch_loss(params, cfg, ds, batch, reduction="mean")
        total = batch_loss(params, cfg, ds, batch, reduction="sum")
        np.testing.assert_allclose(total, mean * len(batch), rtol=1e-12)

    def test_ranking_term_matches_pair_losses(self):
        params, cfg, ds, batch = gradcheck_instance(seed=6, lambda1=0.0,
                                                    visual_mode="off")
        from framerec.model import score_pairs

        pos = score_pairs(batch[:, 0], batch[:, 1], params, cfg, ds)
        neg = score_pairs(batch[:, 0], batch[:, 2], params, cfg, ds)
        ref = bpr_pair_loss(pos, neg).mean()
        np.testing.assert_allclose(
            batch_loss(params, cfg, ds, batch), ref, rtol=1e-14
        )


class TestGradients:
    @pytest.mark.parametrize("visual,fusion", [
        ("off", "sum"), ("avg", "sum"), ("avg", "att"), ("att", "sum"), ("att", "att"),
    ])
    def test_matches_finite_differences(self, visual, fusion):
        params, cfg, ds, batch = gradcheck_instance(
            seed=31, visual_mode=visual, fusion_mode=fusion
        )
        report = finite_diff_check(params, cfg, ds, batch)
        assert report.max_rel_err < 1e-4, report.per_param

    def test_matches_finite_differences_with_options(self):
        for kw in (dict(attention_bias=True), dict(share_visual_projection=True),
                   dict(lambda1=0.0)):
            params, cfg, ds, batch = gradcheck_instance(seed=37, **kw)
            report = finite_diff_check(params, cfg, ds, batch)
            assert report.max_rel_err < 1e-4, (kw, report.per_param)

    def test_sum_reduction_gradients(self):
        params, cfg, ds, batch = gradcheck_instance(seed=41)
        report = finite_diff_check(params, cfg, ds, batch, reduction="sum")
        assert report.max_rel_err < 1e-4

    def test_untouched_rows_get_zero_gradient(self):
        params, cfg, ds, batch = gradcheck_instance(seed=43)
        batch = batch[batch[:, 0] != 0]  # drop user 0 from the batch
        assert len(batch)
        _, grads = batch_gradients(params, cfg, ds, batch)
        assert not grads["user_collab"][0].any()
        assert not grads["user_visual"][0].any()

    def test_gradients_only_for_active_tensors(self):
        params, cfg, ds, batch = gradcheck_instance(seed=43, visual_mode="avg",
                                                    fusion_mode="sum")
        _, grads = batch_gradients(params, cfg, ds, batch)
        assert set(grads) == {"user_collab", "item_collab", "user_visual",
                              "visual_proj"}

    def test_step_size_must_be_positive(self):
        params, cfg, ds, batch = gradcheck_instance(seed=2)
        with pytest.raises(ValueError):
            finite_diff_check(params, cfg, ds, batch, h=0.0)

    def test_single_precision_rejected(self):
        params, cfg, ds, batch = gradcheck_instance(seed=2)
        cfg32 = ModelConfig(**{**cfg.__dict__, "precision": "f32"})
        params32 = init_params(cfg32, ds)
        with pytest.raises(ConfigError):
            finite_diff_check(params32, cfg32, ds, batch)


class TestAdam:
    def test_first_step_hand_value(self):
        # with gradient 1 the first update is lr / (1 + eps), independent of
        # the moment decay rates
        cfg = small_model(visual_mode="off", fusion_mode="sum", d1=1, d2=1)
        tcfg = TrainConfig(lr=0.001)
        ds, _, _ = generate_synthetic(SynthConfig(
            num_users=1, num_items=1, frames_per_item=1, feature_dim=1,
            latent_dim=1, ratings_per_user=1, frame_likes_per_pair=1, seed=0,
        ))
        params = init_params(cfg, ds)
        params.user_collab[:] = 0.0
        params.item_collab[:] = 0.0
        state = init_adam_state(params, cfg)
        grads = {
            "user_collab": np.array([[1.0]]),
            "item_collab": np.array([[-1.0]]),
        }
        adam_step(params, grads, state, tcfg)
        expected = 0.001 / (1.0 + 1e-8)
        np.testing.assert_allclose(params.user_collab[0, 0], -expected, rtol=1e-12)
        np.testing.assert_allclose(params.item_collab[0, 0], expected, rtol=1e-12)
        assert state.step == 1

    def test_bias_correction_across_steps(self):
        # constant gradient g: every update equals lr * g / (|g| + eps')
        cfg = small_model(visual_mode="off", fusion_mode="sum", d1=1, d2=1)
        tcfg = TrainConfig(lr=0.01)
        ds, _, _ = generate_synthetic(SynthConfig(
            num_users=1, num_items=1, frames_per_item=1, feature_dim=1,
            latent_dim=1, ratings_per_user=1, frame_likes_per_pair=1, seed=0,
        ))
        params = init_params(cfg, ds)
        params.user_collab[:] = 0.0
        state = init_adam_state(params, cfg)
        g = {"user_collab": np.array([[0.5]]),
             "item_collab": np.zeros((1, 1))}
        for t in range(1, 6):
            before = params.user_collab[0, 0]
            adam_step(params, g, state, tcfg)
            step = before - params.user_collab[0, 0]
            np.testing.assert_allclose(step, 0.01 * 0.5 / (0.5 + 1e-8), rtol=1e-9)

    def test_only_active_tensors_tracked(self):
        params, cfg, ds, _ = gradcheck_instance(seed=3, visual_mode="off",
                                                fusion_mode="sum")
        state = init_adam_state(params, cfg)
        assert set(state.m) == {"user_collab", "item_collab"}

    def test_inactive_tensors_never_move(self):
        split = small_split()
        cfg = small_model(visual_mode="off", fusion_mode="sum")
        tcfg = TrainConfig(epochs=2, batch_size=64, neg_ratio=2, seed=9)
        fresh = init_params(cfg, split.base)
        trained, _ = fit(split, cfg, tcfg)
        np.testing.assert_array_equal(trained.user_visual, fresh.user_visual)
        np.testing.assert_array_equal(trained.visual_proj, fresh.visual_proj)
        assert not np.array_equal(trained.user_collab, fresh.user_collab)


class TestFit:
    def test_deterministic(self):
        split = small_split()
        cfg = small_model()
        tcfg = TrainConfig(epochs=3, batch_size=64, neg_ratio=2, seed=7)
        p1, log1 = fit(split, cfg, tcfg)
        p2, log2 = fit(split, cfg, tcfg)
        for name, tensor in p1.tensors().items():
            np.testing.assert_array_equal(tensor, p2.tensors()[name])
        assert [r.train_loss for r in log1.epochs] == [r.train_loss for r in log2.epochs]

    def test_loss_decreases(self):
        split = small_split()
        cfg = small_model()
        tcfg = TrainConfig(lr=0.01, epochs=8, batch_size=128, neg_ratio=4, seed=3)
        _, log = fit(split, cfg, tcfg)
        losses = [r.train_loss for r in log.epochs]
        assert losses[-1] < losses[0]

    def test_early_stopping_restores_best_epoch(self):
        split = small_split()
        cfg = small_model()
        # huge lr destabilises validation quickly; patience 2 must trigger
        tcfg = TrainConfig(lr=0.5, epochs=40, batch_size=64, neg_ratio=2,
                           patience=2, seed=5)
        params, log = fit(split, cfg, tcfg)
        assert log.stopped_early
        assert len(log.epochs) < 40
        assert 1 <= log.best_epoch <= len(log.epochs)
        # the returned parameters are the snapshot from the best epoch, not
        # the final one: retraining for exactly best_epoch epochs matches
        replay, _ = fit(split, cfg, TrainConfig(lr=0.5, epochs=log.best_epoch,
                                                batch_size=64, neg_ratio=2,
                                                patience=2, seed=5))
        np.testing.assert_array_equal(params.user_collab, replay.user_collab)

    def test_log_records_epochs(self):
        split = small_split()
        cfg = small_model(visual_mode="avg", fusion_mode="sum")
        tcfg = TrainConfig(epochs=2, batch_size=64, neg_ratio=2, seed=1)
        _, log = fit(split, cfg, tcfg)
        assert [r.epoch for r in log.epochs] == [1, 2]
        assert all(np.isfinite(r.train_loss) for r in log.epochs)
        assert all(0.0 <= r.valid_hr <= 1.0 for r in log.epochs)
        text = log.to_tsv()
        assert text.startswith("epoch\ttrain_loss")
        assert len(text.strip().splitlines()) == 3

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(loss_reduction="median")
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(adam_beta1=1.0)
