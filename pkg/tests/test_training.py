"""Losses, Adam, plateau schedule, early stopping, augmentation and the training loop."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leafgrad.augment import AugmentConfig, apply_transform, augment
from leafgrad.gradcheck import check_gradients
from leafgrad.losses import combined_seg_loss, cross_entropy_loss, dice_coeff, iou_coeff
from leafgrad.models import build_model
from leafgrad.optim import (AdamState, EarlyStop, PlateauSchedule, adam_step, early_stop_step, plateau_step,
                            restore_best)
from leafgrad.rng import RngState
from leafgrad.tensor import Tensor, backward
from leafgrad.training import (ArrayDataset, DataSplits, TrainConfig, evaluate_classifier, train_classifier,
                               train_segmenter)

TINY = {"input_shape": (3, 8, 8), "conv_stages": (4,), "dense_width": 8, "classes": 2, "se_ratio": 2}


@pytest.fixture
def toy_splits():
    gen = np.random.default_rng(7)
    y = np.arange(24) % 2
    x = gen.normal(0, 0.3, size=(24, 3, 8, 8)).astype(np.float32)
    x[y == 1, :, :4] += 1.0
    return DataSplits(ArrayDataset(x[:16], y[:16]), ArrayDataset(x[16:], y[16:]))


class TestCrossEntropy:
    def test_uniform_four_class(self, f64):
        loss = cross_entropy_loss(Tensor(np.full((3, 4), 0.25)), [0, 1, 3]).item()
        assert loss == pytest.approx(math.log(4), abs=1e-12)
        assert round(loss, 6) == 1.386294

    def test_scalar_oracle(self, f64, rng):
        p = rng.dirichlet(np.ones(5), size=6)
        y = rng.integers(0, 5, 6)
        want = -sum(math.log(max(p[i, y[i]], 1e-7)) for i in range(6)) / 6
        assert cross_entropy_loss(Tensor(p), y).item() == pytest.approx(want, rel=1e-12)

    def test_clamped_zero_probability(self, f64):
        loss = cross_entropy_loss(Tensor(np.array([[0.0, 1.0]])), [0]).item()
        assert loss == pytest.approx(-math.log(1e-7))

    def test_l2_term(self, f64):
        m = build_model("cnn", TINY, 0)
        p = Tensor(np.full((2, 2), 0.5))
        base = cross_entropy_loss(p, [0, 1]).item()
        sq = sum(float((t.data.astype(np.float64) ** 2).sum()) for t in m.parameters() if t.decay)
        assert cross_entropy_loss(p, [0, 1], m, 0.01).item() == pytest.approx(base + 0.01 * sq, rel=1e-6)

    @pytest.mark.parametrize("labels", [[0, 2], [0], [-1, 0]])
    def test_bad_labels(self, f64, labels):
        with pytest.raises(ValueError):
            cross_entropy_loss(Tensor(np.full((2, 2), 0.5)), labels)


class TestSegLoss:
    def test_hand_case(self, f64):
        pred = Tensor(np.array([1.0, 1.0, 0.0, 0.0]).reshape(1, 1, 2, 2))
        target = np.array([1.0, 0.0, 1.0, 0.0]).reshape(1, 1, 2, 2)
        assert dice_coeff(pred, target).item() == pytest.approx(0.5, abs=1e-6)
        assert iou_coeff(pred, target).item() == pytest.approx(1 / 3, abs=1e-6)
        loss = combined_seg_loss(pred, target, from_logits=False).item()
        assert loss == pytest.approx(0.583333, abs=1e-6)

    def test_perfect_and_empty(self, f64):
        m = np.zeros((1, 1, 3, 3))
        m[0, 0, 1] = 1
        assert combined_seg_loss(Tensor(m), m, from_logits=False).item() == pytest.approx(0.0, abs=1e-9)
        z = np.zeros((1, 1, 3, 3))
        assert combined_seg_loss(Tensor(z), z, from_logits=False).item() == pytest.approx(0.0, abs=1e-9)

    def test_shape_mismatch(self, f64):
        with pytest.raises(ValueError):
            combined_seg_loss(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))

    def test_gradients(self, f64):
        for seed in range(20):
            gen = np.random.default_rng(seed)
            z = Tensor(gen.normal(size=(2, 1, 4, 4)), requires_grad=True)
            t = (gen.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
            errs = check_gradients(lambda: combined_seg_loss(z, t), {"z": z})
            assert errs["z"] < 1e-4

    def test_ce_gradients(self, f64):
        for seed in range(20):
            gen = np.random.default_rng(seed)
            p = Tensor(gen.dirichlet(np.ones(4), size=3), requires_grad=True)
            y = gen.integers(0, 4, 3)
            assert check_gradients(lambda: cross_entropy_loss(p, y), {"p": p})["p"] < 1e-4


class TestAdam:
    def test_first_step(self, f64):
        p = Tensor(np.array([0.0, 0.0, 0.0]), requires_grad=True)
        g = np.array([1.0, -2.0, 0.5])
        adam_step([p], [g], AdamState(lr=1e-3))
        # bias correction makes the first step lr * g / (|g| + eps)
        np.testing.assert_allclose(p.data, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        assert p.data[0] == pytest.approx(-9.99999990e-4, abs=1e-13)
        assert p.data[2] == pytest.approx(-9.9999998e-4, abs=1e-13)

    def test_zero_gradient_no_move(self, f64):
        p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        state = AdamState(lr=0.1)
        for _ in range(5):
            adam_step([p], [np.zeros(2)], state)
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_quadratic_descent(self, f64):
        p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        state = AdamState(lr=0.1)
        for _ in range(500):
            p.grad = None
            backward((p * p).sum())
            adam_step([p], None, state)
        assert np.all(np.abs(p.data) < 1e-2)

    def test_two_step_oracle(self, f64):
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = AdamState(lr=0.01)
        m = v = 0.0
        theta = 1.0
        for t, g in enumerate([0.3, -0.7], start=1):
            adam_step([p], [np.array([g])], state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.data[0] == pytest.approx(theta, rel=1e-12)

    def test_missing_gradient(self, f64):
        with pytest.raises(ValueError):
            adam_step([Tensor(np.zeros(2), requires_grad=True)], None, AdamState())


def run_plateau(values, **kw):
    s = PlateauSchedule(lr=1e-3, **kw)
    for v in values:
        plateau_step(s, v)
    return s


class TestPlateau:
    @pytest.mark.parametrize("flat,halvings", [(14, 0), (15, 1), (29, 1), (30, 2), (31, 2)])
    def test_flat_epochs(self, flat, halvings):
        s = run_plateau([0.5] + [0.5] * flat)
        assert s.reductions == halvings
        assert s.lr == pytest.approx(1e-3 * 0.5 ** halvings)

    def test_improvement_resets(self):
        s = run_plateau([0.5] + [0.4] * 10 + [0.6] + [0.4] * 10)
        assert s.reductions == 0

    def test_min_mode_and_floor(self):
        s = run_plateau([1.0] + [2.0] * 60, mode="min", min_lr=3e-4)
        assert s.lr == 3e-4
        assert s.reductions == 2


class TestEarlyStop:
    def test_stops_fifteen_after_best(self):
        seq = [1.0, 0.9, 0.5] + [0.6] * 30
        es = EarlyStop(patience=15)
        for epoch, v in enumerate(seq, start=1):
            if early_stop_step(es, v) == "stop":
                break
        assert epoch == 18 and es.best_epoch == 3 and es.best == 0.5

    def test_restores_snapshot(self):
        w = {"a": np.array([1.0])}
        es = EarlyStop(patience=2)
        early_stop_step(es, 1.0, w)
        w["a"][0] = 5.0
        early_stop_step(es, 2.0, w)

        class Sink:
            state = None

            def load_state_dict(self, s):
                self.state = s

        sink = Sink()
        assert restore_best(es, sink)
        assert sink.state["a"][0] == 1.0

    def test_restored_weights_reproduce_best_val_loss(self, toy_splits):
        m = build_model("se-convnet", TINY, 2)
        cfg = TrainConfig(epochs=40, batch_size=4, lr=0.05, early_stop_patience=5, seed=2)
        report = train_classifier(m, toy_splits, cfg)
        assert report.best_epoch >= 1
        again = evaluate_classifier(m, toy_splits.val, cfg.l2, cfg.batch_size)["loss"]
        assert again == report.best_val_loss
        assert report.history[report.best_epoch - 1]["val_loss"] == report.best_val_loss


class TestAugment:
    def test_disabled_is_identity(self, rng):
        x = rng.random((3, 5, 5))
        out, _ = augment(x, None, AugmentConfig(enabled=False), RngState(0))
        assert out is x

    @given(st.booleans(), st.booleans())
    def test_flips_are_involutions(self, h, v):
        x = np.arange(2 * 3 * 4).reshape(2, 3, 4)
        np.testing.assert_array_equal(apply_transform(apply_transform(x, h, v, 0), h, v, 0), x)

    def test_rot90_index_map(self):
        x = np.arange(12).reshape(1, 3, 4)
        out = apply_transform(x, False, False, 90)
        assert out.shape == (1, 4, 3)
        for i in range(4):
            for j in range(3):
                assert out[0, i, j] == x[0, j, 3 - i]

    def test_four_rotations_identity(self, rng):
        x = rng.random((2, 4, 4))
        y = x
        for _ in range(4):
            y = apply_transform(y, False, False, 90)
        np.testing.assert_array_equal(y, x)

    def test_paired_mask_follows_image(self):
        gen = RngState(9)
        for _ in range(30):
            m = (np.random.default_rng(0).random((1, 6, 6)) > 0.5).astype(np.float32)
            img = np.concatenate([m, 1 - m, m * 2])
            out, mo = augment(img, m, AugmentConfig(), gen)
            np.testing.assert_array_equal(out[0], mo[0])

    def test_non_square_keeps_shape(self, rng):
        x = rng.random((3, 4, 6))
        gen = RngState(1)
        for _ in range(20):
            assert augment(x, None, AugmentConfig(), gen)[0].shape == x.shape

    def test_bad_config(self):
        with pytest.raises(ValueError):
            augment(np.zeros((1, 2, 2)), None, AugmentConfig(rotations=(45,)), RngState(0))


class TestTrainingLoop:
    def test_zero_lr_keeps_parameters(self, toy_splits):
        m = build_model("se-convnet", TINY, 0)
        before = {k: v.data.copy() for k, v in m.named_parameters().items()}
        train_classifier(m, toy_splits, TrainConfig(epochs=2, batch_size=8, lr=0.0, early_stop_patience=None))
        for k, v in m.named_parameters().items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_seeded_runs_identical(self, toy_splits):
        runs = []
        for _ in range(2):
            m = build_model("se-convnet", TINY, 3)
            cfg = TrainConfig(epochs=4, batch_size=4, lr=1e-2, seed=3, augment=AugmentConfig())
            runs.append((train_classifier(m, toy_splits, cfg).to_csv(), m.state_dict()))
        assert runs[0][0] == runs[1][0]
        for k, v in runs[0][1].items():
            np.testing.assert_array_equal(v, runs[1][1][k])

    def test_loss_decreases(self, toy_splits):
        m = build_model("se-convnet", TINY, 1)
        r = train_classifier(m, toy_splits, TrainConfig(epochs=15, batch_size=4, lr=1e-2, early_stop_patience=None))
        assert r.history[-1]["train_loss"] < r.history[0]["train_loss"]

    def test_history_columns(self, toy_splits):
        m = build_model("cnn", TINY, 1)
        r = train_classifier(m, toy_splits, TrainConfig(epochs=1, batch_size=8))
        assert r.to_csv().splitlines()[0].split(",")[:5] == ["epoch", "lr", "train_loss", "train_acc", "val_loss"]

    def test_label_out_of_range(self, toy_splits):
        bad = DataSplits(ArrayDataset(toy_splits.train.x, toy_splits.train.y + 1))
        with pytest.raises(ValueError, match="labels outside"):
            train_classifier(build_model("cnn", TINY, 0), bad, TrainConfig(epochs=1))

    def test_mask_shape_checked(self, rng):
        m = build_model("unet", {"input_shape": (3, 8, 8), "depth": 1, "base_filters": 2}, 0)
        bad = DataSplits(ArrayDataset(rng.random((4, 3, 8, 8)), np.zeros((4, 1, 4, 4))))
        with pytest.raises(ValueError, match="mask shape"):
            train_segmenter(m, bad, TrainConfig(epochs=1))
