import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stridenet.data import augment, center_crop, hflip, source_size, split_dataset, synth_dataset
from stridenet.metrics import compute_metrics, confusion_matrix
from stridenet.model import TOY_CONFIG, init_weights
from stridenet.roughness import roughness_factor, histogram_variance, to_grayscale
from stridenet.tensor import Tensor, backward, make_rng, softmax
from stridenet.training import (
    AdamWState,
    TrainConfig,
    TrainingDivergedError,
    adamw_step,
    evaluate,
    label_smoothing_ce,
    step_lr,
    train,
)

from conftest import central_diff, rel_error


class TestLoss:
    def test_uniform_logits_ln4(self):
        for eps in (0.0, 0.1, 0.5):
            assert abs(label_smoothing_ce(np.zeros(4), 2, eps).item() - math.log(4)) < 1e-12

    def test_no_smoothing_is_plain_ce(self, rng):
        z = rng.normal(size=5)
        expect = -(z[3] - np.log(np.exp(z).sum()))
        assert label_smoothing_ce(z, 3, 0.0).item() == pytest.approx(expect, abs=1e-12)

    def test_smoothed_target_hand(self):
        z = np.array([2.0, 0.0, -1.0, 0.5])
        logp = z - np.log(np.exp(z).sum())
        t = np.full(4, 0.025)
        t[0] += 0.9
        assert label_smoothing_ce(z, 0, 0.1).item() == pytest.approx(-(t * logp).sum(), abs=1e-12)

    def test_gradient_softmax_minus_target(self, rng):
        z = rng.normal(size=4)
        zt = Tensor(z, requires_grad=True)
        (g,) = backward(label_smoothing_ce(zt, 1, 0.1), [zt])
        t = np.full(4, 0.025)
        t[1] += 0.9
        np.testing.assert_allclose(g, softmax(z).data - t, atol=1e-12)
        (num,) = central_diff(lambda a: label_smoothing_ce(a[0], 1, 0.1).item(), [z.copy()])
        assert rel_error(g, num) < 1e-6

    def test_batch_mean(self, rng):
        z = rng.normal(size=(3, 4))
        y = np.array([0, 3, 1])
        per = [label_smoothing_ce(z[i], y[i]).item() for i in range(3)]
        assert label_smoothing_ce(z, y).item() == pytest.approx(np.mean(per), abs=1e-12)

    def test_bad_target(self):
        with pytest.raises(ValueError):
            label_smoothing_ce(np.zeros(4), 4)


class TestAdamW:
    def test_zero_grad_no_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        adamw_step(p, {"w": np.zeros(2)}, AdamWState(), 1e-3, weight_decay=0.0)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_pure_decay(self):
        p = {"w": np.array([1.0])}
        adamw_step(p, {"w": np.zeros(1)}, AdamWState(), 1e-3, weight_decay=0.1)
        assert p["w"][0] == pytest.approx(0.9999, abs=1e-15)

    @pytest.mark.parametrize("g", [3.0, -0.02, 1e-3])
    def test_first_step_magnitude(self, g):
        p = {"w": np.array([0.5])}
        adamw_step(p, {"w": np.array([g])}, AdamWState(), 1e-3, weight_decay=0.0)
        step = 0.5 - p["w"][0]
        assert step == pytest.approx(1e-3 * g / (abs(g) + 1e-8), rel=1e-9)

    @given(arrays(np.float64, 6, elements=st.floats(-10, 10)),
           arrays(np.float64, 6, elements=st.floats(-10, 10)))
    @settings(max_examples=50)
    def test_bounded_step(self, theta, grad):
        lr, wd = 1e-3, 0.05
        p = {"w": theta.copy()}
        state = AdamWState()
        for _ in range(3):
            before = p["w"].copy()
            adamw_step(p, {"w": grad}, state, lr, weight_decay=wd)
            # a constant gradient keeps |m_hat / sqrt(v_hat)| <= 1
            bound = lr * (1.0 + wd * np.abs(before))
            assert np.all(np.abs(p["w"] - before) <= bound * (1 + 1e-6))

    def test_float32_kept(self):
        p = {"w": np.ones(3, np.float32)}
        adamw_step(p, {"w": np.ones(3, np.float32)}, AdamWState(), 1e-3)
        assert p["w"].dtype == np.float32


class TestSchedule:
    def test_values(self):
        assert [step_lr(e) for e in range(3)] == [0.001] * 3
        assert step_lr(3) == 0.00097
        assert step_lr(9) == 0.001 * 0.97**3

    @given(st.integers(0, 200))
    def test_monotone_periodic(self, e):
        assert step_lr(e + 1) <= step_lr(e)
        assert step_lr(e) == step_lr(3 * (e // 3))

    def test_negative(self):
        with pytest.raises(ValueError):
            step_lr(-1)


class TestMetrics:
    def test_diagonal(self):
        m = compute_metrics(np.diag([3, 5, 2]))
        assert all(v == 1.0 for v in m.values())

    def test_hand_case(self):
        m = compute_metrics([[2, 0], [1, 1]])
        assert m["OA"] == pytest.approx(0.75, abs=1e-12)
        assert m["AA"] == pytest.approx(0.75, abs=1e-12)
        assert m["kappa"] == pytest.approx(0.5, abs=1e-12)
        assert m["precision"] == pytest.approx((2 / 3 + 1) / 2, abs=1e-12)
        assert m["recall"] == pytest.approx(0.75, abs=1e-12)
        assert m["f1"] == pytest.approx((0.8 + 2 / 3) / 2, abs=1e-12)

    def test_chance(self):
        assert compute_metrics([[25, 25], [25, 25]])["kappa"] == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_metrics(np.zeros((3, 3)))

    def test_absent_class_counts_zero(self):
        m = compute_metrics([[2, 0, 0], [0, 0, 0], [1, 0, 1]])
        assert m["recall"] == pytest.approx((1 + 0 + 0.5) / 3)

    def test_confusion_matrix(self):
        cm = confusion_matrix([0, 1, 1, 2], [0, 2, 1, 2], 3)
        np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 1, 1], [0, 0, 1]])

    @given(arrays(np.int64, (3, 3), elements=st.integers(0, 20)))
    def test_kappa_bounds(self, cm):
        if cm.sum() == 0:
            return
        m = compute_metrics(cm)
        assert -1 - 1e-12 <= m["kappa"] <= 1 + 1e-12
        assert m["kappa"] <= m["OA"] + 1e-12

    @given(st.integers(2, 5), st.integers(1, 10), st.integers(0, 2**31))
    def test_balanced_aa_equals_oa(self, k, n, seed):
        rng = np.random.default_rng(seed)
        cm = np.stack([rng.multinomial(n, np.ones(k) / k) for _ in range(k)])
        m = compute_metrics(cm)
        assert m["AA"] == pytest.approx(m["OA"], abs=1e-12)


class TestData:
    def test_source_size(self):
        assert source_size(224) == 256 and source_size(32) == 36

    def test_center_crop(self, rng):
        img = rng.random((256, 256, 3))
        np.testing.assert_array_equal(augment(img, None, 224, training=False), img[16:240, 16:240])

    def test_flip_involution(self, rng):
        img = rng.random((5, 7, 3))
        np.testing.assert_array_equal(hflip(hflip(img)), img)

    def test_augment_seeded(self, rng):
        img = rng.random((40, 40, 3))
        a = [augment(img, make_rng(4), 32) for _ in range(2)]
        np.testing.assert_array_equal(*a)
        assert a[0].shape == (32, 32, 3)

    def test_augment_covers_offsets_and_flips(self, rng):
        img = rng.random((36, 36, 3))
        r = make_rng(0)
        crops = {augment(img, r, 32).tobytes() for _ in range(200)}
        assert len(crops) > 30

    def test_undersized_rejected(self):
        with pytest.raises(ValueError):
            augment(np.zeros((10, 10, 3)), make_rng(0), 32)
        with pytest.raises(ValueError):
            center_crop(np.zeros((10, 10, 3)), 32)

    def test_split_70_30(self):
        labels = np.repeat(np.arange(4), 100)
        tr, te = split_dataset(labels, 0.7, 0)
        assert np.all(np.bincount(labels[tr]) == 70) and np.all(np.bincount(labels[te]) == 30)
        assert len(np.intersect1d(tr, te)) == 0
        np.testing.assert_array_equal(np.sort(np.concatenate([tr, te])), np.arange(400))

    def test_split_two_items(self):
        tr, te = split_dataset([0, 0, 1, 1, 1], 0.5, 0)
        assert (np.array([0, 0, 1, 1, 1])[tr] == 0).sum() == 1

    def test_split_seeds(self):
        labels = np.repeat([0, 1], 20)
        a, b = split_dataset(labels, 0.7, 1), split_dataset(labels, 0.7, 1)
        c = split_dataset(labels, 0.7, 2)
        np.testing.assert_array_equal(a[0], b[0])
        assert not np.array_equal(a[0], c[0])

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=60), st.floats(0.05, 0.95))
    def test_split_proportions(self, labels, ratio):
        labels = np.array(labels)
        if len(np.unique(labels)) != labels.max() + 1:
            with pytest.raises(ValueError):
                split_dataset(labels, ratio)
            return
        tr, _ = split_dataset(labels, ratio)
        for c in range(labels.max() + 1):
            n = (labels == c).sum()
            assert abs((labels[tr] == c).sum() - ratio * n) <= 1

    def test_synth_deterministic_balanced(self):
        a, b = synth_dataset(5, 36, 3), synth_dataset(5, 36, 3)
        np.testing.assert_array_equal(a.images, b.images)
        assert np.all(np.bincount(a.labels) == 5)
        assert a.images.min() >= 0 and a.images.max() <= 1

    def test_synth_roughness_ordering(self):
        ds = synth_dataset(100, 36, 0)
        means = []
        for c in range(4):
            vals = [roughness_factor(histogram_variance(to_grayscale(im)[:32, :32]))
                    for im in ds.images[ds.labels == c]]
            means.append(np.mean(vals))
        assert means[3] > means[0]


class TestTrain:
    def test_smoke_one_epoch(self):
        ds = synth_dataset(2, 36, 0)
        res = train(TOY_CONFIG, TrainConfig(epochs=1, batch_size=4, split=0.5), ds)
        assert len(res.log) == 1 and math.isfinite(res.log[0].train_loss)
        assert res.confusion.sum() == len(res.test_index) == 4

    def test_deterministic(self):
        ds = synth_dataset(3, 36, 1)
        tc = TrainConfig(epochs=2, batch_size=4, init_std=0.1)
        a, b = train(TOY_CONFIG, tc, ds), train(TOY_CONFIG, tc, ds)
        assert [r.to_dict() for r in a.log] == [r.to_dict() for r in b.log]
        for n in a.weights.names():
            np.testing.assert_array_equal(a.weights[n], b.weights[n])

    def test_log_lr_follows_schedule(self):
        ds = synth_dataset(2, 36, 0)
        res = train(TOY_CONFIG, TrainConfig(epochs=4, batch_size=8, step_size=2, gamma=0.5), ds)
        assert [r.lr for r in res.log] == [1e-3, 1e-3, 5e-4, 5e-4]

    def test_divergence_reports_step(self):
        ds = synth_dataset(2, 36, 0)
        w = init_weights(TOY_CONFIG)
        w["head.bias"] = np.array([np.nan, 0, 0, 0], np.float32)
        with pytest.raises(TrainingDivergedError) as info:
            train(TOY_CONFIG, TrainConfig(epochs=1, batch_size=4), ds, weights=w)
        assert info.value.step == 1

    def test_class_count_mismatch(self):
        ds = synth_dataset(2, 36, 0)
        with pytest.raises(ValueError):
            train(dataclasses.replace(TOY_CONFIG, num_classes=3), TrainConfig(epochs=1), ds)

    def test_evaluate_center_crops(self):
        ds = synth_dataset(2, 36, 0)
        loss, cm = evaluate(init_weights(TOY_CONFIG), ds)
        assert cm.sum() == 8 and math.isfinite(loss)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(split=1.0)
        with pytest.raises(ValueError):
            TrainConfig(smoothing=1.0)
