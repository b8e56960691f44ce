"""Loss terms, hard-example selection, SGD, and the checker itself."""

from __future__ import annotations

import math

import numpy as np
import pytest

from arcdet.checkpoint import load_tensors, save_tensors
from arcdet.head import ComponentScores, softmax
from arcdet.loss_optim import (
    SGD,
    RoISample,
    cross_entropy,
    finite_difference_check,
    multi_task_loss,
    ohem_select,
    smooth_l1,
    smooth_l1_grad,
)
from oracles import max_rel_err, num_grad


class TestCrossEntropy:
    def test_certain_prediction(self):
        assert cross_entropy(np.array([0.0, 1.0, 0.0]), 1) == 0.0

    def test_uniform_21(self):
        p = np.full(21, 1 / 21)
        assert cross_entropy(p, 7) == pytest.approx(math.log(21))

    def test_clamped_at_tiny_probability(self):
        assert cross_entropy(np.array([0.0, 1.0]), 0) == pytest.approx(
            -math.log(1e-12)
        )

    def test_invalid_distribution_rejected(self):
        with pytest.raises(ValueError):
            cross_entropy(np.array([0.5, 0.2]), 0)
        with pytest.raises(ValueError):
            cross_entropy(np.array([0.5, 0.5]), 3)


class TestSmoothL1:
    def test_zero_at_equality(self):
        t = np.array([0.1, -0.2, 0.3, 0.0])
        assert smooth_l1(t, t) == 0.0

    def test_quadratic_branch(self):
        assert smooth_l1(np.array([0.5, 0, 0, 0]), np.zeros(4)) == pytest.approx(0.125)

    def test_linear_branch(self):
        assert smooth_l1(np.array([3.0, 0, 0, 0]), np.zeros(4)) == pytest.approx(2.5)

    def test_continuous_at_boundary(self):
        lo = smooth_l1(np.array([1 - 1e-9, 0, 0, 0]), np.zeros(4))
        hi = smooth_l1(np.array([1 + 1e-9, 0, 0, 0]), np.zeros(4))
        assert abs(hi - lo) < 1e-8

    def test_gradient_continuous_at_boundary(self):
        g_lo = smooth_l1_grad(np.array([1 - 1e-9, 0, 0, 0]), np.zeros(4))[0]
        g_hi = smooth_l1_grad(np.array([1 + 1e-9, 0, 0, 0]), np.zeros(4))[0]
        assert abs(g_hi - g_lo) < 1e-8
        assert g_hi == pytest.approx(1.0)

    def test_gradient_matches_finite_differences(self):
        t_star = np.array([0.5, -1.5, 0.15, 2.0])
        t = np.array([0.3, 0.4, -0.8, 0.1])
        want = num_grad(lambda x: smooth_l1(x, t_star), t.copy())
        np.testing.assert_allclose(smooth_l1_grad(t, t_star), want, atol=1e-7)


def sample_from_raw(raw_list, label, target=None):
    scores = [
        ComponentScores(r, softmax(np.asarray(r, dtype=np.float64)), np.zeros(4))
        for r in raw_list
    ]
    return RoISample([], scores, label, target)


def sample_with_prob(p_label, label, n_classes=3, m=1, target=None, treg=None):
    rest = (1.0 - p_label) / (n_classes - 1)
    prob = np.full(n_classes, rest)
    prob[label] = p_label
    scores = [
        ComponentScores(
            np.log(prob),
            prob.copy(),
            np.zeros(4) if treg is None else np.asarray(treg, dtype=np.float64),
        )
        for _ in range(m)
    ]
    return RoISample([], scores, label, target)


class TestMultiTaskLoss:
    def test_all_background_has_zero_regression(self):
        batch = [sample_with_prob(0.7, 0) for _ in range(4)]
        report, _ = multi_task_loss(batch)
        assert report.l_reg == 0.0
        assert report.total == pytest.approx(report.l_cls)

    def test_two_roi_hand_value(self):
        batch = [sample_with_prob(0.5, 0), sample_with_prob(0.25, 0)]
        report, _ = multi_task_loss(batch)
        assert report.total == pytest.approx((math.log(2) + math.log(4)) / 2)
        assert report.total == pytest.approx(1.0397, abs=1e-4)

    def test_reg_weight_scales_regression_exactly(self):
        target = np.array([0.2, 0.1, -0.3, 0.4])
        batch = [
            sample_with_prob(0.6, 1, target=target, treg=np.zeros(4)),
            sample_with_prob(0.8, 0),
        ]
        r1, _ = multi_task_loss(batch, reg_weight=1.0)
        r2, _ = multi_task_loss(batch, reg_weight=2.0)
        assert r2.total - r2.l_cls == pytest.approx(2 * (r1.total - r1.l_cls))
        assert r1.l_cls == pytest.approx(r2.l_cls)

    def test_normalizers(self):
        target = np.zeros(4)
        batch = [
            sample_with_prob(0.6, 1, target=target),
            sample_with_prob(0.6, 2, target=target),
            sample_with_prob(0.8, 0),
        ]
        report, _ = multi_task_loss(batch)
        assert report.n_cls == 3
        assert report.n_reg == 2

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            multi_task_loss([])

    def test_ohem_masks_gradients(self):
        batch = [
            sample_with_prob(0.9, 0),
            sample_with_prob(0.2, 0),
            sample_with_prob(0.5, 0),
        ]
        report, grads = multi_task_loss(batch, ohem_n=2)
        assert report.selected == [1, 2]
        assert not grads[0][0][0].any()
        assert grads[1][0][0].any()

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(31)
        m = 2
        raws = [rng.normal(size=(m, 4)) for _ in range(3)]
        tregs = [rng.normal(size=(m, 4)) for _ in range(3)]
        labels = [1, 0, 3]
        targets = [rng.normal(size=4) * 0.5, None, rng.normal(size=4) * 0.5]

        def build(raws_flat):
            arr = raws_flat.reshape(3, m, 4)
            batch = []
            for j in range(3):
                scores = [
                    ComponentScores(
                        arr[j, i], softmax(arr[j, i]), tregs[j][i].copy()
                    )
                    for i in range(m)
                ]
                batch.append(RoISample([], scores, labels[j], targets[j]))
            return batch

        def loss_of(raws_flat):
            report, _ = multi_task_loss(build(raws_flat), reg_weight=1.3, ohem_n=2)
            return report.total

        flat = np.concatenate([r.reshape(-1) for r in raws])
        _, grads = multi_task_loss(build(flat), reg_weight=1.3, ohem_n=2)
        analytic = np.concatenate(
            [np.concatenate([g[0] for g in roi]) for roi in grads]
        )
        want = num_grad(loss_of, flat.copy())
        assert max_rel_err(analytic, want) < 1e-4

    def test_treg_gradients_match_finite_differences(self):
        rng = np.random.default_rng(32)
        m = 2
        target = rng.normal(size=4) * 0.4
        raw = rng.normal(size=(m, 4))

        def loss_of(tregs_flat):
            arr = tregs_flat.reshape(m, 4)
            scores = [
                ComponentScores(raw[i], softmax(raw[i]), arr[i]) for i in range(m)
            ]
            batch = [
                RoISample([], scores, 2, target),
                sample_with_prob(0.7, 0, n_classes=4, m=m),
            ]
            report, _ = multi_task_loss(batch, reg_weight=0.8)
            return report.total

        tregs = rng.normal(size=(m, 4))
        scores = [
            ComponentScores(raw[i], softmax(raw[i]), tregs[i].copy())
            for i in range(m)
        ]
        batch = [
            RoISample([], scores, 2, target),
            sample_with_prob(0.7, 0, n_classes=4, m=m),
        ]
        _, grads = multi_task_loss(batch, reg_weight=0.8)
        analytic = np.concatenate([g[1] for g in grads[0]])
        want = num_grad(loss_of, tregs.reshape(-1).copy())
        assert max_rel_err(analytic, want) < 1e-4

    def test_label_target_consistency_enforced(self):
        with pytest.raises(ValueError):
            sample_with_prob(0.5, 0, target=np.zeros(4))
        with pytest.raises(ValueError):
            sample_with_prob(0.5, 1)


class TestOhemSelect:
    def test_small_batch_keeps_everything(self):
        assert ohem_select([0.3, 0.1], 128) == [0, 1]

    def test_picks_highest_losses(self):
        assert ohem_select([0.1, 5.0, 2.0], 2) == [1, 2]

    def test_ties_break_to_lower_index(self):
        assert ohem_select([1.0, 2.0, 2.0], 2) == [1, 2]
        assert ohem_select([2.0, 1.0, 2.0], 1) == [0]

    def test_permutation_consistency(self):
        rng = np.random.default_rng(33)
        losses = rng.normal(size=20)
        perm = rng.permutation(20)
        base = ohem_select(losses, 7)
        permuted = ohem_select(losses[perm], 7)
        assert [int(perm[i]) for i in permuted] == base

    def test_invalid_n_rejected(self):
        with pytest.raises(ValueError):
            ohem_select([1.0], 0)


class TestSGD:
    def test_zero_grad_zero_decay_only_momentum(self):
        opt = SGD(lr=0.1, momentum=0.5, weight_decay=0.0)
        params = {"w": np.array([1.0, 2.0])}
        opt.velocity["w"] = np.array([0.2, -0.4])
        opt.step(params, {"w": np.zeros(2)})
        np.testing.assert_allclose(opt.velocity["w"], [0.1, -0.2])
        np.testing.assert_allclose(params["w"], [1.1, 1.8])

    def test_plain_descent_step(self):
        opt = SGD(lr=0.1, momentum=0.0, weight_decay=0.0)
        params = {"w": np.array([1.0])}
        opt.step(params, {"w": np.array([1.0])})
        assert params["w"][0] == pytest.approx(0.9)

    def test_two_step_hand_unroll(self):
        lr, mu, wd = 0.05, 0.9, 0.1
        opt = SGD(lr=lr, momentum=mu, weight_decay=wd)
        params = {"w": np.array([2.0])}
        grads = [np.array([0.5]), np.array([-0.25])]
        theta, v = 2.0, 0.0
        for g in grads:
            opt.step(params, {"w": g.copy()})
            v = mu * v - lr * (g[0] + wd * theta)
            theta = theta + v
        assert params["w"][0] == pytest.approx(theta, rel=1e-9)
        assert opt.steps == 2

    def test_matches_vanilla_gd_without_momentum(self):
        rng = np.random.default_rng(34)
        opt = SGD(lr=0.01, momentum=0.0, weight_decay=0.0)
        w = rng.normal(size=5)
        params = {"w": w.copy()}
        ref = w.copy()
        for _ in range(5):
            g = rng.normal(size=5)
            opt.step(params, {"w": g.copy()})
            ref -= 0.01 * g
        np.testing.assert_allclose(params["w"], ref, rtol=1e-12)

    def test_state_round_trip(self, tmp_path):
        opt = SGD(lr=0.1)
        params = {"w": np.ones(3, dtype=np.float32)}
        opt.step(params, {"w": np.full(3, 0.5, dtype=np.float32)})
        path = tmp_path / "optim.ckpt"
        save_tensors(str(path), opt.state_tensors())
        fresh = SGD(lr=0.1)
        fresh.load_state(load_tensors(str(path)))
        assert fresh.steps == 1
        np.testing.assert_array_equal(fresh.velocity["w"], opt.velocity["w"])

    def test_mismatched_names_rejected(self):
        opt = SGD(lr=0.1)
        with pytest.raises(ValueError):
            opt.step({"w": np.ones(2)}, {"v": np.ones(2)})


class TestFiniteDifferenceCheck:
    def test_linear_function_is_exact(self):
        c = np.array([1.5, -2.0, 0.25])
        theta = np.array([0.3, 0.6, -0.9])
        err = finite_difference_check(lambda x: float(c @ x), theta, c.copy())
        assert err < 1e-9

    def test_error_shrinks_quadratically(self):
        theta = np.array([0.4, 1.1])
        analytic = np.cos(theta)
        fn = lambda x: float(np.sum(np.sin(x)))
        coarse = finite_difference_check(fn, theta.copy(), analytic, eps=1e-2)
        fine = finite_difference_check(fn, theta.copy(), analytic, eps=1e-3)
        assert coarse > 0
        assert fine < coarse / 50.0

    def test_detects_wrong_gradient(self):
        theta = np.array([0.5])
        err = finite_difference_check(
            lambda x: float(x[0] ** 2), theta, np.array([2.0])
        )
        assert err > 0.1

    def test_sampling_subset_of_coordinates(self):
        rng = np.random.default_rng(35)
        theta = rng.normal(size=200)
        c = rng.normal(size=200)
        err = finite_difference_check(
            lambda x: float(c @ x), theta, c.copy(), sample=20, rng=rng
        )
        assert err < 1e-8
