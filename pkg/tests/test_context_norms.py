"""CN, CN-X and ACN kernels: forward contracts, exact gradients, state IO."""

import numpy as np
import pytest

from ctxnorm.context_norms import (
    AdaptiveContextNorm,
    ContextNorm,
    ContextNormExtended,
    load_state,
    save_state,
)
from ctxnorm.gmm import gaussian_logpdf
from ctxnorm.norms import BatchNorm, NotInitializedError
from ctxnorm.rng import make_rng
from ctxnorm.tensor_ops import finite_diff_grad, relative_error


class TestContextNormForward:
    def test_k1_matches_batchnorm(self):
        rng = make_rng(0)
        x = rng.standard_normal((5, 3, 2))
        cn = ContextNorm(3, [1.0])
        bn = BatchNorm(3)
        gamma = rng.uniform(0.5, 1.5, 3)
        beta = rng.standard_normal(3)
        cn.params["gamma"][0] = gamma
        cn.params["beta"][0] = beta
        bn.params["gamma"] = gamma.copy()
        bn.params["beta"] = beta.copy()
        y_cn = cn.forward(x, np.zeros(5, dtype=int))
        y_bn = bn.forward(x)
        np.testing.assert_allclose(y_cn, y_bn, atol=1e-10)
        np.testing.assert_allclose(cn.running_mean[0], bn.running_mean, atol=1e-12)
        np.testing.assert_allclose(cn.running_var[0], bn.running_var, atol=1e-12)

    def test_two_point_context_with_lambda_scaling(self):
        # context 0 with lambda=0.25: xhat = (1/sqrt(0.25)) * {-1, 1} = {-2, 2}
        cn = ContextNorm(1, [0.25, 0.75], eps=0.0)
        y = cn.forward(np.array([1.0, 3.0]).reshape(2, 1, 1), np.zeros(2, dtype=int))
        np.testing.assert_allclose(y.ravel(), [-2.0, 2.0], atol=1e-12)

    def test_per_context_decomposition(self):
        # mixed batch == per-context sub-batches run separately, re-interleaved
        rng = make_rng(1)
        lambdas = [0.4, 0.6]
        x = rng.standard_normal((8, 3, 2))
        ctx = np.array([0, 1, 0, 1, 1, 0, 1, 0])
        gamma = rng.uniform(0.5, 1.5, (2, 3))
        beta = rng.standard_normal((2, 3))

        mixed = ContextNorm(3, lambdas)
        mixed.params["gamma"] = gamma.copy()
        mixed.params["beta"] = beta.copy()
        y_mixed = mixed.forward(x, ctx)

        y_split = np.empty_like(x)
        for k in (0, 1):
            layer = ContextNorm(3, lambdas)
            layer.params["gamma"] = gamma.copy()
            layer.params["beta"] = beta.copy()
            sel = ctx == k
            y_split[sel] = layer.forward(x[sel], np.full(sel.sum(), k))
        np.testing.assert_allclose(y_mixed, y_split, atol=1e-12)

    def test_absent_context_untouched(self):
        cn = ContextNorm(2, [0.5, 0.5])
        x = make_rng(2).standard_normal((4, 2, 2))
        cn.forward(x, np.zeros(4, dtype=int))
        assert cn.initialized[0] and not cn.initialized[1]
        np.testing.assert_array_equal(cn.running_mean[1], 0.0)
        np.testing.assert_array_equal(cn.running_var[1], 1.0)

    def test_moment_invariant_pre_lambda(self):
        # within each context the pre-lambda xhat is standardized
        rng = make_rng(3)
        cn = ContextNorm(3, [0.3, 0.7], eps=1e-8)
        x = rng.standard_normal((40, 3, 4))
        ctx = rng.integers(0, 2, size=40)
        y = cn.forward(x, ctx)  # gamma=1, beta=0
        for k in (0, 1):
            pre_lambda = y[ctx == k] * np.sqrt(cn.lambdas[k])
            assert np.abs(pre_lambda.mean(axis=(0, 2))).max() <= 1e-7
            np.testing.assert_allclose(pre_lambda.var(axis=(0, 2)), 1.0, atol=1e-4)

    def test_permutation_equivariance(self):
        rng = make_rng(4)
        x = rng.standard_normal((6, 2, 3))
        ctx = np.array([0, 1, 0, 1, 0, 1])
        perm = rng.permutation(6)
        a = ContextNorm(2, [0.5, 0.5])
        b = ContextNorm(2, [0.5, 0.5])
        np.testing.assert_allclose(
            a.forward(x, ctx)[perm], b.forward(x[perm], ctx[perm]), atol=1e-14
        )

    def test_context_locality(self):
        rng = make_rng(5)
        x = rng.standard_normal((6, 2, 2))
        ctx = np.array([0, 0, 0, 1, 1, 1])
        base = ContextNorm(2, [0.5, 0.5]).forward(x, ctx)
        x2 = x.copy()
        x2[0] += 5.0  # perturb a context-0 sample
        other = ContextNorm(2, [0.5, 0.5]).forward(x2, ctx)
        np.testing.assert_array_equal(base[3:], other[3:])
        assert not np.allclose(base[:3], other[:3])

    def test_invalid_lambdas_rejected(self):
        with pytest.raises(ValueError):
            ContextNorm(2, [0.5, 0.6])
        with pytest.raises(ValueError):
            ContextNorm(2, [1.0, 0.0])

    def test_out_of_range_ctx_rejected(self):
        cn = ContextNorm(2, [0.5, 0.5])
        with pytest.raises(ValueError, match="out of range"):
            cn.forward(np.ones((2, 2, 2)), np.array([0, 2]))


class TestContextNormDegenerate:
    def test_single_activation_falls_back_to_running_stats(self):
        rng = make_rng(6)
        cn = ContextNorm(1, [0.5, 0.5], momentum=0.0)
        warm = rng.standard_normal((6, 1, 1)) + 3.0
        cn.forward(warm, np.array([0, 0, 0, 1, 1, 1]))
        rm_before = cn.running_mean.copy()
        rv_before = cn.running_var.copy()
        # context 1 appears once with L=1: running stats used, update skipped
        x = np.array([[[2.0]], [[4.0]], [[9.0]]])
        y = cn.forward(x, np.array([0, 0, 1]))
        inv_lam = 1.0 / np.sqrt(0.5)
        expected = inv_lam * (9.0 - rm_before[1, 0]) / np.sqrt(rv_before[1, 0] + cn.eps)
        np.testing.assert_allclose(y[2, 0, 0], expected, atol=1e-12)
        np.testing.assert_array_equal(cn.running_mean[1], rm_before[1])
        np.testing.assert_array_equal(cn.running_var[1], rv_before[1])
        assert not np.array_equal(cn.running_mean[0], rm_before[0])

    def test_degenerate_without_running_stats_rejected(self):
        cn = ContextNorm(1, [0.5, 0.5])
        with pytest.raises(NotInitializedError, match="degenerate"):
            cn.forward(np.ones((3, 1, 1)), np.array([0, 0, 1]))

    def test_degenerate_backward_uses_frozen_stats(self):
        rng = make_rng(7)
        cn = ContextNorm(1, [0.5, 0.5], eps=1e-3)
        cn.forward(rng.standard_normal((6, 1, 1)), np.array([0, 0, 0, 1, 1, 1]))
        x = rng.standard_normal((3, 1, 1))
        ctx = np.array([0, 0, 1])
        probe = rng.standard_normal((3, 1, 1))
        cn.forward(x, ctx)
        dx = cn.backward(probe)
        frozen_mean = cn.running_mean.copy()
        frozen_var = cn.running_var.copy()

        def loss(arr):
            restore_m, restore_v = cn.running_mean.copy(), cn.running_var.copy()
            cn.running_mean, cn.running_var = frozen_mean.copy(), frozen_var.copy()
            out = float((cn.forward(arr, ctx, update_stats=False) * probe).sum())
            cn.running_mean, cn.running_var = restore_m, restore_v
            return out

        fd = finite_diff_grad(loss, x.copy(), 1e-5)
        assert relative_error(dx, fd) < 1e-5


class TestContextNormBackward:
    def test_zero_upstream(self):
        rng = make_rng(8)
        cn = ContextNorm(2, [0.5, 0.5])
        cn.forward(rng.standard_normal((4, 2, 2)), np.array([0, 1, 0, 1]))
        dx = cn.backward(np.zeros((4, 2, 2)))
        np.testing.assert_array_equal(dx, 0.0)
        np.testing.assert_array_equal(cn.grads["gamma"], 0.0)
        np.testing.assert_array_equal(cn.grads["beta"], 0.0)

    def test_dx_matches_finite_differences(self):
        rng = make_rng(9)
        cn = ContextNorm(3, [0.3, 0.7], eps=1e-3)
        cn.params["gamma"] = rng.uniform(0.5, 1.5, (2, 3))
        cn.params["beta"] = rng.standard_normal((2, 3))
        x = rng.standard_normal((4, 3, 2))
        ctx = np.array([0, 1, 0, 1])
        probe = rng.standard_normal((4, 3, 2))
        cn.forward(x, ctx)
        dx = cn.backward(probe)
        fd = finite_diff_grad(
            lambda a: float((cn.forward(a, ctx) * probe).sum()), x.copy(), 1e-5
        )
        assert relative_error(dx, fd) < 1e-5

    def test_k1_gradients_equal_batchnorm(self):
        rng = make_rng(10)
        x = rng.standard_normal((4, 2, 3))
        probe = rng.standard_normal((4, 2, 3))
        cn = ContextNorm(2, [1.0])
        bn = BatchNorm(2)
        cn.forward(x, np.zeros(4, dtype=int))
        bn.forward(x)
        np.testing.assert_allclose(cn.backward(probe), bn.backward(probe), atol=1e-10)
        np.testing.assert_allclose(cn.grads["gamma"][0], bn.grads["gamma"], atol=1e-10)
        np.testing.assert_allclose(cn.grads["beta"][0], bn.grads["beta"], atol=1e-10)

    def test_grads_accumulate_only_from_own_context(self):
        rng = make_rng(11)
        cn = ContextNorm(2, [0.5, 0.5])
        x = rng.standard_normal((4, 2, 2))
        ctx = np.array([0, 0, 1, 1])
        cn.forward(x, ctx)
        dy = np.zeros((4, 2, 2))
        dy[:2] = rng.standard_normal((2, 2, 2))  # upstream only on context 0
        cn.backward(dy)
        np.testing.assert_array_equal(cn.grads["gamma"][1], 0.0)
        np.testing.assert_array_equal(cn.grads["beta"][1], 0.0)
        assert np.abs(cn.grads["gamma"][0]).max() > 0


class TestContextNormEval:
    def test_identity_statistics(self):
        cn = ContextNorm(1, [1.0], momentum=0.0, eps=0.0)
        cn.update = None
        cn.running_mean[0] = 0.0
        cn.running_var[0] = 1.0
        cn.initialized[0] = True
        x = make_rng(12).standard_normal((4, 1, 2))
        np.testing.assert_allclose(cn.forward(x, np.zeros(4, dtype=int), training=False), x)

    def test_centered_gives_beta(self):
        cn = ContextNorm(1, [0.5, 0.5])
        cn.params["beta"][1] = np.array([7.0])
        cn.running_mean[1] = 4.0
        cn.running_var[1] = 2.0
        cn.initialized[1] = True
        y = cn.forward(np.full((2, 1, 1), 4.0), np.ones(2, dtype=int), training=False)
        np.testing.assert_allclose(y, 7.0, atol=1e-12)

    def test_lambda_quarter_doubles_xhat(self):
        stats = {"mean": 1.0, "var": 3.0}
        outs = {}
        for lam, tag in (([0.25, 0.75], 0.25), ([1.0], 1.0)):
            cn = ContextNorm(1, lam)
            cn.running_mean[0] = stats["mean"]
            cn.running_var[0] = stats["var"]
            cn.initialized[0] = True
            outs[tag] = cn.forward(np.array([[[2.5]]]), np.zeros(1, dtype=int), training=False)
        np.testing.assert_allclose(outs[0.25], 2.0 * outs[1.0], atol=1e-12)

    def test_uninitialized_context_rejected(self):
        cn = ContextNorm(1, [0.5, 0.5])
        cn.forward(np.ones((2, 1, 2)), np.zeros(2, dtype=int))  # init context 0 only
        with pytest.raises(NotInitializedError):
            cn.forward(np.ones((2, 1, 2)), np.ones(2, dtype=int), training=False)


class TestContextNormExtended:
    def test_identity_parameters(self):
        cnx = ContextNormExtended(2, [1.0], eps=0.0)  # mu=0, log_var=0 -> var=1
        x = make_rng(13).standard_normal((3, 2, 2))
        np.testing.assert_allclose(cnx.forward(x, np.zeros(3, dtype=int)), x, atol=1e-12)

    def test_single_sample_context_is_well_defined(self):
        cnx = ContextNormExtended(1, [0.5, 0.5])
        y = cnx.forward(np.array([[[4.0]]]), np.array([1]))
        assert np.isfinite(y).all()

    def test_matches_scalar_recomputation(self):
        rng = make_rng(14)
        cnx = ContextNormExtended(2, [0.4, 0.6], rng=rng)
        cnx.params["gamma"] = rng.uniform(0.5, 1.5, (2, 2))
        cnx.params["beta"] = rng.standard_normal((2, 2))
        cnx.params["log_var"] = 0.3 * rng.standard_normal((2, 2))
        x = rng.standard_normal((5, 2, 1))
        ctx = np.array([0, 1, 1, 0, 1])
        y = cnx.forward(x, ctx)
        for i in range(5):
            k = ctx[i]
            for c in range(2):
                var = np.exp(cnx.params["log_var"][k, c])
                xhat = (
                    (x[i, c, 0] - cnx.params["mu"][k, c])
                    / np.sqrt(var + cnx.eps)
                    / np.sqrt(cnx.lambdas[k])
                )
                expected = cnx.params["gamma"][k, c] * xhat + cnx.params["beta"][k, c]
                np.testing.assert_allclose(y[i, c, 0], expected, atol=1e-12)

    def test_train_equals_eval(self):
        rng = make_rng(15)
        cnx = ContextNormExtended(2, [0.5, 0.5], rng=rng)
        x = rng.standard_normal((4, 2, 2))
        ctx = np.array([0, 1, 0, 1])
        np.testing.assert_array_equal(
            cnx.forward(x, ctx, training=True), cnx.forward(x, ctx, training=False)
        )

    def test_zero_upstream(self):
        rng = make_rng(16)
        cnx = ContextNormExtended(2, [0.5, 0.5], rng=rng)
        cnx.forward(rng.standard_normal((4, 2, 2)), np.array([0, 1, 0, 1]))
        dx = cnx.backward(np.zeros((4, 2, 2)))
        np.testing.assert_array_equal(dx, 0.0)
        for g in cnx.grads.values():
            np.testing.assert_array_equal(g, 0.0)

    def test_all_gradients_match_finite_differences(self):
        rng = make_rng(17)
        cnx = ContextNormExtended(3, [0.3, 0.7], rng=rng, eps=1e-3)
        cnx.params["gamma"] = rng.uniform(0.5, 1.5, (2, 3))
        cnx.params["beta"] = rng.standard_normal((2, 3))
        cnx.params["log_var"] = 0.3 * rng.standard_normal((2, 3))
        x = rng.standard_normal((4, 3, 2))
        ctx = np.array([0, 1, 0, 1])
        probe = rng.standard_normal((4, 3, 2))
        cnx.forward(x, ctx)
        dx = cnx.backward(probe)
        analytic = {"x": dx, **{n: g.copy() for n, g in cnx.grads.items()}}

        def loss(arr):
            return float((cnx.forward(arr, ctx) * probe).sum())

        assert relative_error(analytic["x"], finite_diff_grad(loss, x.copy(), 1e-5)) < 1e-5
        for name in cnx.params:
            fd = finite_diff_grad(lambda _: loss(x), cnx.params[name], 1e-5)
            assert relative_error(analytic[name], fd) < 1e-5, name

    def test_dmu_hand_summation(self):
        # dmu_k = -sum_{i in k} dxhat_i / (sqrt(lambda_k) sqrt(var_k + eps))
        rng = make_rng(18)
        cnx = ContextNormExtended(1, [1.0], eps=1e-3)
        x = rng.standard_normal((3, 1, 1))
        dy = rng.standard_normal((3, 1, 1))
        cnx.params["gamma"][0, 0] = 1.7
        cnx.forward(x, np.zeros(3, dtype=int))
        cnx.backward(dy)
        var = np.exp(cnx.params["log_var"][0, 0])
        dxhat = dy * 1.7
        expected = -dxhat.sum() / (np.sqrt(1.0) * np.sqrt(var + cnx.eps))
        np.testing.assert_allclose(cnx.grads["mu"][0, 0], expected, atol=1e-12)

    def test_absent_context_gets_zero_grads(self):
        rng = make_rng(19)
        cnx = ContextNormExtended(2, [0.5, 0.5], rng=rng)
        cnx.forward(rng.standard_normal((3, 2, 1)), np.zeros(3, dtype=int))
        cnx.backward(rng.standard_normal((3, 2, 1)))
        for name in ("gamma", "beta", "mu", "log_var"):
            np.testing.assert_array_equal(cnx.grads[name][1], 0.0)

    def test_context_locality(self):
        rng = make_rng(20)
        x = rng.standard_normal((4, 2, 1))
        ctx = np.array([0, 0, 1, 1])
        layer = ContextNormExtended(2, [0.5, 0.5], rng=make_rng(99))
        base = layer.forward(x, ctx)
        x2 = x.copy()
        x2[0] += 3.0
        other = layer.forward(x2, ctx)
        np.testing.assert_array_equal(base[2:], other[2:])

    def test_permutation_equivariance(self):
        rng = make_rng(21)
        x = rng.standard_normal((6, 2, 2))
        ctx = np.array([0, 1, 0, 1, 0, 1])
        perm = rng.permutation(6)
        layer = ContextNormExtended(2, [0.5, 0.5], rng=make_rng(3))
        np.testing.assert_array_equal(
            layer.forward(x, ctx)[perm], layer.forward(x[perm], ctx[perm])
        )


class TestAdaptiveContextNormInit:
    def test_uniform_lambda_exact(self):
        acn = AdaptiveContextNorm(3, 4, rng=make_rng(0))
        np.testing.assert_array_equal(acn.lambdas, [0.25, 0.25, 0.25, 0.25])

    def test_deterministic_by_seed(self):
        a = AdaptiveContextNorm(3, 2, rng=make_rng(5))
        b = AdaptiveContextNorm(3, 2, rng=make_rng(5))
        np.testing.assert_array_equal(a.params["means"], b.params["means"])

    def test_single_context_lambda_one(self):
        acn = AdaptiveContextNorm(2, 1, rng=make_rng(1))
        np.testing.assert_array_equal(acn.lambdas, [1.0])


class TestAdaptiveContextNormForward:
    def test_k1_is_parameter_standardization(self):
        rng = make_rng(21)
        acn = AdaptiveContextNorm(2, 1, rng=rng)
        acn.params["gamma"][0] = [1.5, 0.5]
        acn.params["beta"][0] = [1.0, -1.0]
        x = rng.standard_normal((4, 2, 3))
        y = acn.forward(x)
        m = acn.params["means"][0]
        var = np.exp(acn.params["log_var"][0])
        expected = (
            acn.params["gamma"][0][None, :, None]
            * (x - m[None, :, None])
            / np.sqrt(var + acn.eps)[None, :, None]
            + acn.params["beta"][0][None, :, None]
        )
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_symmetric_midpoint(self):
        acn = AdaptiveContextNorm(1, 2)
        acn.params["means"] = np.array([[-2.0], [2.0]])
        y = acn.forward(np.zeros((1, 1, 1)))
        post = acn._cache["post"]
        np.testing.assert_allclose(post, 0.5, atol=1e-15)
        # xhat is the average of the two component terms
        comp = acn.xhat_components()
        np.testing.assert_allclose(
            acn.xhat(), 0.5 * comp[:, 0, :] + 0.5 * comp[:, 1, :], atol=1e-14
        )

    def test_matches_scalar_recomputation(self):
        rng = make_rng(22)
        acn = AdaptiveContextNorm(2, 3, rng=rng)
        acn.params["logit_lambda"] = 0.5 * rng.standard_normal(3)
        acn.params["log_var"] = 0.3 * rng.standard_normal((3, 2))
        acn.params["gamma"] = rng.uniform(0.5, 1.5, (3, 2))
        acn.params["beta"] = rng.standard_normal((3, 2))
        x = rng.standard_normal((4, 2, 1))
        y = acn.forward(x)
        lam = acn.lambdas
        means = acn.params["means"]
        var = np.exp(acn.params["log_var"])
        for i in range(4):
            obs = x[i, :, 0]
            dens = np.array(
                [
                    lam[k] * np.exp(gaussian_logpdf(obs, means[k], var[k]))
                    for k in range(3)
                ]
            )
            post = dens / dens.sum()
            for c in range(2):
                val = 0.0
                for k in range(3):
                    xhat_k = (
                        (obs[c] - means[k, c])
                        / np.sqrt(var[k, c] + acn.eps)
                        / np.sqrt(lam[k])
                    )
                    val += post[k] * (
                        acn.params["gamma"][k, c] * xhat_k + acn.params["beta"][k, c]
                    )
                np.testing.assert_allclose(y[i, c, 0], val, atol=1e-10)

    def test_posteriors_row_stochastic(self):
        rng = make_rng(23)
        acn = AdaptiveContextNorm(3, 4, rng=rng)
        acn.forward(rng.standard_normal((5, 3, 2)) * 10.0)
        np.testing.assert_allclose(acn._cache["post"].sum(axis=1), 1.0, atol=1e-12)

    def test_train_equals_eval(self):
        rng = make_rng(24)
        acn = AdaptiveContextNorm(2, 2, rng=rng)
        x = rng.standard_normal((3, 2, 2))
        np.testing.assert_array_equal(
            acn.forward(x, training=True), acn.forward(x, training=False)
        )

    def test_permutation_equivariance(self):
        rng = make_rng(25)
        acn = AdaptiveContextNorm(2, 2, rng=make_rng(7))
        x = rng.standard_normal((6, 2, 1))
        perm = rng.permutation(6)
        np.testing.assert_allclose(acn.forward(x)[perm], acn.forward(x[perm]), atol=1e-13)


class TestAdaptiveContextNormBackward:
    def test_zero_upstream(self):
        rng = make_rng(26)
        acn = AdaptiveContextNorm(2, 2, rng=rng)
        acn.forward(rng.standard_normal((3, 2, 2)))
        dx = acn.backward(np.zeros((3, 2, 2)))
        np.testing.assert_array_equal(dx, 0.0)
        for g in acn.grads.values():
            np.testing.assert_array_equal(g, 0.0)

    def test_every_gradient_matches_finite_differences(self):
        rng = make_rng(27)
        acn = AdaptiveContextNorm(3, 2, rng=rng, eps=1e-3)
        acn.params["logit_lambda"] = 0.5 * rng.standard_normal(2)
        acn.params["log_var"] = 0.3 * rng.standard_normal((2, 3))
        acn.params["gamma"] = rng.uniform(0.5, 1.5, (2, 3))
        acn.params["beta"] = rng.standard_normal((2, 3))
        x = rng.standard_normal((4, 3, 2))
        probe = rng.standard_normal((4, 3, 2))
        acn.forward(x)
        dx = acn.backward(probe)
        analytic = {"x": dx, **{n: g.copy() for n, g in acn.grads.items()}}

        def loss(arr):
            return float((acn.forward(arr) * probe).sum())

        assert relative_error(analytic["x"], finite_diff_grad(loss, x.copy(), 1e-5)) < 1e-4
        for name in acn.params:
            fd = finite_diff_grad(lambda _: loss(x), acn.params[name], 1e-5)
            assert relative_error(analytic[name], fd) < 1e-4, name

    def test_dlogit_lambda_in_simplex_tangent_space(self):
        rng = make_rng(28)
        acn = AdaptiveContextNorm(2, 3, rng=rng)
        acn.params["logit_lambda"] = rng.standard_normal(3)
        acn.forward(rng.standard_normal((5, 2, 1)))
        acn.backward(rng.standard_normal((5, 2, 1)))
        assert abs(acn.grads["logit_lambda"].sum()) < 1e-10


class TestSerialization:
    def test_cn_round_trip_bit_exact(self, tmp_path):
        rng = make_rng(29)
        cn = ContextNorm(3, [0.25, 0.75])
        cn.forward(rng.standard_normal((6, 3, 2)), np.array([0, 1, 0, 1, 0, 1]))
        path = tmp_path / "cn.npz"
        save_state(cn, path)
        other = ContextNorm(3, [0.5, 0.5])
        load_state(other, path)
        for name in ("gamma", "beta"):
            np.testing.assert_array_equal(other.params[name], cn.params[name])
        np.testing.assert_array_equal(other.lambdas, cn.lambdas)
        np.testing.assert_array_equal(other.running_mean, cn.running_mean)
        np.testing.assert_array_equal(other.running_var, cn.running_var)
        np.testing.assert_array_equal(other.initialized, cn.initialized)

    def test_cnx_round_trip_bit_exact(self, tmp_path):
        cnx = ContextNormExtended(2, [0.4, 0.6], rng=make_rng(30))
        path = tmp_path / "cnx.npz"
        save_state(cnx, path)
        other = ContextNormExtended(2, [0.5, 0.5])
        load_state(other, path)
        for name in cnx.params:
            np.testing.assert_array_equal(other.params[name], cnx.params[name])

    def test_acn_round_trip_bit_exact(self, tmp_path):
        acn = AdaptiveContextNorm(4, 3, rng=make_rng(31))
        acn.params["logit_lambda"] = make_rng(32).standard_normal(3)
        path = tmp_path / "acn.npz"
        save_state(acn, path)
        other = AdaptiveContextNorm(4, 3)
        load_state(other, path)
        for name in acn.params:
            np.testing.assert_array_equal(other.params[name], acn.params[name])
        rng = make_rng(33)
        x = rng.standard_normal((3, 4, 1))
        np.testing.assert_array_equal(acn.forward(x), other.forward(x))
