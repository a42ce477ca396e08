import numpy as np
import pytest

from trustquant import qlinear as ql
from trustquant.hadamard import HadamardPlan
from trustquant.quantizer import QuantConfig


def dense_sylvester(n):
    h = np.array([[1.0]])
    while h.shape[0] < n:
        h = np.vstack([np.hstack([h, h]), np.hstack([h, -h])])
    return h / np.sqrt(n)


@pytest.fixture()
def operands():
    rng = np.random.default_rng(31)
    x = rng.standard_normal((12, 16)).astype(np.float64)
    w = rng.standard_normal((10, 16)).astype(np.float64)
    return x, w


class TestForward:
    def test_format_none_is_exact_dense(self, operands, alpha_table):
        x, w = operands
        cfg = QuantConfig(format="none", hadamard=False)
        y, ctx = ql.forward(x, w, cfg, alpha_table)
        assert np.array_equal(y, x @ w.T)
        assert np.all(ctx.mask_x) and np.all(ctx.mask_w)

    def test_hadamard_only_preserves_product(self, alpha_table):
        rng = np.random.default_rng(32)
        x = rng.standard_normal((32, 64)).astype(np.float32)
        w = rng.standard_normal((16, 64)).astype(np.float32)
        cfg = QuantConfig(format="none", hadamard=True)
        y, _ = ql.forward(x, w, cfg, alpha_table)
        exact = x @ w.T
        assert np.linalg.norm(y - exact) / np.linalg.norm(exact) < 1e-4

    def test_8bit_quantization_noise_is_small(self, alpha_table):
        rng = np.random.default_rng(33)
        x = rng.standard_normal((32, 64)).astype(np.float32)
        w = rng.standard_normal((16, 64)).astype(np.float32)
        y, _ = ql.forward(x, w, QuantConfig(format="int8"), alpha_table)
        exact = x @ w.T
        assert np.linalg.norm(y - exact) / np.linalg.norm(exact) < 0.05

    def test_weight_only_skips_activation_projection(self, operands, alpha_table):
        x, w = operands
        cfg = QuantConfig(format="int4", hadamard=False, weight_only=True)
        y, ctx = ql.forward(x, w, cfg, alpha_table)
        assert np.array_equal(ctx.x_hat_h, x)
        assert np.all(ctx.mask_x)
        assert not np.array_equal(ctx.w_hat_h, w)

    def test_shape_checks(self, alpha_table):
        with pytest.raises(ValueError, match="inner dimensions"):
            ql.forward(np.ones((2, 3)), np.ones((4, 5)), QuantConfig(), alpha_table)
        with pytest.raises(ValueError, match="plan length"):
            ql.forward(
                np.ones((2, 8)), np.ones((4, 8)), QuantConfig(), alpha_table,
                plan=HadamardPlan(16),
            )

    def test_context_shapes(self, operands, alpha_table):
        x, w = operands
        _, ctx = ql.forward(x, w, QuantConfig(format="int4"), alpha_table)
        assert ctx.x_hat_h.shape == x.shape
        assert ctx.w_hat_h.shape == w.shape
        assert ctx.mask_x.shape == x.shape and ctx.mask_x.dtype == bool
        assert ctx.mask_w.shape == w.shape and ctx.mask_w.dtype == bool


class TestBackward:
    def test_all_true_masks_equal_ste(self, operands, alpha_table):
        x, w = operands
        cfg = QuantConfig(format="int8", hadamard=False)
        y, ctx = ql.forward(x, w, cfg, alpha_table)
        gy = np.random.default_rng(34).standard_normal(y.shape)
        ctx.mask_x = np.ones_like(ctx.mask_x)
        ctx.mask_w = np.ones_like(ctx.mask_w)
        gx_t, gw_t = ql.backward(ctx, gy)
        gx_s, gw_s = ql.ste_backward(ctx, gy)
        assert np.array_equal(gx_t, gx_s)
        assert np.array_equal(gw_t, gw_s)

    def test_all_false_masks_zero_gradients(self, operands, alpha_table):
        x, w = operands
        cfg = QuantConfig(format="int4", hadamard=False)
        y, ctx = ql.forward(x, w, cfg, alpha_table)
        ctx.mask_x = np.zeros_like(ctx.mask_x)
        ctx.mask_w = np.zeros_like(ctx.mask_w)
        gx, gw = ql.backward(ctx, np.ones(y.shape))
        assert np.all(gx == 0)
        assert np.all(gw == 0)

    def test_mask_gradient_consistency_no_ht(self, operands, alpha_table):
        # untrusted coordinates get exactly zero, trusted exactly the STE value
        x, w = operands
        cfg = QuantConfig(format="int2", hadamard=False)
        y, ctx = ql.forward(x * 3, w * 3, cfg, alpha_table)
        gy = np.random.default_rng(35).standard_normal(y.shape)
        gx, gw = ql.backward(ctx, gy)
        gx_ste, gw_ste = ql.ste_backward(ctx, gy)
        assert np.all(gx[~ctx.mask_x] == 0)
        assert np.all(gw[~ctx.mask_w] == 0)
        assert np.array_equal(gx[ctx.mask_x], gx_ste[ctx.mask_x])
        assert np.array_equal(gw[ctx.mask_w], gw_ste[ctx.mask_w])

    def test_ste_differs_exactly_on_masked_coordinates(self, operands, alpha_table):
        x, w = operands
        cfg = QuantConfig(format="int2", hadamard=False)
        y, ctx = ql.forward(x * 3, w * 3, cfg, alpha_table)
        assert not np.all(ctx.mask_w), "fixture should clip some outliers"
        gy = np.random.default_rng(36).standard_normal(y.shape)
        gw_trust = ql.backward(ctx, gy)[1]
        gw_ste = ql.ste_backward(ctx, gy)[1]
        differs = gw_trust != gw_ste
        assert np.array_equal(np.flatnonzero(differs), np.flatnonzero(~ctx.mask_w & (gw_ste != 0)))

    def test_finite_difference_through_ht_only_path(self, alpha_table):
        rng = np.random.default_rng(37)
        x = rng.standard_normal((3, 8))
        w = rng.standard_normal((4, 8))
        probe = rng.standard_normal((3, 4))
        cfg = QuantConfig(format="none", hadamard=True)

        def scalar(xv, wv):
            y, _ = ql.forward(xv, wv, cfg, alpha_table)
            return float((y * probe).sum())

        y, ctx = ql.forward(x, w, cfg, alpha_table)
        gx, gw = ql.backward(ctx, probe)
        h = 1e-5
        for arr, grad in ((x, gx), (w, gw)):
            fd = np.zeros_like(arr)
            flat, fdf = arr.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = scalar(x, w)
                flat[i] = orig - h
                down = scalar(x, w)
                flat[i] = orig
                fdf[i] = (up - down) / (2 * h)
            denom = max(np.abs(fd).max(), 1e-12)
            assert np.abs(grad - fd).max() / denom < 1e-4

    def test_masked_grad_matches_dense_ht_oracle_k16(self, alpha_table):
        rng = np.random.default_rng(38)
        x = rng.standard_normal((6, 16))
        w = rng.standard_normal((5, 16))
        cfg = QuantConfig(format="int4", hadamard=True)
        y, ctx = ql.forward(x, w, cfg, alpha_table)
        gy = rng.standard_normal(y.shape)
        gx, _ = ql.backward(ctx, gy)
        h16 = dense_sylvester(16)
        want = (ctx.mask_x * (gy @ ctx.w_hat_h)) @ h16.T
        assert np.abs(gx - want).max() < 1e-10

    def test_linear_in_upstream_gradient(self, operands, alpha_table):
        x, w = operands
        cfg = QuantConfig(format="int4")
        y, ctx = ql.forward(x, w, cfg, alpha_table)
        rng = np.random.default_rng(39)
        g1, g2 = rng.standard_normal(y.shape), rng.standard_normal(y.shape)
        a = 2.5
        gx_lhs, gw_lhs = ql.backward(ctx, a * g1 + g2)
        gx1, gw1 = ql.backward(ctx, g1)
        gx2, gw2 = ql.backward(ctx, g2)
        assert np.allclose(gx_lhs, a * gx1 + gx2, rtol=1e-10, atol=1e-12)
        assert np.allclose(gw_lhs, a * gw1 + gw2, rtol=1e-10, atol=1e-12)

    def test_gradient_flows_to_all_weights_with_ht(self, alpha_table):
        # with HT on and at least one trusted coordinate per block, the
        # standard-domain weight gradient has no identically-zero rows
        rng = np.random.default_rng(40)
        x = rng.standard_normal((16, 32))
        w = rng.standard_normal((8, 32))
        cfg = QuantConfig(format="int2", hadamard=True)
        y, ctx = ql.forward(x, w, cfg, alpha_table)
        assert np.all(ctx.mask_w.sum(axis=1) > 0)
        _, gw = ql.backward(ctx, rng.standard_normal(y.shape))
        assert np.all(np.abs(gw).sum(axis=1) > 0)

    def test_upstream_shape_check(self, operands, alpha_table):
        x, w = operands
        _, ctx = ql.forward(x, w, QuantConfig(format="int4"), alpha_table)
        with pytest.raises(ValueError, match="upstream"):
            ql.backward(ctx, np.ones((3, 3)))

    def test_missing_context_rejected(self):
        with pytest.raises(ValueError, match="context"):
            ql.backward(None, np.ones((2, 2)))


class TestTapeIntegration:
    def test_estimator_selection(self, operands, alpha_table):
        from trustquant import autodiff as ad

        x, w = operands
        for estimator in ("trust", "ste"):
            cfg = QuantConfig(format="int2", hadamard=False, estimator=estimator)
            t = ad.Tape()
            nx, nw = t.leaf(x * 3), t.leaf(w * 3)
            node, ctx = ql.qlinear(nx, nw, cfg, alpha_table)
            t.backward(ad.sum_all(node))
            ref = (ql.backward if estimator == "trust" else ql.ste_backward)(
                ctx, np.ones(node.value.shape)
            )
            assert np.array_equal(nx.grad, ref[0])
            assert np.array_equal(nw.grad, ref[1])
