"""Tests for the reverse-mode autodiff core."""

import numpy as np
import pytest

import flowpick.autodiff as ad


def rng_for(seed):
    return np.random.default_rng(seed)


def scalar_loss(t):
    return ad.tsum(ad.square(t))


class TestForward:
    def test_add_matches_numpy(self):
        a = ad.Tensor(np.array([1.0, 2.0]))
        b = ad.Tensor(np.array([10.0, -1.0]))
        np.testing.assert_array_equal(ad.add(a, b).data, [11.0, 1.0])

    def test_matmul_matches_numpy(self):
        rng = rng_for(0)
        x, y = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        out = ad.matmul(ad.Tensor(x), ad.Tensor(y))
        np.testing.assert_allclose(out.data, x @ y, rtol=0, atol=0)

    def test_softplus_zero(self):
        # softplus(0) = ln 2
        out = ad.softplus(ad.Tensor(np.array([0.0])))
        assert out.data[0] == pytest.approx(0.6931471805599453, abs=1e-15)

    def test_softplus_stable_at_extremes(self):
        x = ad.Tensor(np.array([-1000.0, 1000.0]))
        out = ad.softplus(x).data
        assert out[0] == 0.0
        assert out[1] == 1000.0
        assert np.isfinite(out).all()

    def test_softmax_rows_sum_to_one(self):
        x = ad.Tensor(rng_for(1).standard_normal((6, 9)) * 30)
        s = ad.softmax(x).data
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(6), atol=1e-14)

    def test_layernorm_zero_mean_unit_var(self):
        x = ad.Tensor(rng_for(2).standard_normal((4, 16)))
        y = ad.layernorm(x).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)

    def test_clip_and_extrema(self):
        x = ad.Tensor(np.array([-2.0, 0.5, 3.0]))
        np.testing.assert_array_equal(ad.clip(x, -1.0, 1.0).data, [-1.0, 0.5, 1.0])

    def test_mismatched_shapes_raise(self):
        a = ad.Tensor(np.zeros((2, 3)))
        b = ad.Tensor(np.zeros((4, 5)))
        with pytest.raises(ad.ShapeError):
            ad.add(a, b)

    def test_float64_everywhere(self):
        x = ad.Tensor(np.array([1, 2, 3], dtype=np.int64))
        assert x.data.dtype == np.float64
        assert ad.tanh(x).data.dtype == np.float64


class TestBackward:
    def test_square_gradient(self):
        x = ad.Tensor(np.array([3.0]), requires_grad=True)
        with ad.tape() as tp:
            loss = ad.tsum(ad.square(x))
        tp.backward(loss)
        assert x.grad[0] == pytest.approx(6.0, abs=1e-12)

    def test_grad_accumulates_over_reuse(self):
        x = ad.Tensor(np.array([2.0]), requires_grad=True)
        with ad.tape() as tp:
            loss = ad.tsum(ad.mul(x, x))  # d/dx x^2 via product rule
        tp.backward(loss)
        assert x.grad[0] == pytest.approx(4.0, abs=1e-12)

    def test_broadcast_bias_gradient_shape(self):
        w = ad.Tensor(rng_for(3).standard_normal((5, 4)), requires_grad=True)
        b = ad.Tensor(np.zeros(4), requires_grad=True)
        with ad.tape() as tp:
            loss = scalar_loss(ad.add(w, b))
        tp.backward(loss)
        assert b.grad.shape == (4,)
        np.testing.assert_allclose(b.grad, 2 * w.data.sum(axis=0), atol=1e-12)

    def test_no_tape_means_no_graph(self):
        x = ad.Tensor(np.array([1.0]), requires_grad=True)
        y = ad.tanh(x)
        assert y.data is not None
        # nothing recorded; a later tape sees an empty graph
        with ad.tape() as tp:
            loss = ad.tsum(ad.square(x))
        tp.backward(loss)
        assert x.grad is not None

    def test_backward_requires_scalar(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with ad.tape() as tp:
            y = ad.square(x)
        with pytest.raises(ValueError):
            tp.backward(y)

    @pytest.mark.parametrize("op", [ad.tanh, ad.exp, ad.softplus, ad.square])
    def test_unary_finite_difference(self, op):
        rng = rng_for(7)
        x = ad.Tensor(rng.standard_normal((3, 4)) * 0.5, requires_grad=True,
                      name="x")

        def f():
            return scalar_loss(op(x))

        err = ad.finite_diff_check(f, {"x": x}, rng=rng)
        assert err < 1e-4

    def test_log_finite_difference(self):
        rng = rng_for(8)
        x = ad.Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True, name="x")
        err = ad.finite_diff_check(lambda: scalar_loss(ad.log(x)), {"x": x},
                                   rng=rng)
        assert err < 1e-6

    @pytest.mark.parametrize("op", [ad.layernorm, ad.softmax])
    def test_normalizing_ops_finite_difference(self, op):
        rng = rng_for(9)
        x = ad.Tensor(rng.standard_normal((2, 8)), requires_grad=True, name="x")
        err = ad.finite_diff_check(lambda: scalar_loss(op(x)), {"x": x}, rng=rng)
        assert err < 1e-3

    def test_matmul_chain_finite_difference(self):
        rng = rng_for(10)
        w1 = ad.Tensor(rng.standard_normal((6, 5)) * 0.3, requires_grad=True,
                       name="w1")
        w2 = ad.Tensor(rng.standard_normal((5, 2)) * 0.3, requires_grad=True,
                       name="w2")
        x = rng.standard_normal((4, 6))

        def f():
            return scalar_loss(ad.matmul(ad.tanh(ad.matmul(ad.Tensor(x), w1)), w2))

        err = ad.finite_diff_check(f, {"w1": w1, "w2": w2}, rng=rng)
        assert err < 1e-6

    def test_concat_slice_roundtrip_gradient(self):
        rng = rng_for(11)
        a = ad.Tensor(rng.standard_normal((2, 3)), requires_grad=True, name="a")
        b = ad.Tensor(rng.standard_normal((2, 4)), requires_grad=True, name="b")

        def f():
            cat = ad.concat([a, b], axis=-1)
            return scalar_loss(ad.slice_(cat, (slice(None), slice(1, 6))))

        err = ad.finite_diff_check(f, {"a": a, "b": b}, rng=rng)
        assert err < 1e-6


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = rng_for(12)
        params = {f"p{i}": ad.Tensor(rng.standard_normal((i + 1, 3)),
                                     requires_grad=True) for i in range(4)}
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint(str(path), params)
        loaded = ad.load_checkpoint(str(path))
        for name, t in params.items():
            assert loaded[name].tobytes() == t.data.tobytes()

    def test_save_twice_identical_bytes(self, tmp_path):
        params = {"w": ad.Tensor(np.linspace(0, 1, 12).reshape(3, 4),
                                 requires_grad=True)}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ad.save_checkpoint(str(p1), params)
        ad.save_checkpoint(str(p2), params)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_into_rejects_shape_mismatch(self, tmp_path):
        params = {"w": ad.Tensor(np.zeros((2, 2)), requires_grad=True)}
        path = tmp_path / "m.ckpt"
        ad.save_checkpoint(str(path), params)
        other = {"w": ad.Tensor(np.zeros((3, 3)), requires_grad=True)}
        with pytest.raises(ValueError):
            ad.load_into(str(path), other)

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(ValueError):
            ad.load_checkpoint(str(path))


class TestInit:
    def test_glorot_bounds(self):
        rng = rng_for(13)
        w = ad.glorot_uniform(rng, (40, 30))
        limit = np.sqrt(6.0 / (40 + 30))
        assert w.data.shape == (40, 30)
        assert np.abs(w.data).max() <= limit

    def test_zero_grads_clears(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        x.grad = np.ones(3)
        ad.zero_grads({"x": x})
        assert x.grad is None or np.all(x.grad == 0.0)
