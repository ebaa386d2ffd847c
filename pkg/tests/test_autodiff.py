import numpy as np
import pytest

from panseg import autodiff as ad
from panseg.errors import BadCheckpointError, NotScalarLossError, ShapeMismatchError


def param(name, data, trainable=True):
    return ad.Parameter(name, np.asarray(data, dtype=np.float64), trainable=trainable)


def fd_check(build_loss, params, **kw):
    """Run the engine's finite-difference oracle on float64 parameters."""
    return ad.finite_diff_check(build_loss, params, **kw)


class TestElementwise:
    def test_softmax_symmetry(self):
        out = ad.softmax(ad.Tensor([0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = ad.Tensor(rng.normal(size=(5, 7)).astype(np.float32))
        out = ad.softmax(x, axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(5), atol=1e-6)

    def test_matmul_identity(self):
        a = np.random.default_rng(1).normal(size=(4, 4)).astype(np.float32)
        out = ad.matmul(ad.Tensor(np.eye(4, dtype=np.float32)), ad.Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_conv_all_ones_hand_value(self):
        x = ad.Tensor(np.ones((1, 3, 3), dtype=np.float32))
        w = ad.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = ad.conv2d(x, w)
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 9.0

    def test_layer_norm_statistics(self):
        rng = np.random.default_rng(2)
        x = ad.Tensor(rng.normal(2.0, 3.0, size=(10, 16)).astype(np.float32))
        gamma = ad.Tensor(np.ones(16, dtype=np.float32))
        beta = ad.Tensor(np.zeros(16, dtype=np.float32))
        out = ad.layer_norm(x, gamma, beta).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-5
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4

    def test_log_clamps_at_floor(self):
        out = ad.log(ad.Tensor([0.0, 1.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data[1], 0.0)

    def test_upsample2x_hand_values(self):
        x = ad.Tensor(np.array([[[0.0, 1.0]]], dtype=np.float32))
        out = ad.upsample2x(x)
        np.testing.assert_allclose(out.data[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-7)
        np.testing.assert_allclose(out.data[0, 1], [0.0, 0.25, 0.75, 1.0], atol=1e-7)

    def test_upsample2x_matches_geometry_resize(self):
        from panseg import geometry

        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 5, 6)).astype(np.float32)
        ours = ad.upsample2x(ad.Tensor(x)).data
        for c in range(2):
            ref = geometry.resize(x[c], (10, 12), mode="bilinear")
            np.testing.assert_allclose(ours[c], ref, atol=1e-5)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeMismatchError):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))
        with pytest.raises(ShapeMismatchError):
            ad.conv2d(ad.Tensor(np.zeros((2, 4, 4))), ad.Tensor(np.zeros((1, 3, 2, 2))))


class TestBackward:
    def test_grad_of_sum_is_ones(self):
        x = ad.Tensor(np.arange(6.0, dtype=np.float32).reshape(2, 3), requires_grad=True)
        ad.backward(ad.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3), dtype=np.float32))

    def test_grad_of_sum_of_squares(self):
        x = ad.Tensor(np.array([1.0, -2.0, 3.0], dtype=np.float32), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(NotScalarLossError):
            ad.backward(x)

    def test_frozen_parameter_gets_no_grad(self):
        p = ad.Parameter("w", np.ones(3), trainable=False)
        q = ad.Parameter("v", np.ones(3), trainable=True)
        loss = ad.reduce_sum(ad.mul(p.tensor, q.tensor))
        ad.backward(loss)
        assert p.grad is None
        assert q.grad is not None

    def test_no_grad_context_skips_tape(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = ad.reduce_sum(ad.mul(x, x))
        assert y._backward is None and y._parents == ()

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(8, 8)).astype(np.float32)
        w = rng.normal(size=(8, 8)).astype(np.float32)

        def run():
            xt = ad.Tensor(x, requires_grad=True)
            wt = ad.Tensor(w, requires_grad=True)
            loss = ad.reduce_sum(ad.gelu(ad.matmul(xt, wt)))
            ad.backward(loss)
            return loss.data.copy(), xt.grad.copy(), wt.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1.tobytes() == l2.tobytes()
        assert gx1.tobytes() == gx2.tobytes()
        assert gw1.tobytes() == gw2.tobytes()


class TestFiniteDifferences:
    """Every primitive's gradient vs central differences (float64, eps=1e-3)."""

    def test_matmul(self):
        rng = np.random.default_rng(10)
        a = param("a", rng.normal(size=(3, 4)))
        b = param("b", rng.normal(size=(4, 2)))
        err = fd_check(lambda: ad.reduce_sum(ad.gelu(ad.matmul(a.tensor, b.tensor))), [a, b])
        assert err <= 1e-4

    def test_conv2d_stride_padding(self):
        rng = np.random.default_rng(11)
        x = param("x", rng.normal(size=(2, 6, 6)))
        w = param("w", rng.normal(size=(3, 2, 3, 3)))
        b = param("b", rng.normal(size=(3,)))

        def loss():
            out = ad.conv2d(x.tensor, w.tensor, b.tensor, stride=2, padding=1)
            return ad.reduce_sum(ad.mul(out, out))

        assert fd_check(loss, [x, w, b]) <= 1e-4

    def test_softmax(self):
        rng = np.random.default_rng(12)
        x = param("x", rng.normal(size=(4, 5)))
        mask = rng.normal(size=(4, 5))

        def loss():
            return ad.reduce_sum(ad.mul(ad.softmax(x.tensor, axis=1), ad.constant(mask, dtype=np.float64)))

        assert fd_check(loss, [x]) <= 1e-4

    def test_layer_norm(self):
        rng = np.random.default_rng(13)
        x = param("x", rng.normal(size=(6, 8)))
        g = param("g", rng.normal(size=(8,)))
        b = param("b", rng.normal(size=(8,)))

        def loss():
            out = ad.layer_norm(x.tensor, g.tensor, b.tensor)
            return ad.reduce_sum(ad.mul(out, out))

        assert fd_check(loss, [x, g, b]) <= 1e-4

    def test_reductions_and_elementwise(self):
        rng = np.random.default_rng(14)
        x = param("x", rng.normal(size=(5, 7)))
        y = param("y", rng.normal(size=(5, 7)))

        def loss():
            s = ad.add(ad.mul(x.tensor, y.tensor), ad.scale(x.tensor, 0.5))
            m = ad.reduce_mean(ad.relu(s), axis=1)
            return ad.reduce_sum(ad.mul(m, m))

        assert fd_check(loss, [x, y]) <= 1e-4

    def test_gelu_log_sqrt(self):
        rng = np.random.default_rng(15)
        x = param("x", np.abs(rng.normal(size=(6,))) + 0.5)

        def loss():
            return ad.reduce_sum(ad.log(ad.sqrt(ad.gelu(x.tensor))))

        assert fd_check(loss, [x]) <= 1e-4

    def test_upsample_concat_slice_transpose(self):
        rng = np.random.default_rng(16)
        x = param("x", rng.normal(size=(2, 3, 4)))
        y = param("y", rng.normal(size=(2, 6, 8)))

        def loss():
            up = ad.upsample2x(x.tensor)
            cat = ad.concat([up, y.tensor], axis=0)
            part = ad.slice_axis(cat, 0, 1, 4)
            flat = ad.reshape(ad.transpose(part, (1, 0, 2)), (6, 24))
            return ad.reduce_sum(ad.mul(flat, flat))

        assert fd_check(loss, [x, y]) <= 1e-4

    def test_softmax_embedding_add_chain(self):
        rng = np.random.default_rng(17)
        x = param("x", rng.normal(size=(5, 6)))
        table = rng.normal(size=(5, 6))

        def loss():
            return ad.reduce_sum(ad.mul(ad.softmax(ad.embedding_add(x.tensor, table), axis=1), ad.constant(table, dtype=np.float64)))

        assert fd_check(loss, [x]) <= 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(20)
        arrays = {
            "enc.w": rng.normal(size=(3, 4, 2, 2)).astype(np.float32),
            "enc.b": rng.normal(size=(3,)).astype(np.float32),
            "scalar": np.float32(1.5).reshape(()),
        }
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint(path, arrays)
        loaded = ad.load_checkpoint(path)
        assert set(loaded) == set(arrays)
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], np.asarray(arrays[k], dtype=np.float32))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(BadCheckpointError):
            ad.load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint(path, {"w": np.ones((4, 4), dtype=np.float32)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(BadCheckpointError):
            ad.load_checkpoint(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(BadCheckpointError):
            ad.load_checkpoint(tmp_path / "nope.ckpt")
