"""Tensor core: forward values, gradients vs finite differences, tape semantics."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specklediff import autodiff as ad
from specklediff.autodiff import ShapeError, Tape, Tensor, backward

from helpers import finite_difference, tape_gradients

rng = np.random.default_rng(1234)


def _grad_check(build, shapes, rtol=1e-5, atol=1e-8, step=1e-6):
    """Autodiff gradients of mean-style scalar losses match central differences."""
    arrays = [rng.standard_normal(s) for s in shapes]
    tensors = {f"p{i}": Tensor(a.copy(), requires_grad=True) for i, a in enumerate(arrays)}
    grads = tape_gradients(lambda: build([tensors[f"p{i}"] for i in range(len(shapes))]), tensors)
    for i, a in enumerate(arrays):

        def f(i=i):
            ts = [Tensor(arrays[j]) for j in range(len(arrays))]
            return float(build(ts).data)

        fd = finite_difference(f, arrays[i], step=step)
        np.testing.assert_allclose(grads[f"p{i}"], fd, rtol=rtol, atol=atol)


class TestTensor:
    def test_shape_data_consistency(self):
        t = Tensor(np.zeros((2, 3)))
        assert t.shape == (2, 3) and t.size == 6

    def test_rejects_zero_dims(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_default_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32


class TestTapeSemantics:
    def test_sum_of_squares_gradient(self):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        grads = tape_gradients(lambda: ad.sum_all(ad.mul(x, x)), {"x": x})
        np.testing.assert_allclose(grads["x"], 2 * x.data, rtol=1e-12)

    def test_nonparticipating_parameter_gets_zeros(self):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        y = Tensor(rng.standard_normal(4), requires_grad=True)
        grads = tape_gradients(lambda: ad.mean_all(ad.mul(x, x)), {"x": x, "y": y})
        assert np.all(grads["y"] == 0)

    def test_detached_graph_all_zero(self):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        const = Tensor(rng.standard_normal(4))
        grads = tape_gradients(lambda: ad.mean_all(ad.mul(const, const)), {"x": x})
        assert np.all(grads["x"] == 0)

    def test_loss_must_be_scalar(self):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        with Tape(watch={"x": x}) as tape:
            out = ad.mul(x, x)
        with pytest.raises(ShapeError, match="scalar"):
            backward(tape, out)

    def test_each_record_visited_once_in_reverse(self):
        # The tape must grow by one record per primitive and replay cleanly
        # even when one tensor fans out to several consumers.
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        with Tape(watch={"x": x}) as tape:
            y = ad.mul(x, x)
            loss = ad.sum_all(ad.add(y, y))
        assert len(tape) == 3
        grads = backward(tape, loss)
        np.testing.assert_allclose(grads["x"].data, 4 * x.data, rtol=1e-12)

    def test_tapes_do_not_nest(self):
        with Tape():
            with pytest.raises(RuntimeError):
                with Tape():
                    pass

    def test_no_recording_without_tape(self):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        tape = Tape(watch={"x": x})
        ad.mul(x, x)  # outside the context: nothing recorded
        assert len(tape) == 0


class TestConv2d:
    def test_identity_kernel(self):
        x = rng.standard_normal((1, 1, 5, 5))
        w = np.ones((1, 1, 1, 1))
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_3x3_padded(self):
        x = np.ones((1, 1, 3, 3))
        w = np.ones((1, 1, 3, 3))
        out = ad.conv2d(Tensor(x), Tensor(w), padding=1).data[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == 4.0 and out[2, 2] == 4.0

    def test_strided_output_shape(self):
        out = ad.conv2d(
            Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((4, 2, 3, 3))), stride=2, padding=1
        )
        assert out.shape == (1, 4, 4, 4)

    def test_channel_mismatch_names_axes(self):
        with pytest.raises(ShapeError, match="channel"):
            ad.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError, match="does not fit"):
            ad.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 5, 5))))

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 0, 1), (3, 2, 5)])
    def test_gradients_match_finite_differences(self, stride, padding, k):
        _grad_check(
            lambda ts: ad.mean_all(
                ad.mul(
                    ad.conv2d(ts[0], ts[1], ts[2], stride=stride, padding=padding),
                    ad.conv2d(ts[0], ts[1], ts[2], stride=stride, padding=padding),
                )
            ),
            [(2, 3, 9, 9), (4, 3, k, k), (4,)],
        )

    def test_linear_in_input(self):
        # conv(a x + b y) == a conv(x) + b conv(y) for bias-free kernels
        w = Tensor(rng.standard_normal((3, 2, 3, 3)))
        x = rng.standard_normal((2, 2, 8, 8))
        y = rng.standard_normal((2, 2, 8, 8))
        a, b = 1.7, -0.3
        lhs = ad.conv2d(Tensor(a * x + b * y), w, padding=1).data
        rhs = a * ad.conv2d(Tensor(x), w, padding=1).data + b * ad.conv2d(Tensor(y), w, padding=1).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(
        n=st.integers(1, 3),
        c=st.integers(1, 4),
        o=st.integers(1, 4),
        h=st.integers(3, 10),
        k=st.integers(1, 3),
        stride=st.integers(1, 2),
        padding=st.integers(0, 2),
    )
    def test_shape_contract(self, n, c, o, h, k, stride, padding):
        if h + 2 * padding < k:
            return
        out = ad.conv2d(
            Tensor(np.zeros((n, c, h, h))), Tensor(np.zeros((o, c, k, k))), stride=stride, padding=padding
        )
        expect = (h + 2 * padding - k) // stride + 1
        assert out.shape == (n, o, expect, expect)


class TestOtherPrimitives:
    def test_linear_gradients(self):
        _grad_check(lambda ts: ad.mean_all(ad.linear(ts[0], ts[1], ts[2])), [(5, 7), (7, 3), (3,)])

    def test_group_norm_gradients(self):
        _grad_check(
            lambda ts: ad.mean_all(
                ad.mul(g := ad.group_norm(ts[0], ts[1], ts[2], 2), g)
            ),
            [(2, 4, 3, 3), (4,), (4,)],
            rtol=1e-4,
            atol=1e-7,
        )

    def test_group_norm_normalizes(self):
        x = Tensor(rng.standard_normal((3, 8, 5, 5)))
        out = ad.group_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), groups=4).data
        grouped = out.reshape(3, 4, -1)
        np.testing.assert_allclose(grouped.mean(axis=2), 0, atol=1e-6)
        np.testing.assert_allclose(grouped.var(axis=2), 1, atol=1e-4)

    def test_silu_gradients(self):
        _grad_check(lambda ts: ad.mean_all(ad.silu(ts[0])), [(4, 6)])

    def test_softmax_rows_sum_to_one(self):
        s = ad.softmax(Tensor(rng.standard_normal((3, 4, 7)))).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=1e-6)

    def test_softmax_gradients(self):
        _grad_check(
            lambda ts: ad.mean_all(ad.mul(ad.softmax(ts[0]), ts[1])), [(3, 5, 5), (3, 5, 5)]
        )

    def test_attention_composite_gradients(self):
        def build(ts):
            q = ad.transpose_last2(ts[0])
            attn = ad.softmax(ad.scale(ad.bmm(q, ts[0]), 0.5))
            return ad.mean_all(ad.bmm(ts[0], ad.transpose_last2(attn)))

        _grad_check(build, [(2, 3, 6)])

    def test_upsample_and_bias_gradients(self):
        _grad_check(
            lambda ts: ad.mean_all(ad.mul(ad.upsample_nearest2(ts[0]), ts[1])),
            [(2, 3, 4, 4), (2, 3, 8, 8)],
        )
        _grad_check(
            lambda ts: ad.mean_all(ad.mul(ad.add_channel_bias(ts[0], ts[1]), ts[0])),
            [(2, 3, 4, 4), (2, 3)],
        )

    def test_concat_split_roundtrip(self):
        x = Tensor(rng.standard_normal((2, 5, 3, 3)))
        a, b = ad.split_channels(x, (2, 3))
        back = ad.concat_channels([a, b])
        np.testing.assert_array_equal(back.data, x.data)

    def test_elementwise_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_single_precision_gradients_loose_tolerance(self):
        # float32 pipeline: gradients still track finite differences at 1e-3.
        x64 = rng.standard_normal((2, 3, 6, 6))
        w64 = rng.standard_normal((4, 3, 3, 3))
        x = Tensor(x64.astype(np.float32), requires_grad=True)
        w = Tensor(w64.astype(np.float32), requires_grad=True)
        grads = tape_gradients(
            lambda: ad.mean_all(ad.mul(c := ad.conv2d(x, w, padding=1), c)), {"x": x, "w": w}
        )

        def f():
            c = ad.conv2d(Tensor(x64), Tensor(w64), padding=1)
            return float(ad.mean_all(ad.mul(c, c)).data)

        fd = finite_difference(f, w64, step=1e-5)
        np.testing.assert_allclose(grads["w"], fd, rtol=1e-3, atol=1e-5)
