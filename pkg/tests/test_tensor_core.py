import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avword.tensor import (
    BatchNormState,
    ConvSpec,
    NondeterministicOpError,
    NonFiniteError,
    Tensor,
    batchnorm,
    conv3d,
    dropout_shared_mask,
    finite_diff_check,
    linear,
    maxpool3d,
    softmax_cross_entropy,
)
from avword.tensor import tnsr


def conv3d_oracle(x, w, b, stride, padding):
    """Direct nested-loop correlation, independent of the im2col kernel."""
    n, c, t, h, wd = x.shape
    o, _, kt, kh, kw = w.shape
    st_, sh, sw = stride
    pt, ph, pw = padding
    xp = np.zeros((n, c, t + 2 * pt, h + 2 * ph, wd + 2 * pw))
    xp[:, :, pt : pt + t, ph : ph + h, pw : pw + wd] = x
    to = (t + 2 * pt - kt) // st_ + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, o, to, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(to):
                for j in range(ho):
                    for k in range(wo):
                        acc = b[oc] if b is not None else 0.0
                        for ic in range(c):
                            for a in range(kt):
                                for p in range(kh):
                                    for q in range(kw):
                                        acc += w[oc, ic, a, p, q] * xp[bi, ic, i * st_ + a, j * sh + p, k * sw + q]
                        out[bi, oc, i, j, k] = acc
    return out


class TestConv3d:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 3, 5, 5))
        w = rng.standard_normal((2, 2, 1, 3, 3))
        b = rng.standard_normal(2)
        spec = ConvSpec(2, 2, (1, 3, 3))
        got = conv3d(Tensor(x), spec, Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(got, conv3d_oracle(x, w, b, (1, 1, 1), (0, 0, 0)), atol=1e-6, rtol=0)

    @settings(max_examples=25, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        c=st.integers(1, 3),
        o=st.integers(1, 3),
        t=st.integers(1, 4),
        hw=st.integers(3, 7),
        k=st.sampled_from([(1, 1, 1), (1, 3, 3), (2, 3, 2), (3, 3, 3)]),
        s=st.sampled_from([(1, 1, 1), (1, 2, 2), (2, 1, 2)]),
        pad=st.booleans(),
    )
    def test_oracle_random_shapes(self, seed, c, o, t, hw, k, s, pad):
        padding = tuple(kk // 2 for kk in k) if pad else (0, 0, 0)
        if any(kk > n + 2 * p for kk, n, p in zip(k, (t, hw, hw), padding)):
            return
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, c, t, hw, hw))
        w = rng.standard_normal((o, c) + k)
        b = rng.standard_normal(o)
        spec = ConvSpec(o, c, k, s, padding)
        got = conv3d(Tensor(x), spec, Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(got, conv3d_oracle(x, w, b, s, padding), atol=1e-6, rtol=0)

    def test_stem_geometry(self):
        spec = ConvSpec(64, 1, (5, 7, 7), (1, 2, 2), (2, 3, 3))
        assert spec.output_extents((29, 112, 112)) == (29, 56, 56)

    def test_zero_weights_give_zero_output(self):
        rng = np.random.default_rng(1)
        spec = ConvSpec(3, 2, (1, 3, 3), padding=(0, 1, 1))
        out = conv3d(Tensor(rng.standard_normal((1, 2, 2, 4, 4))), spec, Tensor(np.zeros(spec.weight_shape)), Tensor(np.zeros(3)))
        assert not out.data.any()

    def test_channel_mismatch_names_axis(self):
        spec = ConvSpec(2, 3, (1, 3, 3))
        with pytest.raises(ValueError, match="channel axis"):
            conv3d(Tensor(np.zeros((1, 2, 1, 4, 4))), spec, Tensor(np.zeros(spec.weight_shape)), Tensor(np.zeros(2)))

    def test_kernel_larger_than_axis(self):
        spec = ConvSpec(1, 1, (3, 3, 3))
        with pytest.raises(ValueError, match="axis t"):
            conv3d(Tensor(np.zeros((1, 1, 2, 4, 4))), spec, Tensor(np.zeros(spec.weight_shape)), Tensor(np.zeros(1)))

    def test_non_finite_input_rejected(self):
        spec = ConvSpec(1, 1, (1, 1, 1))
        x = np.zeros((1, 1, 1, 2, 2))
        x[0, 0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteError):
            conv3d(Tensor(x), spec, Tensor(np.ones(spec.weight_shape)), Tensor(np.zeros(1)))

    def test_padding_must_be_below_kernel(self):
        with pytest.raises(ValueError):
            ConvSpec(1, 1, (1, 3, 3), padding=(1, 1, 1))


class TestMaxPool:
    def test_hand_enumerated_windows(self):
        x = np.arange(1, 17, dtype=np.float64).reshape(1, 1, 1, 4, 4)
        out = maxpool3d(Tensor(x), (1, 2, 2), (1, 2, 2)).data
        np.testing.assert_array_equal(out[0, 0, 0], [[6, 8], [14, 16]])

    def test_stem_pool_shape(self):
        x = Tensor(np.zeros((1, 2, 3, 56, 56), dtype=np.float32))
        assert maxpool3d(x, (1, 3, 3), (1, 2, 2), (0, 1, 1)).shape == (1, 2, 3, 28, 28)

    def test_constant_input(self):
        x = Tensor(np.full((1, 1, 2, 5, 5), 3.5))
        out = maxpool3d(x, (1, 3, 3), (1, 2, 2), (0, 1, 1))
        assert np.all(out.data == 3.5)

    def test_tie_goes_to_first_index(self):
        x = Tensor(np.ones((1, 1, 1, 2, 2)), requires_grad=True)
        maxpool3d(x, (1, 2, 2), (1, 2, 2)).sum().backward()
        np.testing.assert_array_equal(x.grad[0, 0, 0], [[1, 0], [0, 0]])

    def test_kernel_too_large(self):
        with pytest.raises(ValueError):
            maxpool3d(Tensor(np.zeros((1, 1, 1, 2, 2))), (1, 3, 3), (1, 1, 1))


class TestBatchNorm:
    def test_train_mode_standardizes(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(4.0, 3.0, (8, 10, 5)))
        out = batchnorm(x, BatchNormState(5, dtype=np.float64), feature_axis=-1).data
        np.testing.assert_allclose(out.mean(axis=(0, 1)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 1)), 1.0, atol=1e-4)

    def test_eval_mode_identity(self):
        x = np.random.default_rng(4).standard_normal((4, 3))
        state = BatchNormState(3, mode="eval", dtype=np.float64)
        out = batchnorm(Tensor(x), state).data
        np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-12)

    def test_two_values_closed_form(self):
        out = batchnorm(Tensor(np.array([[1.0], [3.0]])), BatchNormState(1, dtype=np.float64)).data
        np.testing.assert_allclose(out[:, 0], np.array([-1.0, 1.0]) / np.sqrt(1 + 1e-5), rtol=1e-12)

    def test_running_stats_update(self):
        state = BatchNormState(1, dtype=np.float64)
        batchnorm(Tensor(np.array([[1.0], [3.0]])), state)
        np.testing.assert_allclose(state.running_mean, [0.2])
        np.testing.assert_allclose(state.running_var, [0.9 + 0.1 * 2.0])

    def test_mask_excludes_padding(self):
        x = np.array([[[1.0], [3.0], [100.0]]])
        mask = np.array([[True, True, False]])
        out = batchnorm(Tensor(x), BatchNormState(1, dtype=np.float64), mask=mask).data
        np.testing.assert_allclose(out[0, :2, 0], np.array([-1.0, 1.0]) / np.sqrt(1 + 1e-5))

    def test_feature_mismatch(self):
        with pytest.raises(ValueError):
            batchnorm(Tensor(np.zeros((2, 3))), BatchNormState(4))


class TestLinear:
    def test_identity(self):
        x = np.random.default_rng(5).standard_normal((3, 4))
        out = linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data
        np.testing.assert_array_equal(out, x)

    def test_hand_multiply(self):
        out = linear(Tensor(np.array([1.0, 2.0])), Tensor(np.array([[1.0, 1.0], [0.0, 1.0]])), Tensor(np.array([0.0, 1.0])))
        np.testing.assert_allclose(out.data, [3.0, 3.0])

    def test_fc_head_width(self):
        frame = Tensor(np.zeros((512, 4, 4), dtype=np.float32)).reshape(1, 8192)
        out = linear(frame, Tensor(np.zeros((256, 8192), dtype=np.float32)), Tensor(np.zeros(256, dtype=np.float32)))
        assert out.shape == (1, 256)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            linear(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))))


class TestSoftmaxCrossEntropy:
    def test_uniform_500(self):
        loss, post = softmax_cross_entropy(Tensor(np.zeros((2, 500))), [3, 499])
        assert loss.item() == pytest.approx(math.log(500), abs=1e-9)
        np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-6)

    def test_saturation(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 1000.0
        loss, _ = softmax_cross_entropy(Tensor(logits), [2])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_two_class_value(self):
        # -log softmax by direct evaluation: label 0 -> ln(1+e), label 1 -> ln(1+e) - 1
        loss0, _ = softmax_cross_entropy(Tensor(np.array([[1.0, 2.0]])), [0])
        loss1, _ = softmax_cross_entropy(Tensor(np.array([[1.0, 2.0]])), [1])
        assert loss0.item() == pytest.approx(math.log(1 + math.e), abs=1e-12)
        assert loss1.item() == pytest.approx(math.log(1 + math.e) - 1, abs=1e-12)
        assert loss1.item() == pytest.approx(0.3133, abs=1e-4)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), k=st.integers(2, 40), n=st.integers(1, 8))
    def test_posteriors_normalized(self, seed, k, n):
        logits = np.random.default_rng(seed).uniform(-50, 50, (n, k))
        _, post = softmax_cross_entropy(Tensor(logits), np.zeros(n, dtype=int))
        np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


class TestSharedMaskDropout:
    def test_p_zero_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal((5, 4)))
        assert dropout_shared_mask(x, 0.0, np.random.default_rng(1), "train") is x
        assert dropout_shared_mask(x, 0.0, None, "eval") is x

    def test_eval_bitwise_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal((5, 4)))
        out = dropout_shared_mask(x, 0.3, np.random.default_rng(1), "eval")
        assert out.data.tobytes() == x.data.tobytes()

    def test_mask_constant_over_time(self):
        x = Tensor(np.ones((29, 64)))
        out = dropout_shared_mask(x, 0.30, np.random.default_rng(2), "train").data
        zeroed = out == 0
        assert (zeroed == zeroed[0]).all()
        assert zeroed[0].any() and not zeroed[0].all()
        np.testing.assert_allclose(out[~zeroed], 1 / 0.7)

    def test_batched_masks_differ_per_sequence(self):
        x = Tensor(np.ones((3, 7, 50)))
        out = dropout_shared_mask(x, 0.5, np.random.default_rng(3), "train").data
        for n in range(3):
            assert (out[n] == out[n, 0]).all()
        assert not np.array_equal(out[0, 0], out[1, 0])

    def test_monte_carlo_rate(self):
        x = Tensor(np.ones((100_000, 1, 4)))
        out = dropout_shared_mask(x, 0.30, np.random.default_rng(4), "train").data
        rate = (out[:, 0, :] == 0).mean(axis=0)
        assert np.all((rate >= 0.295) & (rate <= 0.305))

    def test_invalid_p(self):
        with pytest.raises(ValueError):
            dropout_shared_mask(Tensor(np.ones((2, 2))), 1.0, np.random.default_rng(0))


class TestFiniteDiff:
    def test_linear_is_near_exact(self):
        rng = np.random.default_rng(0)
        x, w, b = (Tensor(rng.standard_normal(s)) for s in [(3, 4), (2, 4), (2,)])
        assert finite_diff_check(lambda x, w, b: linear(x, w, b), [x, w, b], 1e-5) < 1e-7

    @pytest.mark.parametrize("seed", range(3))
    def test_batchnorm_with_padding_mask(self, seed):
        rng = np.random.default_rng(seed)
        state = BatchNormState(2, dtype=np.float64)
        x = Tensor(rng.standard_normal((3, 4, 2)))
        mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0], [1, 1, 1, 0]], dtype=bool)
        assert finite_diff_check(lambda x, g, b: batchnorm(x, state, -1, mask), [x, state.gamma, state.beta]) < 1e-4

    def test_conv3d(self):
        rng = np.random.default_rng(1)
        spec = ConvSpec(2, 2, (2, 3, 3), (1, 1, 1), (1, 1, 1))
        x = Tensor(rng.standard_normal((1, 2, 3, 4, 4)))
        w = Tensor(rng.standard_normal(spec.weight_shape))
        b = Tensor(rng.standard_normal(2))
        assert finite_diff_check(lambda x, w, b: conv3d(x, spec, w, b), [x, w, b], 1e-5) < 1e-4

    def test_nondeterministic_op_rejected(self):
        rng = np.random.default_rng(0)
        x = Tensor(np.ones((4, 3)))
        with pytest.raises(NondeterministicOpError):
            finite_diff_check(lambda x: dropout_shared_mask(x, 0.5, rng, "train"), [x])

    def test_requires_float64(self):
        with pytest.raises(TypeError):
            finite_diff_check(lambda x: x, [Tensor(np.ones(2, dtype=np.float32))])


class TestDeterminism:
    def test_forward_backward_bitwise_repeatable(self):
        def run():
            rng = np.random.default_rng(11)
            spec = ConvSpec(3, 1, (3, 3, 3), padding=(1, 1, 1))
            x = Tensor(rng.standard_normal((2, 1, 4, 6, 6)).astype(np.float32))
            w = Tensor(rng.standard_normal(spec.weight_shape).astype(np.float32), requires_grad=True)
            b = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
            y = maxpool3d(conv3d(x, spec, w, b), (1, 2, 2), (1, 2, 2))
            loss, _ = softmax_cross_entropy(y.reshape(2, -1), [0, 1])
            loss.backward()
            return y.data.tobytes() + w.grad.tobytes()

        assert run() == run()


class TestTnsr:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8])
    def test_round_trip(self, dtype, tmp_path):
        arr = (np.random.default_rng(0).random((2, 3, 4)) * 200).astype(dtype)
        tnsr.save(tmp_path / "a.tnsr", arr)
        back = tnsr.load(tmp_path / "a.tnsr")
        assert back.dtype == arr.dtype and back.tobytes() == arr.tobytes()

    def test_header_layout(self):
        buf = tnsr.encode(np.zeros((2, 3), dtype=np.uint8))
        assert buf[:4] == b"TNSR" and buf[4] == 1 and buf[5] == 2 and buf[6] == 2
        assert int.from_bytes(buf[7:15], "little") == 2 and int.from_bytes(buf[15:23], "little") == 3
        assert len(buf) == 23 + 6

    def test_malformed_reports_offset(self):
        buf = bytearray(tnsr.encode(np.zeros(4, dtype=np.float32)))
        with pytest.raises(tnsr.TnsrFormatError, match="byte offset 0"):
            tnsr.decode(b"XXXX" + bytes(buf[4:]))
        with pytest.raises(tnsr.TnsrFormatError, match="byte offset 15"):
            tnsr.decode(bytes(buf[:-1]))
        buf[5] = 9
        with pytest.raises(tnsr.TnsrFormatError, match="byte offset 5"):
            tnsr.decode(bytes(buf))
