"""Tensor op semantics, gradient correctness and Adam behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from puppetmask import tensor as T


def naive_conv2d(x, w, b, stride):
    """Reference convolution: plain python loops, float64."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    bsz, c, h, w_in = x.shape
    oc, _, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (w_in - kw) // stride + 1
    out = np.zeros((bsz, oc, oh, ow))
    for n in range(bsz):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = float(b[o])
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += x[n, ch, i * stride + p, j * stride + q] * w[o, ch, p, q]
                    out[n, o, i, j] = acc
    return out


class TestForwardOps:
    def test_identity(self):
        x = T.Tensor([1.0, -2.0, 3.5])
        assert np.array_equal(T.add(x, 0.0).data, x.data)

    def test_relu_definition(self):
        out = T.relu(T.Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_conv_1x1_kernel(self):
        # 1x1 conv with weight 2, bias 0 doubles a frame of ones.
        x = T.Tensor(np.ones((1, 1, 2, 2), np.float32))
        w = T.Tensor(np.full((1, 1, 1, 1), 2.0, np.float32))
        b = T.Tensor(np.zeros(1, np.float32))
        out = T.conv2d(x, w, b, stride=1)
        assert np.array_equal(out.data, np.full((1, 1, 2, 2), 2.0, np.float32))

    def test_conv_matches_naive_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=2).data
        want = naive_conv2d(x, w, b, stride=2)
        assert np.allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_conv_shape_mismatch_names_shapes(self):
        x = T.Tensor(np.zeros((1, 3, 8, 8), np.float32))
        w = T.Tensor(np.zeros((4, 2, 3, 3), np.float32))
        b = T.Tensor(np.zeros(4, np.float32))
        with pytest.raises(T.ShapeError, match="conv2d.*3.*2"):
            T.conv2d(x, w, b, 1)

    def test_forward_determinism(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 2, 10, 10)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        a = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 1).data
        bb = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 1).data
        assert np.array_equal(a, bb)


class TestLogSoftmax:
    def test_symmetric_pair(self):
        out = T.log_softmax(T.Tensor([0.0, 0.0]))
        assert np.allclose(out.data, np.log(0.5), atol=1e-7)

    def test_large_logit_stability(self):
        out = T.log_softmax(T.Tensor([1000.0, 0.0])).data
        assert np.isfinite(out).all()
        assert abs(out[0]) < 1e-6
        assert out[1] == pytest.approx(-1000.0, rel=1e-6)

    def test_high_precision_reference(self):
        # Frozen from a 50-digit mpmath evaluation of log softmax([1,2,3]).
        want = [-2.40760596444438, -1.4076059644443804, -0.4076059644443803]
        got = T.log_softmax(T.Tensor([1.0, 2.0, 3.0], dtype=np.float64)).data
        assert np.allclose(got, want, atol=1e-10)

    def test_empty_axis_rejected(self):
        with pytest.raises(T.ShapeError, match="empty action axis"):
            T.log_softmax(T.Tensor(np.zeros((2, 0), np.float32)))

    @given(
        st.lists(
            st.floats(min_value=-30, max_value=30, allow_nan=False),
            min_size=1,
            max_size=8,
        )
    )
    @settings(max_examples=200, deadline=None)
    def test_rows_exponentiate_to_one(self, logits):
        out = T.log_softmax(T.Tensor(logits, dtype=np.float64)).data
        assert abs(np.exp(out).sum() - 1.0) <= 1e-9


class TestBackward:
    def test_identity_gradient(self):
        x = T.Tensor([3.0], requires_grad=True)
        T.mean(x).backward()
        assert np.allclose(x.grad, [1.0])

    def test_relu_subgradient_zero_at_kink(self):
        x = T.Tensor([-1.0, 2.0, 0.0], requires_grad=True)
        out = T.relu(x)
        T.mean(T.scale(out, 3.0)).backward()
        assert np.allclose(x.grad, [0.0, 1.0, 0.0])

    def test_non_scalar_backward_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(T.ShapeError, match="scalar"):
            T.relu(x).backward()

    def test_input_gradients_populated(self):
        x = T.Tensor(np.ones((2, 1, 4, 4), np.float32), requires_grad=True)
        w = T.Tensor(np.ones((1, 1, 2, 2), np.float32), requires_grad=True)
        b = T.Tensor(np.zeros(1, np.float32), requires_grad=True)
        T.mean(T.conv2d(x, w, b, 1)).backward()
        assert x.grad is not None and w.grad is not None and b.grad is not None
        assert x.grad.shape == x.shape

    def test_backward_visits_shared_node_once(self):
        x = T.Tensor([2.0], requires_grad=True)
        y = T.relu(x)
        T.mean(T.add(y, y)).backward()
        assert np.allclose(x.grad, [2.0])


def _op_cases():
    rng = np.random.default_rng(77)
    x34 = rng.standard_normal((3, 4))
    m42 = rng.standard_normal((4, 2))
    return [
        ("relu", lambda t: T.mean(T.relu(t)), rng.standard_normal(7) + 0.05),
        ("exp", lambda t: T.mean(T.exp(t)), rng.standard_normal(5)),
        ("log", lambda t: T.mean(T.log(t)), rng.uniform(0.2, 3.0, 5)),
        ("mul", lambda t: T.mean(T.mul(t, t)), rng.standard_normal(6)),
        ("log_softmax", lambda t: T.mean(T.log_softmax(t)), x34),
        ("l2_norm", lambda t: T.l2_norm(t), rng.standard_normal(8) + 0.3),
        ("clip", lambda t: T.mean(T.clip_range(t, -0.5, 0.5)), rng.uniform(-0.4, 0.4, 6)),
        (
            "matmul",
            lambda t: T.mean(T.matmul(t, T.Tensor(m42))),
            x34,
        ),
        (
            "take_column",
            lambda t: T.mean(T.take_column(t, 1)),
            rng.standard_normal((5, 3)),
        ),
        (
            "take_per_row",
            lambda t: T.mean(T.take_per_row(t, np.array([0, 2, 1]))),
            rng.standard_normal((3, 3)),
        ),
    ]


@pytest.mark.parametrize("name,builder,point", _op_cases(), ids=lambda c: c if isinstance(c, str) else "")
def test_op_gradients_match_finite_differences(name, builder, point):
    point = np.asarray(point, np.float64)

    def f(arr):
        return float(builder(T.Tensor(arr, dtype=np.float64)).item())

    x = T.Tensor(point, dtype=np.float64, requires_grad=True)
    builder(x).backward()
    fd = T.finite_diff_grad(f, point, h=1e-6)
    scale = max(1.0, np.abs(fd).max())
    assert np.abs(x.grad - fd).max() / scale < 1e-6, name


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = T.Tensor([1.0, -2.0], requires_grad=True, name="p")
        opt = T.Adam([p], lr=0.05)
        p.grad = np.zeros(2, np.float32)
        before = p.data.copy()
        opt.step()
        assert np.array_equal(p.data, before)
        assert opt.step_count == 1

    def test_constant_gradient_descends(self):
        p = T.Tensor([0.0], requires_grad=True)
        opt = T.Adam([p], lr=0.01)
        for _ in range(50):
            p.grad = np.array([2.5], np.float32)
            opt.step()
        assert p.data[0] < -0.3  # moved opposite the gradient sign

    def test_first_step_magnitude_is_lr(self):
        # Bias-corrected first step: -lr * 1 / (1 + eps).
        p = T.Tensor([0.0], requires_grad=True)
        opt = T.Adam([p], lr=0.05)
        p.grad = np.array([1.0], np.float32)
        opt.step()
        assert p.data[0] == pytest.approx(-0.05 / (1.0 + 1e-8), abs=1e-9)

    def test_non_finite_gradient_rejected_with_name(self):
        p = T.Tensor([0.0], requires_grad=True, name="conv0_w")
        opt = T.Adam([p], lr=0.05)
        p.grad = np.array([np.nan], np.float32)
        with pytest.raises(ValueError, match="conv0_w"):
            opt.step()

    def test_lr_must_be_positive(self):
        with pytest.raises(ValueError):
            T.Adam([T.Tensor([0.0], requires_grad=True)], lr=0.0)


class TestFiniteDiff:
    def test_square_function(self):
        g = T.finite_diff_grad(lambda v: float(v[0] ** 2), np.array([3.0]), h=1e-4)
        assert g[0] == pytest.approx(6.0, abs=1e-6)

    def test_constant_function(self):
        g = T.finite_diff_grad(lambda v: 7.0, np.zeros(4), h=1e-4)
        assert np.allclose(g, 0.0)

    def test_l2_norm_gradient(self):
        g = T.finite_diff_grad(
            lambda v: float(np.sqrt((v**2).sum())), np.array([3.0, 4.0]), h=1e-5
        )
        assert np.allclose(g, [0.6, 0.8], atol=1e-7)

    def test_bad_h_rejected(self):
        with pytest.raises(ValueError):
            T.finite_diff_grad(lambda v: 0.0, np.zeros(2), h=0.0)

    def test_non_finite_value_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            T.finite_diff_grad(lambda v: float("nan"), np.zeros(2), h=1e-4)


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = T.Tensor([1.0], requires_grad=True)
        with T.no_grad():
            out = T.relu(x)
        assert out._backward is None and not out.requires_grad
