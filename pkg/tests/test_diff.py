import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drag import diff as D
from drag.diff import Tape, Tensor, grad_check


def central_diff(f, x, h=1e-5):
    """Independent finite-difference gradient of scalar numpy function f at x."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_matmul_gradient_matches_finite_differences(rng):
    A0, B0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    C = rng.normal(size=(3, 2))  # random cotangent to make the output scalar
    A, B = Tensor(A0, True), Tensor(B0, True)
    with Tape() as tape:
        out = D.total(D.mul(D.matmul(A, B), Tensor(C)))
    tape.backward(out)
    fd_A = central_diff(lambda a: np.sum((a @ B0) * C), A0)
    fd_B = central_diff(lambda b: np.sum((A0 @ b) * C), B0)
    assert np.max(np.abs(A.grad - fd_A) / np.maximum(np.abs(fd_A), 1e-8)) < 1e-6
    assert np.max(np.abs(B.grad - fd_B) / np.maximum(np.abs(fd_B), 1e-8)) < 1e-6


def test_grad_check_sigmoid_of_linear_map(rng):
    W = Tensor(rng.normal(size=(2, 2)), True)
    x = Tensor(rng.normal(size=(2, 1)))
    report = grad_check(lambda: D.total(D.sigmoid(D.matmul(W, x))), [W], h=1e-5, tol=1e-6)
    assert report.passed, report.format()


def test_grad_check_constant_parameter_has_zero_gradient(rng):
    W = Tensor(rng.normal(size=(2, 2)), True)
    unused = Tensor(rng.normal(size=3), True)
    report = grad_check(lambda: D.total(D.exp(W)), {"W": W, "unused": unused})
    assert report.passed
    assert report.tensors[1].max_rel_err == 0.0


def _check_unary(op, x0, tol=1e-6):
    x = Tensor(x0, True)
    report = grad_check(lambda: D.total(D.mul(op(x), Tensor(np.cos(np.arange(x0.size)).reshape(x0.shape)))), [x], tol=tol)
    assert report.passed, report.format()


@pytest.mark.parametrize("name", ["leaky_relu", "elu", "exp", "sigmoid"])
def test_pointwise_gradients(rng, name):
    x0 = rng.normal(size=(4, 3))
    x0[np.abs(x0) < 1e-3] = 0.5  # keep clear of kinks
    _check_unary(getattr(D, name), x0)


def test_log_gradient(rng):
    _check_unary(D.log, rng.uniform(0.5, 2.0, size=(3, 3)))


def test_structural_gradients(rng):
    a = Tensor(rng.normal(size=(4, 3)), True)
    b = Tensor(rng.normal(size=(4, 2)), True)
    idx = np.array([0, 2, 2, 3, 1, 0])

    def f():
        c = D.concat([a, b], axis=1)
        s = D.slice_cols(c, 1, 4)
        g = D.gather_rows(s, idx)
        t = D.transpose(D.reshape(g, (3, 6)))
        return D.total(D.mul(t, t))

    report = grad_check(f, [a, b])
    assert report.passed, report.format()


def test_segment_softmax_single_and_equal():
    one = D.segment_softmax(Tensor([[3.7]]), [0], 1)
    assert one.data[0, 0] == 1.0
    two = D.segment_softmax(Tensor([1.25, 1.25]), [0, 0], 1)
    assert np.array_equal(two.data, [0.5, 0.5])


def test_segment_ops_gradients(rng):
    E, n = 9, 4
    seg = np.array([0, 0, 1, 1, 1, 2, 3, 3, 3])
    s = Tensor(rng.normal(size=(E, 1)), True)
    v = Tensor(rng.normal(size=(E, 3)), True)
    C = Tensor(rng.normal(size=(n, 3)))

    def f():
        w = D.segment_softmax(s, seg, n)
        return D.total(D.mul(D.segment_weighted_sum(w, v, seg, n), C))

    report = grad_check(f, [s, v])
    assert report.passed, report.format()


def test_segment_softmax_unsorted_segments(rng):
    seg = np.array([2, 0, 1, 0, 2, 2])
    s0 = rng.normal(size=6)
    out = D.segment_softmax(Tensor(s0), seg, 3).data
    for c in range(3):
        e = np.exp(s0[seg == c])
        assert np.allclose(out[seg == c], e / e.sum(), rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=30),
    st.integers(1, 5),
    st.integers(0, 2**32 - 1),
)
def test_segment_softmax_sums_to_one(scores, n_seg, seed):
    seg = np.random.default_rng(seed).integers(0, n_seg, size=len(scores))
    out = D.segment_softmax(Tensor(scores), seg, n_seg).data
    sums = np.bincount(seg, weights=out, minlength=n_seg)
    present = np.bincount(seg, minlength=n_seg) > 0
    assert np.all(np.abs(sums[present] - 1) < 1e-12)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        D.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        D.add(Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_non_finite_output_names_op():
    with pytest.raises(FloatingPointError, match="log"):
        D.log(Tensor([0.0, 1.0]))
    with pytest.raises(FloatingPointError, match="exp"):
        D.exp(Tensor([1e4]))


def test_backward_visits_records_in_reverse_order(rng):
    x = Tensor(rng.normal(size=(2, 2)), True)
    with Tape() as tape:
        y = D.exp(x)
        z = D.total(D.mul(y, y))
    assert [r.out.op for r in tape.records] == ["exp", "mul", "total"]
    tape.backward(z)
    assert np.allclose(x.grad, 2 * np.exp(2 * x.data))


def test_backward_is_linear_in_outputs(rng):
    x = Tensor(rng.normal(size=(3, 2)), True)
    W = Tensor(rng.normal(size=(2, 2)), True)

    def f1():
        return D.total(D.sigmoid(D.matmul(x, W)))

    def f2():
        return D.total(D.elu(D.matmul(x, W)))

    with Tape() as tape:
        a, b = f1(), f2()
    tape.backward(a)
    tape.backward(b)
    separate = W.grad.copy()

    W.grad = x.grad = None
    with Tape() as tape:
        s = D.add(f1(), f2())
    tape.backward(s)
    assert np.allclose(separate, W.grad, rtol=0, atol=1e-14)


def test_nothing_recorded_outside_tape(rng):
    x = Tensor(rng.normal(size=3), True)
    y = D.exp(x)
    assert not y.requires_grad
    with Tape() as tape:
        D.exp(x)
    assert len(tape) == 1


def test_clip_blocks_gradient_outside_range():
    x = Tensor([-1.0, 0.5, 2.0], True)
    with Tape() as tape:
        out = D.total(D.clip(x, 0.0, 1.0))
    tape.backward(out)
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])
