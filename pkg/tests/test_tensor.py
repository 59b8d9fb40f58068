import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from haca import tensor as T
from haca.gradcheck import NondeterministicFunction, finite_difference_check, relative_error
from haca.tensor import GradientError, ShapeError, Tape, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_matmul_identity(rng):
    A = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(A)).data, A)


def test_matmul_hand_values():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_shape_error_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_backward_sum_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    with Tape() as tape:
        tape.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_tanh_at_zero():
    x = leaf(np.zeros(4))
    with Tape() as tape:
        tape.backward(T.tsum(T.tanh(x)))
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_backward_errors():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = x * x
        with pytest.raises(GradientError, match="scalar"):
            tape.backward(y)
        loss = T.tsum(y)
        tape.backward(loss)
        with pytest.raises(GradientError, match="already"):
            tape.backward(loss)
        tape.reset()
    with pytest.raises(GradientError):
        Tensor(3.0).backward()


def test_no_recording_outside_tape():
    x = leaf([1.0])
    y = T.tanh(x)
    assert y._tape is None


def test_gradients_accumulate_over_reused_inputs():
    x = leaf([2.0, -1.0])
    with Tape() as tape:
        tape.backward(T.tsum(x * x + x))
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)


def test_record_is_topological(rng):
    x = leaf(rng.normal(size=3))
    with Tape() as tape:
        y = T.tanh(x * 2.0)
        T.tsum(T.exp(y) + y)
    seen = {id(x)}
    for out, inputs, _ in tape.nodes:
        for t in inputs:
            assert id(t) in seen or not t.requires_grad or t._tape is None
        seen.add(id(out))


def test_debug_mode_flags_nonfinite():
    with pytest.raises(FloatingPointError, match="log"):
        with np.errstate(divide="ignore"):
            T.log(Tensor([0.0]))


def test_dropout_inverted_scaling(rng):
    x = Tensor(np.ones((200, 50)))
    y = T.dropout(x, 0.5, rng, train=True)
    kept = y.data[y.data != 0]
    np.testing.assert_allclose(kept, 2.0)
    assert abs(y.data.mean() - 1.0) < 0.05
    assert T.dropout(x, 0.5, rng, train=False) is x


def test_finite_difference_check_polynomial():
    x = leaf([3.0])
    report = finite_difference_check(lambda: T.tsum(x * x), [x])
    assert report.ok and report.checks[0].max_rel_error < 1e-8


def test_finite_difference_check_constant():
    x = leaf([1.0, 2.0])
    report = finite_difference_check(lambda: Tensor(0.0), {"x": x})
    assert report.ok and report.worst == 0.0


def test_finite_difference_check_detects_nondeterminism(rng):
    x = leaf([1.0])
    with pytest.raises(NondeterministicFunction):
        finite_difference_check(lambda: T.tsum(x * float(rng.random())), [x])


def test_relative_error_floor():
    assert relative_error(np.array(0.0), np.array(0.0)) == 0.0
    np.testing.assert_allclose(relative_error(np.array(1e-9), np.array(0.0)), 0.1)


def test_two_layer_composition_gradcheck(rng):
    W1, W2 = leaf(rng.uniform(-1, 1, (4, 3))), leaf(rng.uniform(-1, 1, (2, 4)))
    b = leaf(rng.uniform(-1, 1, 4))
    x = Tensor(rng.uniform(-1, 1, (5, 3)))

    def f():
        h = T.tanh(T.linear(x, W1, b))
        return T.mean(T.log_softmax(T.linear(h, W2), axis=-1))

    assert finite_difference_check(f, {"W1": W1, "W2": W2, "b": b}).ok


PRIMITIVE_CASES = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "neg": lambda a, b: T.neg(a),
    "tanh": lambda a, b: T.tanh(a),
    "sigmoid": lambda a, b: T.sigmoid(a),
    "exp": lambda a, b: T.exp(a),
    "log": lambda a, b: T.log(T.add(T.mul(a, a), 0.5)),
    "matmul": lambda a, b: T.matmul(a, T.reshape(b, (3, 2))),
    "linear": lambda a, b: T.linear(a, T.reshape(b, (2, 3)), T.take(b, (0, slice(0, 2)))),
    "softmax": lambda a, b: T.softmax(a, axis=-1),
    "log_softmax": lambda a, b: T.log_softmax(a, axis=0),
    "concat": lambda a, b: T.concat([a, b], axis=0),
    "stack": lambda a, b: T.stack([a, b], axis=1),
    "reshape": lambda a, b: T.reshape(a, (3, 2)),
    "take": lambda a, b: T.take(a, (slice(None), [0, 2, 2])),
    "where": lambda a, b: T.where(np.array([[True, False, True]] * 2), a, b),
    "weighted_sum": lambda a, b: T.weighted_sum(T.softmax(a), T.stack([b, a, b], axis=1)),
    "tsum": lambda a, b: T.tsum(a, axis=0),
    "mean": lambda a, b: T.mean(a, axis=1),
    "pick": lambda a, b: T.pick(a, np.array([2, 0])),
    "embedding": lambda a, b: T.embedding(a, np.array([1, 0, 1])),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_primitive_gradients_match_finite_differences(name, seed):
    r = np.random.default_rng(seed)
    a = leaf(r.uniform(-1, 1, (2, 3)))
    b = leaf(r.uniform(-1, 1, (2, 3)))
    weights = Tensor(r.uniform(-1, 1, 64))
    op = PRIMITIVE_CASES[name]

    def f():
        out = op(a, b)
        w = Tensor(weights.data[:out.data.size].reshape(out.shape))
        return T.tsum(T.mul(out, w))

    report = finite_difference_check(f, {"a": a, "b": b})
    assert report.ok, report.lines()


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    p = T.softmax(Tensor(x), axis=-1).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_forward_is_deterministic(rng):
    W = Tensor(rng.normal(size=(4, 4)))
    x = Tensor(rng.normal(size=(3, 4)))

    def run():
        return T.softmax(T.tanh(T.linear(x, W)), axis=-1).data

    assert np.array_equal(run(), run())


def test_take_fancy_index_accumulates():
    x = leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
        tape.backward(T.tsum(T.take(x, ([0, 0, 2],))))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_embedding_rejects_unknown_ids():
    with pytest.raises(IndexError, match="embedding"):
        T.embedding(Tensor(np.zeros((3, 2))), np.array([3]))
