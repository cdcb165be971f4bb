import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_attention import tensor as T
from adaptive_attention.errors import ContractError, DimensionError, InvalidMaskError, NumericError
from adaptive_attention.tensor import Tape, Tensor, finite_diff_check, masked_softmax, no_grad

from conftest import numeric_grad, rel_err


def _grad_of(fn, *arrays):
    """Tape gradients of scalar ``fn(*tensors)`` for every input."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        tape.backward(fn(*ts))
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


class TestMatmul:
    def test_hand_example(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_identity(self, rng):
        a = rng.normal(size=(5, 5))
        np.testing.assert_array_equal((Tensor(a) @ Tensor(np.eye(5))).data, a)

    def test_grad_matches_finite_differences(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        (ga,) = _grad_of(lambda x: (x @ Tensor(b)).sum(), a)
        fd = numeric_grad(lambda x: (x @ b).sum(), a.copy())
        assert rel_err(ga, fd) < 1e-5

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_with_shared_right_operand(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        w = rng.normal(size=(2, 3, 5))
        ga, gb = _grad_of(lambda x, y: ((x @ y) * Tensor(w)).sum(), a, b)
        assert rel_err(ga, numeric_grad(lambda x: ((x @ b) * w).sum(), a.copy())) < 1e-6
        assert rel_err(gb, numeric_grad(lambda y: ((a @ y) * w).sum(), b.copy())) < 1e-6


class TestMaskedSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(masked_softmax(Tensor([0.0, 0.0]), np.array([1, 1])).data, [0.5, 0.5])

    def test_single_unmasked(self):
        y = masked_softmax(Tensor([5.0, -100.0]), np.array([1, 0])).data
        assert y[0] == 1.0 and y[1] == 0.0

    def test_against_high_precision(self):
        mpmath.mp.dps = 40
        e = [mpmath.exp(v) for v in (1, 2, 3)]
        oracle = [float(v / sum(e)) for v in e]
        y = masked_softmax(Tensor([1.0, 2.0, 3.0]), np.ones(3)).data
        np.testing.assert_allclose(y, oracle, rtol=0, atol=1e-15)
        np.testing.assert_allclose(y, [0.0900, 0.2447, 0.6652], atol=5e-5)

    def test_all_zero_mask(self):
        with pytest.raises(InvalidMaskError):
            masked_softmax(Tensor([1.0, 2.0]), np.zeros(2))

    def test_large_logits_stable(self):
        y = masked_softmax(Tensor([1000.0, 1001.0, -5.0]), np.array([1, 1, 0])).data
        assert np.all(np.isfinite(y)) and abs(y.sum() - 1) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_probability_vector_on_support(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(1, 9))
        mask = (r.random(n) < 0.6).astype(float)
        mask[r.integers(n)] = 1.0
        y = masked_softmax(Tensor(r.normal(scale=5, size=n)), mask).data
        assert np.all(y >= 0)
        assert abs(y.sum() - 1.0) <= 1e-9
        assert np.all(y[mask == 0] == 0.0)


class TestElementwise:
    def test_values(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5
        assert T.relu(Tensor(-3.0)).item() == 0.0
        assert T.relu(Tensor(3.0)).item() == 3.0
        np.testing.assert_array_equal(T.concat([Tensor([1.0, 2.0]), Tensor([3.0])]).data, [1, 2, 3])
        assert T.elementwise("scale", Tensor(2.0), 3).item() == 6.0
        assert T.elementwise("add", Tensor(2.0), Tensor(3.0)).item() == 5.0

    def test_incompatible_shapes(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))
        with pytest.raises(DimensionError):
            T.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=0)

    def test_scalar_broadcast_grad(self):
        ga, gb = _grad_of(lambda a, b: (a * b).sum(), np.array(2.0), np.array([1.0, 2.0, 3.0]))
        assert ga == pytest.approx(6.0)
        np.testing.assert_allclose(gb, [2.0, 2.0, 2.0])

    def test_sigmoid_extremes_finite(self):
        y = T.sigmoid(Tensor([-800.0, 800.0])).data
        np.testing.assert_array_equal(y, [0.0, 1.0])


class TestBackward:
    def test_square(self):
        (g,) = _grad_of(lambda x: x * x, np.array(3.0))
        assert g == 6.0

    def test_sum_sigmoid(self, rng):
        x = rng.normal(size=7)
        (g,) = _grad_of(lambda t: T.sigmoid(t).sum(), x)
        fd = numeric_grad(lambda v: (1 / (1 + np.exp(-v))).sum(), x.copy())
        assert rel_err(g, fd) < 1e-5

    def test_unused_parameter_gets_zero(self):
        x, unused = Tensor(2.0, requires_grad=True), Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            tape.backward(x * x)
        assert unused.grad is None or np.all(unused.grad == 0)

    def test_accumulates_over_reuse(self):
        (g,) = _grad_of(lambda x: x * x + x * 3.0 + x, np.array(2.0))
        assert g == pytest.approx(2 * 2 + 3 + 1)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_tape_is_topologically_ordered(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = T.tanh(x * 2.0).sum() + x.sum()
        position = {id(n): i for i, n in enumerate(tape.nodes)}
        for i, node in enumerate(tape.nodes):
            assert all(position.get(id(p), -1) < i for p in node._parents)
        assert tape.nodes[-1] is y

    def test_tape_cleared_after_backward(self):
        x = Tensor(1.0, requires_grad=True)
        with Tape() as tape:
            loss = x * x
            assert len(tape) == 1
            tape.backward(loss)
            assert len(tape) == 0

    def test_no_grad_records_nothing(self):
        x = Tensor(1.0, requires_grad=True)
        with Tape() as tape, no_grad():
            y = x * x
        assert len(tape) == 0 and not y.requires_grad

    def test_replay_bit_identical(self, rng):
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))

        def run():
            x, w = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
            with Tape() as tape:
                y = masked_softmax(T.tanh(x @ w), np.ones(2)).sum() * x.sum()
                tape.backward(y)
            return y.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for u, v in zip(first, second):
            assert np.array_equal(u, v)

    def test_anomaly_mode(self):
        with np.errstate(invalid="ignore"), T.detect_anomaly(), pytest.raises(NumericError):
            T.log(Tensor([-1.0]))


class TestFiniteDiffCheck:
    def test_quadratic_form(self, rng):
        a = rng.normal(size=(4, 4))
        A = Tensor(a @ a.T)
        assert finite_diff_check(lambda x: x @ A @ x, Tensor(rng.normal(size=4))) < 1e-6

    def test_constant(self):
        assert finite_diff_check(lambda x: Tensor(3.0) + 0.0 * x.sum(), Tensor(np.ones(3))) == 0.0

    def test_rejects_bad_eps(self):
        with pytest.raises(ContractError):
            finite_diff_check(lambda x: x.sum(), Tensor(np.ones(2)), eps=0.0)


# Randomised gradient checks, one per differentiable op (>= 100 trials each).
def _shape(r):
    return tuple(int(v) for v in r.integers(1, 4, size=int(r.integers(1, 3))))


def _case(op, r):
    s = _shape(r)
    x = r.normal(size=s)
    if op == "add":
        c = r.normal(size=s)
        return lambda t: t + Tensor(c) + t, x
    if op == "mul":
        w = r.normal(size=s)
        return lambda t: t * Tensor(w) * t, x
    if op == "div":
        d = r.uniform(0.5, 2.0, size=s)
        return lambda t: Tensor(d) / (t * t + 1.0) + t / Tensor(d), x
    if op == "matmul":
        k = int(r.integers(1, 4))
        w = r.normal(size=(s[-1], k))
        return lambda t: t @ Tensor(w), x
    if op == "sigmoid":
        return T.sigmoid, x
    if op == "tanh":
        return T.tanh, x
    if op == "relu":
        x = np.where(np.abs(x) < 0.1, 0.5, x)
        return T.relu, x
    if op == "exp":
        return T.exp, x
    if op == "log":
        return T.log, np.abs(x) + 0.5
    if op == "concat":
        other = Tensor(r.normal(size=s))
        return lambda t: T.concat([t, other, t], axis=-1), x
    if op == "stack":
        return lambda t: T.stack([t, t * 2.0], axis=0), x
    if op == "masked_softmax":
        mask = (r.random(s) < 0.7).astype(float)
        mask[..., 0] = 1.0
        return lambda t: masked_softmax(t, mask, axis=-1), x
    if op == "log_softmax":
        return lambda t: T.log_softmax(t, axis=-1), x
    if op == "sum":
        return lambda t: t.sum(axis=-1, keepdims=True) * t, x
    if op == "mean":
        return lambda t: t.mean(axis=0) * 1.0, x
    if op == "getitem":
        return lambda t: t[..., [0, 0]], x
    if op == "reshape":
        return lambda t: t.reshape(-1), x
    if op == "transpose":
        return lambda t: t.T, x
    if op == "pow":
        return lambda t: t**3, x
    raise AssertionError(op)


OPS = [
    "add", "mul", "div", "matmul", "sigmoid", "tanh", "relu", "exp", "log", "concat", "stack",
    "masked_softmax", "log_softmax", "sum", "mean", "getitem", "reshape", "transpose", "pow",
]


@pytest.mark.parametrize("op", OPS)
@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_op_gradient_property(op, seed):
    r = np.random.default_rng(seed)
    fn, x = _case(op, r)
    with no_grad():
        w = r.normal(size=fn(Tensor(x)).shape)

    def loss(t):
        return (fn(t) * Tensor(w)).sum()

    (g,) = _grad_of(loss, x)
    fd = numeric_grad(lambda v: float((fn(Tensor(v)).data * w).sum()), x.copy())
    assert rel_err(g, fd) < 1e-4
