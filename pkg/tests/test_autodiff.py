import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from implicit_mesh import autodiff as ad
from implicit_mesh.autodiff import Tensor, backward, eval_graph, grad_check
from implicit_mesh.errors import ContractError, DimensionError, NumericError


def test_eval_graph_examples():
    x = Tensor([3.0], requires_grad=True)
    assert eval_graph("mul", x, x).data.tolist() == [9.0]
    assert float(eval_graph("sum", Tensor(np.zeros(4))).data) == 0.0
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))
    assert eval_graph("matmul", a, b).shape == (2, 2)


def test_eval_graph_records_only_with_grad():
    assert eval_graph("add", Tensor(1.0), Tensor(2.0)).node is None
    assert eval_graph("add", Tensor(1.0, requires_grad=True), Tensor(2.0)).node is not None


def test_unknown_op_and_shape_errors():
    with pytest.raises(ContractError):
        eval_graph("conv", Tensor(1.0))
    with pytest.raises(DimensionError, match="matmul"):
        eval_graph("matmul", Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        eval_graph("add", Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_backward_examples():
    x = Tensor(3.0, requires_grad=True)
    (g,) = backward(x * x, [x])
    assert g == pytest.approx(6.0)
    x = Tensor(np.arange(5.0), requires_grad=True)
    (g,) = backward(ad.sum(x), [x])
    np.testing.assert_array_equal(g, np.ones(5))


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a0, b0 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert grad_check(lambda a: ad.sum(ad.matmul(a, Tensor(b0))), a0) < 1e-5
    assert grad_check(lambda b: ad.sum(ad.matmul(Tensor(a0), b)), b0) < 1e-5


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_unreached_leaf_gets_zero_gradient():
    x = Tensor(2.0, requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    gx, gy = backward(x * x, [x, y])
    assert gx == pytest.approx(4.0)
    np.testing.assert_array_equal(gy, np.zeros(3))


def test_grad_check_examples():
    x = np.random.default_rng(1).standard_normal(7)
    assert grad_check(ad.sum, x) < 1e-10
    xt = Tensor([3.0, 4.0], requires_grad=True)
    (g,) = backward(ad.l2norm(xt), [xt])
    np.testing.assert_allclose(g, [0.6, 0.8], atol=1e-12)
    assert grad_check(ad.l2norm, np.array([3.0, 4.0])) < 1e-6


def test_grad_check_rejects_bad_input():
    with pytest.raises(ContractError):
        grad_check(ad.sum, np.ones(2), eps=0.0)
    with pytest.raises(NumericError), np.errstate(invalid="ignore"):
        grad_check(lambda x: ad.sum(ad.log(x)), np.array([-1.0, 1.0]))


def _op_cases(rng):
    x = lambda *s: rng.standard_normal(s)
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    other = x(3, 4)
    img = x(5, 6, 2)
    rhs, w34, w43, w72 = Tensor(x(4, 2)), Tensor(x(3, 4)), Tensor(x(4, 3)), Tensor(x(7, 2))
    coords = rng.uniform(1.1, 4.3, (7, 2))
    return {
        "add": (lambda t: ad.sum(eval_graph("add", t, Tensor(other))), x(3, 4)),
        "sub": (lambda t: ad.sum(eval_graph("sub", Tensor(other), t)), x(3, 4)),
        "mul": (lambda t: ad.sum(eval_graph("mul", t, t)), x(3, 4)),
        "div": (lambda t: ad.sum(eval_graph("div", Tensor(other), t)), pos(3, 4)),
        "matmul": (lambda t: ad.sum(eval_graph("matmul", t, rhs)), x(3, 4)),
        "tanh": (lambda t: ad.sum(eval_graph("tanh", t)), x(6)),
        "relu": (lambda t: ad.sum(eval_graph("relu", t) * t), x(6) + np.sign(x(6)) * 0.1),
        "sigmoid": (lambda t: ad.sum(eval_graph("sigmoid", t)), x(6)),
        "exp": (lambda t: ad.sum(eval_graph("exp", t)), x(6)),
        "log": (lambda t: ad.sum(eval_graph("log", t)), pos(6)),
        "sum": (lambda t: ad.sum(eval_graph("sum", t, axis=1) ** 2), x(3, 4)),
        "mean": (lambda t: ad.sum(eval_graph("mean", t, axis=0) ** 2), x(3, 4)),
        "l2norm": (lambda t: ad.sum(eval_graph("l2norm", t, axis=1)), x(3, 4)),
        "l1norm": (lambda t: ad.sum(eval_graph("l1norm", t, axis=1)), pos(3, 4) * np.sign(x(3, 4))),
        "softmax": (lambda t: ad.sum(eval_graph("softmax", t) * w34), x(3, 4)),
        "concat": (lambda t: ad.sum(eval_graph("concat", t, Tensor(other), axis=0) ** 2), x(3, 4)),
        "index": (lambda t: ad.sum(eval_graph("index", t, (slice(1, 3), [0, 2])) ** 2), x(3, 4)),
        "bilinear_gather": (lambda t: ad.sum(eval_graph("bilinear_gather", t, coords) * w72), img),
        "broadcast": (lambda t: ad.sum(eval_graph("broadcast", t, (3, 4)) * Tensor(other)), x(1, 4)),
        "neg": (lambda t: ad.sum(eval_graph("neg", t) * t), x(5)),
        "sqrt": (lambda t: ad.sum(eval_graph("sqrt", t)), pos(5)),
        "abs": (lambda t: ad.sum(eval_graph("abs", t)), pos(5) * np.sign(x(5))),
        "square": (lambda t: ad.sum(eval_graph("square", t)), x(5)),
        "softplus": (lambda t: ad.sum(eval_graph("softplus", t)), x(5)),
        "minimum": (lambda t: ad.sum(eval_graph("minimum", t, Tensor(other + 0.5))), x(3, 4)),
        "maximum": (lambda t: ad.sum(eval_graph("maximum", t, Tensor(other + 0.5))), x(3, 4)),
        "reshape": (lambda t: ad.sum(eval_graph("reshape", t, (4, 3)) * w43), x(3, 4)),
        "transpose": (lambda t: ad.sum(eval_graph("transpose", t) * w43), x(3, 4)),
    }


def test_op_registry_is_covered():
    assert set(_op_cases(np.random.default_rng(0))) == set(ad.OP_KINDS)


@pytest.mark.parametrize("op", ad.OP_KINDS)
def test_every_op_passes_grad_check(op):
    for seed in range(10):
        f, x = _op_cases(np.random.default_rng(seed))[op]
        assert grad_check(f, x) < 1e-4, (op, seed)


def test_bilinear_gather_gradient_wrt_coordinates():
    rng = np.random.default_rng(3)
    img = Tensor(rng.standard_normal((6, 7, 3)))
    w = Tensor(rng.standard_normal((5, 3)))
    xy = rng.uniform(1.2, 5.3, (5, 2))
    xy = np.floor(xy) + 0.5 + rng.uniform(0.1, 0.9, (5, 2))  # away from cell boundaries
    assert grad_check(lambda t: ad.sum(ad.bilinear_gather(img, t) * w), xy) < 1e-4


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    (g,) = backward(ad.sum(ad.relu(x)), [x])
    np.testing.assert_array_equal(g, np.zeros(3))


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
    y = ad.sum(ad.tanh(ad.matmul(x, x)) * ad.softmax(x))
    tape = ad.Tape.record(y)
    (g1,) = backward(y, [x], tape=tape)
    (g2,) = backward(y, [x], tape=tape)
    assert np.array_equal(g1, g2)


def test_tape_orders_inputs_before_outputs():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.sum(ad.exp(x) * x)
    tape = ad.Tape.record(y)
    seqs = [n.seq for n in tape.nodes]
    assert seqs == sorted(seqs)
    position = {id(t): i for i, t in enumerate(tape.outputs)}
    for i, t in enumerate(tape.outputs):
        for inp in t.node.inputs:
            if id(inp) in position:
                assert position[id(inp)] < i


def test_gradient_accumulation_over_consumers():
    x0 = np.array([0.7, -1.2])
    x = Tensor(x0, requires_grad=True)
    shared = ad.tanh(x)  # feeds three consumers
    y = ad.sum(shared * 2.0 + ad.exp(shared) + shared * shared)
    (g,) = backward(y, [x])
    # single-consumer rewrite: one fused expression of the same function
    x2 = Tensor(x0, requires_grad=True)
    t = ad.tanh(x2)
    (g_ref,) = backward(ad.sum(ad.exp(t) + (t + 2.0) * t), [x2])
    np.testing.assert_allclose(g, g_ref, rtol=1e-12)
    s = np.tanh(x0)
    np.testing.assert_allclose(g, (2.0 + np.exp(s) + 2 * s) * (1 - s * s), rtol=1e-12)


def test_no_grad_disables_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 3.0
    assert y.node is None


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-5, 5)))
def test_sum_gradient_is_ones(values):
    x = Tensor(values, requires_grad=True)
    (g,) = backward(ad.sum(x * 1.0), [x])
    np.testing.assert_array_equal(g, np.ones_like(values))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-3, 3)))
def test_softmax_sums_to_one(values):
    assert float(np.sum(ad.softmax(Tensor(values)).data)) == pytest.approx(1.0, abs=1e-12)
