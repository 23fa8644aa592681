import math

import numpy as np
import pytest

from relsum.core import tensor as T
from relsum.core.optim import ParameterStore, grad_check
from relsum.core.tensor import Tape, Tensor
from relsum.errors import NonFiniteError, ShapeError


def test_broadcast_add_sums_gradient_over_the_broadcast_axis():
    params = ParameterStore({"x": np.ones((3, 2)), "b": np.zeros(2)})
    with Tape() as tape:
        loss = T.sum_(T.add(params["x"], params["b"]))
        grads = tape.backward(loss, params)

    assert grads["x"].shape == (3, 2)
    assert np.array_equal(grads["b"].data, np.array([3.0, 3.0]))


def test_ops_outside_a_tape_record_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.mul(x, 2.0)

    assert not y.requires_grad
    assert np.array_equal(y.data, [2.0, 4.0])


def test_tensors_are_read_only():
    x = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        x.data[0] = 5.0


def test_matmul_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError) as excinfo:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    assert excinfo.value.op == "matmul"
    assert excinfo.value.shapes == [(2, 3), (2, 3)]


def test_non_finite_inputs_are_rejected():
    with pytest.raises(NonFiniteError):
        T.add(Tensor([1.0, math.nan]), 1.0)
    with pytest.raises(NonFiniteError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_softmax_rows_sum_to_one_and_log_softmax_agrees():
    x = Tensor(np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]]))

    probs = T.softmax(x).data
    logs = T.log_softmax(x).data

    assert np.allclose(probs.sum(axis=-1), 1.0)
    assert np.allclose(np.exp(logs), probs)


def test_minimum_routes_ties_to_the_first_argument():
    params = ParameterStore({"a": np.array([1.0, 2.0]), "b": np.array([1.0, 0.0])})
    with Tape() as tape:
        loss = T.sum_(T.minimum(params["a"], params["b"]))
        grads = tape.backward(loss, params)

    assert np.array_equal(grads["a"].data, [1.0, 0.0])
    assert np.array_equal(grads["b"].data, [0.0, 1.0])


def test_boolean_mask_slice_scatters_gradient_back():
    params = ParameterStore({"x": np.arange(6.0).reshape(2, 3)})
    mask = np.array([[True, False, True], [False, True, False]])
    with Tape() as tape:
        picked = T.slice_(params["x"], mask)
        grads = tape.backward(T.sum_(picked), params)

    assert np.array_equal(picked.data, [0.0, 2.0, 4.0])
    assert np.array_equal(grads["x"].data, mask.astype(float))


def test_shared_subexpression_accumulates_over_all_paths():
    params = ParameterStore({"x": np.array([3.0])})
    with Tape() as tape:
        y = T.mul(params["x"], params["x"])
        loss = T.sum_(T.add(y, params["x"]))
        grads = tape.backward(loss, params)

    assert grads["x"].data[0] == pytest.approx(7.0)


def test_two_layer_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    params = ParameterStore(
        {
            "w1": rng.normal(size=(4, 5)),
            "b1": rng.normal(size=5),
            "w2": rng.normal(size=(5, 3)),
            "b2": rng.normal(size=3),
            "gamma": np.ones(5),
            "beta": np.zeros(5),
        }
    )
    x = rng.normal(size=(6, 4))
    targets = rng.integers(0, 3, size=6)

    def loss(p):
        hidden = T.gelu(T.layer_norm(T.add(T.matmul(x, p["w1"]), p["b1"]), p["gamma"], p["beta"]))
        logits = T.add(T.matmul(hidden, p["w2"]), p["b2"])
        return T.neg(T.mean(T.gather(T.log_softmax(logits), targets)))

    assert grad_check(loss, params, h=1e-4) < 1e-4


def test_forward_op_dispatches_by_name():
    out = T.forward_op("relu", Tensor([-1.0, 2.0]))

    assert np.array_equal(out.data, [0.0, 2.0])
    with pytest.raises(ValueError):
        T.forward_op("conv2d", Tensor([1.0]))


def test_backward_rejects_non_scalar_loss():
    params = ParameterStore({"x": np.ones(2)})
    with Tape() as tape:
        out = T.mul(params["x"], 2.0)
        with pytest.raises(ShapeError):
            tape.backward(out, params)
