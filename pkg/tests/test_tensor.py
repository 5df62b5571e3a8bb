import numpy as np
import pytest

from rgbd_fusion import ops
from rgbd_fusion.tensor import (Param, TapeError, Tensor, backward, default_dtype, get_default_dtype,
                                no_grad)


def test_chain_rule_through_mul_and_add():
    a = Tensor(np.array([[[[2.0]]]]), requires_grad=True)
    b = Tensor(np.array([[[[3.0]]]]), requires_grad=True)
    loss = ((a * b) + a).sum()
    backward(loss)
    assert a.grad.item() == 4.0   # b + 1
    assert b.grad.item() == 2.0   # a


def test_fan_out_accumulates():
    x = Tensor(np.full((1, 1, 2, 2), 1.5), requires_grad=True)
    loss = (x * x + x * x).sum()
    backward(loss)
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 6.0))


def test_tape_is_consumed():
    x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)


def test_backward_needs_scalar():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(TapeError):
        backward(x * x)


def test_loss_without_grad_path_raises():
    with pytest.raises(TapeError):
        backward(Tensor(np.ones(1)).sum())


def test_leaf_gradients_accumulate_across_tapes():
    p = Param(np.ones((1, 1, 1, 1)))
    for _ in range(2):
        backward((p * 3.0).sum())
    assert p.grad.item() == 6.0


def test_no_grad_records_nothing():
    x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad


def test_default_dtype_context_restores():
    before = get_default_dtype()
    with default_dtype(np.float32):
        assert Tensor(np.ones(2)).dtype == np.float32
    assert get_default_dtype() == before
    assert Tensor(np.ones(2)).dtype == before


def test_broadcast_gradient_reduces_to_operand_shape():
    x = Tensor(np.ones((2, 3, 4, 4)), requires_grad=True)
    b = Param(np.zeros((1, 3, 1, 1)))
    backward(ops.add(x, b).sum())
    np.testing.assert_array_equal(b.grad, np.full((1, 3, 1, 1), 32.0))
