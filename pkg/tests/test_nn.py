"""Core network tests: shapes, initialization, gradients, SGD, group norm."""
import numpy as np
import pytest

from fedkd import losses
from fedkd.nn import (
    ArchDescriptor,
    Batch,
    ModelParams,
    OptimizerState,
    backward,
    forward,
    init_params,
    sgd_step,
    _group_norm_forward,
    _layer_slots,
)

from conftest import finite_difference, max_rel_err


def test_param_count_hand_computed():
    arch = ArchDescriptor(input_dim=4, hidden_dims=(8,), num_classes=3)
    assert arch.param_count() == 4 * 8 + 8 + 8 * 3 + 3 == 67
    assert init_params(arch, 0).values.size == 67


def test_param_count_with_group_norm():
    arch = ArchDescriptor(input_dim=4, hidden_dims=(8,), num_classes=3, norm="group", groups=4)
    # weight + bias + scale + shift for the hidden layer, weight + bias for the head
    assert arch.param_count() == 67 + 2 * 8


def test_init_biases_zero_scales_one():
    arch = ArchDescriptor(input_dim=3, hidden_dims=(8,), num_classes=2, norm="group", groups=4)
    params = init_params(arch, 123)
    slots = _layer_slots(arch)
    for slot in slots:
        assert np.all(params.values[slot.b] == 0.0)
        if slot.gamma is not None:
            assert np.all(params.values[slot.gamma] == 1.0)
            assert np.all(params.values[slot.beta] == 0.0)


def test_init_no_hidden_biases_zero():
    arch = ArchDescriptor(input_dim=5, hidden_dims=(), num_classes=2)
    params = init_params(arch, 7)
    assert np.all(params.values[_layer_slots(arch)[0].b] == 0.0)


def test_init_deterministic():
    arch = ArchDescriptor(input_dim=6, hidden_dims=(16, 8), num_classes=4, norm="group", groups=8)
    a = init_params(arch, 42)
    b = init_params(arch, 42)
    assert np.array_equal(a.values, b.values)
    c = init_params(arch, 43)
    assert not np.array_equal(a.values, c.values)


def test_init_weight_bound():
    arch = ArchDescriptor(input_dim=10, hidden_dims=(12,), num_classes=3)
    params = init_params(arch, 0)
    w = params.values[_layer_slots(arch)[0].w]
    bound = np.sqrt(6.0 / (10 + 12))
    assert np.all(np.abs(w) <= bound)


def test_arch_validation_errors():
    with pytest.raises(ValueError, match="divisible"):
        ArchDescriptor(input_dim=4, hidden_dims=(6,), num_classes=3, norm="group", groups=4)
    with pytest.raises(ValueError):
        ArchDescriptor(input_dim=0, hidden_dims=(4,), num_classes=3)
    with pytest.raises(ValueError):
        ArchDescriptor(input_dim=4, hidden_dims=(4,), num_classes=1)
    with pytest.raises(ValueError):
        ArchDescriptor(input_dim=4, hidden_dims=(4,), num_classes=3, norm="batch")


def test_model_params_length_check():
    arch = ArchDescriptor(input_dim=2, hidden_dims=(), num_classes=2)
    with pytest.raises(ValueError, match="parameter vector"):
        ModelParams(arch, np.zeros(5))
    with pytest.raises(ValueError, match="non-finite"):
        ModelParams(arch, np.array([0.0, np.nan, 0.0, 0.0, 0.0, 0.0]))


def test_forward_zero_params_zero_logits():
    arch = ArchDescriptor(input_dim=3, hidden_dims=(4,), num_classes=2)
    params = ModelParams(arch, np.zeros(arch.param_count()))
    batch = Batch(np.random.default_rng(0).normal(size=(5, 3)), np.zeros(5, dtype=int))
    assert np.all(forward(params, batch) == 0.0)


def test_forward_single_linear_identity():
    # weights identity, bias [1, -1], input [0, 0] -> logits [1, -1]
    arch = ArchDescriptor(input_dim=2, hidden_dims=(), num_classes=2)
    values = np.zeros(arch.param_count())
    slot = _layer_slots(arch)[0]
    values[slot.w] = np.eye(2).reshape(-1)
    values[slot.b] = [1.0, -1.0]
    params = ModelParams(arch, values)
    out = forward(params, Batch(np.zeros((1, 2)), np.array([0])))
    assert np.array_equal(out, [[1.0, -1.0]])


def test_forward_dimension_mismatch():
    arch = ArchDescriptor(input_dim=3, hidden_dims=(), num_classes=2)
    params = init_params(arch, 0)
    with pytest.raises(ValueError, match="features"):
        forward(params, Batch(np.zeros((2, 4)), np.array([0, 1])))


def test_group_norm_single_group_example():
    # features [1, 3]: mean 2, population std 1 -> normalized within 1e-5 of [-1, 1]
    z = np.array([[1.0, 3.0]])
    out, x_hat, _ = _group_norm_forward(z, np.ones(2), np.zeros(2), groups=1)
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-5)
    assert np.allclose(x_hat, [[-1.0, 1.0]], atol=1e-5)


def test_group_norm_statistics():
    # Post-normalization (pre-affine) mean ~0 and variance ~1 per sample/group.
    rng = np.random.default_rng(5)
    z = rng.normal(scale=2.0, size=(7, 12))
    _, x_hat, _ = _group_norm_forward(z, np.ones(12), np.zeros(12), groups=3)
    grouped = x_hat.reshape(7, 3, 4)
    assert np.abs(grouped.mean(axis=2)).max() < 1e-6
    assert np.abs(grouped.var(axis=2) - 1.0).max() < 1e-4


def test_backward_zero_upstream():
    arch = ArchDescriptor(input_dim=4, hidden_dims=(8,), num_classes=3, norm="group", groups=4)
    params = init_params(arch, 1)
    batch = Batch(np.random.default_rng(2).normal(size=(3, 4)), np.array([0, 1, 2]))
    grads = backward(params, batch, np.zeros((3, 3)))
    assert np.all(grads == 0.0)


def test_backward_single_weight():
    # f(x) = w * x with x = 2 and upstream gradient 1 on that logit: dw = 2.
    arch = ArchDescriptor(input_dim=1, hidden_dims=(), num_classes=2)
    values = np.zeros(arch.param_count())
    slot = _layer_slots(arch)[0]
    values[slot.w] = [1.0, 0.0]
    params = ModelParams(arch, values)
    batch = Batch(np.array([[2.0]]), np.array([0]))
    upstream = np.array([[1.0, 0.0]])
    grads = backward(params, batch, upstream)
    w_grads = grads[slot.w]
    assert w_grads[0] == 2.0 and w_grads[1] == 0.0


def test_backward_shape_mismatch():
    arch = ArchDescriptor(input_dim=2, hidden_dims=(), num_classes=2)
    params = init_params(arch, 0)
    batch = Batch(np.zeros((2, 2)), np.array([0, 1]))
    with pytest.raises(ValueError, match="upstream gradient"):
        backward(params, batch, np.zeros((3, 2)))


@pytest.mark.parametrize("seed", range(6))
def test_backward_matches_finite_differences(seed):
    """Random small architectures, CE loss through the whole net."""
    rng = np.random.default_rng(seed)
    n_hidden = int(rng.integers(0, 3))
    widths = tuple(int(rng.integers(1, 3)) * 8 for _ in range(n_hidden))
    use_norm = bool(rng.integers(0, 2)) and n_hidden > 0
    arch = ArchDescriptor(
        input_dim=int(rng.integers(2, 6)),
        hidden_dims=widths,
        num_classes=int(rng.integers(2, 5)),
        norm="group" if use_norm else "none",
        groups=4,
    )
    params = init_params(arch, seed + 100)
    batch = Batch(rng.normal(size=(5, arch.input_dim)), rng.integers(0, arch.num_classes, size=5))

    def scalar_loss(values):
        p = ModelParams(arch, values)
        return losses.cross_entropy(forward(p, batch), batch.labels).value

    loss = losses.cross_entropy(forward(params, batch), batch.labels)
    analytic = backward(params, batch, loss.grad)
    numeric = finite_difference(scalar_loss, params.values.copy())
    assert max_rel_err(analytic, numeric) < 1e-4


def test_sgd_step_plain():
    arch = ArchDescriptor(input_dim=1, hidden_dims=(), num_classes=2)
    params = ModelParams(arch, np.array([1.0, 1.0, 0.0, 0.0]))
    grads = np.array([0.5, 0.5, 0.0, 0.0])
    out = sgd_step(params, grads, OptimizerState(learning_rate=0.1), 0)
    assert out.values[0] == pytest.approx(0.95)


def test_sgd_step_weight_decay():
    arch = ArchDescriptor(input_dim=1, hidden_dims=(), num_classes=2)
    params = ModelParams(arch, np.array([1.0, 0.0, 0.0, 0.0]))
    grads = np.array([0.5, 0.0, 0.0, 0.0])
    out = sgd_step(params, grads, OptimizerState(learning_rate=0.1, weight_decay=5e-4), 0)
    assert out.values[0] == pytest.approx(1.0 - 0.1 * (0.5 + 5e-4 * 1.0))
    assert out.values[0] == pytest.approx(0.94995)


def test_sgd_step_schedule():
    opt = OptimizerState(learning_rate=0.01, milestones=(200,), factor=0.1)
    assert opt.lr_at(199) == 0.01
    assert opt.lr_at(200) == pytest.approx(0.001)
    assert opt.lr_at(0) == 0.01
    two = OptimizerState(learning_rate=0.01, milestones=(10, 20), factor=0.1)
    assert two.lr_at(25) == pytest.approx(0.01 * 0.1**2)


def test_sgd_step_nonfinite_gradient_names_index():
    arch = ArchDescriptor(input_dim=1, hidden_dims=(), num_classes=2)
    params = init_params(arch, 0)
    grads = np.array([0.0, np.inf, 0.0, 0.0])
    with pytest.raises(ValueError, match="index 1"):
        sgd_step(params, grads, OptimizerState(learning_rate=0.1), 0)


def test_sgd_step_zero_lr_identity():
    arch = ArchDescriptor(input_dim=2, hidden_dims=(8,), num_classes=2)
    params = init_params(arch, 3)
    out = sgd_step(params, np.ones_like(params.values), OptimizerState(learning_rate=0.0), 0)
    assert np.array_equal(out.values, params.values)


def test_operations_are_pure():
    arch = ArchDescriptor(input_dim=3, hidden_dims=(8,), num_classes=2, norm="group", groups=4)
    params = init_params(arch, 9)
    before = params.values.copy()
    batch = Batch(np.random.default_rng(1).normal(size=(4, 3)), np.array([0, 1, 0, 1]))
    logits = forward(params, batch)
    backward(params, batch, np.ones_like(logits))
    sgd_step(params, np.ones_like(params.values), OptimizerState(learning_rate=0.1), 0)
    assert np.array_equal(params.values, before)
