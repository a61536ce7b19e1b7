import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import op_grad_error
from sparsetrack import kernels
from sparsetrack.numerics import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    UndefinedRowError,
    backward,
    concat,
    dropout,
    gather_rows,
    gelu,
    layer_norm,
    logsumexp,
    matmul,
    mse,
    scatter_add_rows,
    softmax,
)

TRIALS = 100
TOL = 1e-3


def _uniform(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


# --- matmul -------------------------------------------------------------------------


def test_matmul_identity_and_hand_case():
    x = np.random.default_rng(0).normal(size=(3, 5))
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(x)).data, x)
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(TRIALS):
        m, k, n = rng.integers(1, 5, size=3)
        err = op_grad_error(lambda t: matmul(t[0], t[1]), [_uniform(rng, m, k), _uniform(rng, k, n)], rng)
        assert err < TOL


def test_batched_matmul_gradient():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = _uniform(rng, 2, 3, 4, 5)
        b = _uniform(rng, 2, 3, 5, 2)
        assert op_grad_error(lambda t: matmul(t[0], t[1]), [a, b], rng) < TOL
        w = _uniform(rng, 5, 3)
        assert op_grad_error(lambda t: matmul(t[0], t[1]), [a, w], rng) < TOL


# --- softmax ------------------------------------------------------------------------


def test_softmax_examples():
    assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=0)
    assert softmax(Tensor([3.0, -np.inf, -np.inf])).data.tolist() == [1.0, 0.0, 0.0]
    x = np.array([1.0, 2.0, 3.0])
    brute = np.exp(x) / np.exp(x).sum()
    assert np.allclose(softmax(Tensor(x)).data, brute, rtol=0, atol=1e-15)


def test_softmax_all_masked_row_is_an_error():
    with pytest.raises(UndefinedRowError):
        softmax(Tensor([[0.0, 1.0], [-np.inf, -np.inf]]))


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-30, 30), min_size=1, max_size=8),
    st.floats(-50, 50),
)
def test_softmax_rows_sum_to_one_and_shift_invariant(row, c):
    x = np.array(row)
    s = softmax(Tensor(x)).data
    assert abs(s.sum() - 1.0) < 1e-9
    assert np.max(np.abs(softmax(Tensor(x + c)).data - s)) < 1e-9


def test_softmax_gradient():
    rng = np.random.default_rng(3)
    for _ in range(TRIALS):
        r, c = rng.integers(1, 5, size=2)
        assert op_grad_error(lambda t: softmax(t[0]), [_uniform(rng, r, c)], rng) < TOL


def test_logsumexp_gradient():
    rng = np.random.default_rng(4)
    for _ in range(TRIALS):
        r, c = rng.integers(1, 5, size=2)
        assert op_grad_error(lambda t: logsumexp(t[0]), [_uniform(rng, r, c)], rng) < TOL


# --- gelu -----------------------------------------------------------------------------


def test_gelu_center_and_asymptote():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-4


def test_gelu_gradient():
    rng = np.random.default_rng(5)
    for _ in range(TRIALS):
        assert op_grad_error(lambda t: gelu(t[0]), [_uniform(rng, 3, 4)], rng) < TOL


# --- layer norm, mse, concat, gather/scatter, dropout ------------------------------------


def test_layer_norm_standardizes_rows():
    out = layer_norm(Tensor([[1.0, 2.0, 3.0]])).data[0]
    assert abs(out.mean()) < 1e-6
    assert abs(out.var() - 1.0) < 1e-6


def test_layer_norm_gradient_with_affine():
    rng = np.random.default_rng(6)
    for _ in range(TRIALS):
        d = int(rng.integers(2, 6))
        arrays = [_uniform(rng, 3, d), _uniform(rng, d), _uniform(rng, d)]
        assert op_grad_error(lambda t: layer_norm(t[0], t[1], t[2]), arrays, rng) < TOL


def test_mse_zero_and_gradient():
    x = np.random.default_rng(7).normal(size=(4, 3))
    assert mse(Tensor(x), Tensor(x)).item() == 0.0
    rng = np.random.default_rng(8)
    for _ in range(TRIALS):
        assert op_grad_error(lambda t: mse(t[0], t[1]), [_uniform(rng, 2, 3), _uniform(rng, 2, 3)], rng) < TOL


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_concat_gradient():
    rng = np.random.default_rng(9)
    for _ in range(TRIALS):
        axis = int(rng.integers(0, 2))
        arrays = [_uniform(rng, 2, 3), _uniform(rng, 2, 3), _uniform(rng, 2, 3)]
        assert op_grad_error(lambda t: concat(t, axis=axis), arrays, rng) < TOL


def test_gather_and_scatter_gradients():
    rng = np.random.default_rng(10)
    for _ in range(TRIALS):
        idx = rng.integers(0, 5, size=7)
        assert op_grad_error(lambda t: gather_rows(t[0], idx), [_uniform(rng, 5, 3)], rng) < TOL
        arrays = [_uniform(rng, 5, 3), _uniform(rng, 7, 3)]
        assert op_grad_error(lambda t: scatter_add_rows(t[0], idx, t[1]), arrays, rng) < TOL


def test_gather_scatter_round_trip_is_identity():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(1, 40))
        x = rng.normal(size=(n, 6))
        perm = rng.permutation(n)
        # dispatch in expert-grouped order, then scatter back by the same index map
        dispatched = gather_rows(Tensor(x), perm)
        back = scatter_add_rows(Tensor(np.zeros_like(x)), perm, dispatched)
        assert np.max(np.abs(back.data - x)) <= 1e-12


def test_index_errors():
    x = Tensor(np.zeros((3, 2)))
    with pytest.raises(IndexError):
        gather_rows(x, np.array([0, 3]))
    with pytest.raises(IndexError):
        gather_rows(x, np.array([-1]))
    with pytest.raises(IndexError):
        scatter_add_rows(x, np.array([5]), Tensor(np.zeros((1, 2))))


def test_dropout_identity_in_eval_and_gradient_in_training():
    x = Tensor(np.ones((4, 4)))
    assert dropout(x, 0.2, np.random.default_rng(0), training=False) is x
    with pytest.raises(ValueError):
        dropout(x, 1.0, np.random.default_rng(0), training=True)
    rng = np.random.default_rng(12)
    for _ in range(TRIALS):
        seed = int(rng.integers(1 << 30))
        build = lambda t: dropout(t[0], 0.3, np.random.default_rng(seed), training=True)  # noqa: E731
        assert op_grad_error(build, [_uniform(rng, 3, 3)], rng) < TOL


# --- backward contract ----------------------------------------------------------------


def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_mse_linear_model_matches_finite_differences():
    rng = np.random.default_rng(13)
    for _ in range(TRIALS):
        w, x, y = _uniform(rng, 3, 2), _uniform(rng, 5, 3), _uniform(rng, 5, 2)
        assert op_grad_error(lambda t: mse(matmul(t[1], t[0]), t[2]), [w, x, y], rng) < TOL


def test_second_backward_on_same_graph_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_leaf_gradients_accumulate_across_graphs():
    x = Tensor(np.ones(3), requires_grad=True)
    backward(x.sum())
    backward((x * 2.0).sum())
    assert np.array_equal(x.grad, np.full(3, 3.0))


def test_non_scalar_loss_is_a_contract_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(x * 2.0)


def test_non_finite_loss_aborts():
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    with pytest.raises(NonFiniteError):
        backward(x.log().sum())


def _forward_backward(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
    x = Tensor(rng.normal(size=(8, 6)))
    h = dropout(gelu(layer_norm(matmul(x, w))), 0.2, rng, training=True)
    loss = mse(softmax(h), np.zeros((8, 6)))
    backward(loss)
    return loss.data.tobytes(), w.grad.tobytes()


def test_seeded_forward_backward_is_bit_reproducible():
    assert _forward_backward(3) == _forward_backward(3)


# --- compiled vs fallback kernels -----------------------------------------------------


@pytest.mark.skipif("compiled" not in kernels.available_backends(), reason="extension not built")
def test_backends_agree():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(64, 33)) * 3
    for a, b in zip(kernels.get_kernel("gelu_tanh", "python")(x), kernels.get_kernel("gelu_tanh", "compiled")(x)):
        assert np.max(np.abs(a - b)) < 1e-12
    for a, b in zip(
        kernels.get_kernel("layer_norm_fwd", "python")(x, 1e-8), kernels.get_kernel("layer_norm_fwd", "compiled")(x, 1e-8)
    ):
        assert np.max(np.abs(a - b)) < 1e-12
    xhat, rstd = kernels.get_kernel("layer_norm_fwd", "python")(x, 1e-8)
    g = rng.normal(size=x.shape)
    assert (
        np.max(
            np.abs(
                kernels.get_kernel("layer_norm_bwd", "python")(g, xhat, rstd)
                - kernels.get_kernel("layer_norm_bwd", "compiled")(g, xhat, rstd)
            )
        )
        < 1e-12
    )
    logits = rng.normal(size=(200, 4))
    logits[::7, 2] = logits[::7, 0]  # ties
    for a, b in zip(kernels.get_kernel("top1_dispatch", "python")(logits), kernels.get_kernel("top1_dispatch", "compiled")(logits)):
        assert np.array_equal(a, b)
    rows, cols = rng.integers(0, 16, 300), rng.integers(0, 16, 300)
    assert np.array_equal(
        kernels.get_kernel("last_writer_map", "python")(rows, cols, 16, 16),
        kernels.get_kernel("last_writer_map", "compiled")(rows, cols, 16, 16),
    )
    idx = rng.integers(0, 10, 50)
    vals = rng.normal(size=(50, 3))
    o1, o2 = np.zeros((10, 3)), np.zeros((10, 3))
    kernels.get_kernel("index_add_rows", "python")(o1, idx, vals)
    kernels.get_kernel("index_add_rows", "compiled")(o2, idx, vals)
    assert np.max(np.abs(o1 - o2)) < 1e-12
    bg = np.full((16, 16, 3), 0.2)
    args = (16, 16, bg, np.array([[4.3, 5.1], [10.0, 12.5]]), np.array([2.5, 3.0]), np.array([[1, 0, 0], [0, 0, 1.0]]), 4)
    assert np.array_equal(kernels.get_kernel("rasterize_disks", "python")(*args), kernels.get_kernel("rasterize_disks", "compiled")(*args))


def test_backend_switch_round_trips():
    start = kernels.BACKEND
    try:
        kernels.use_backend("python")
        assert kernels.BACKEND == "python"
        y1 = gelu(Tensor([0.5])).data
    finally:
        kernels.use_backend(start)
    assert np.allclose(gelu(Tensor([0.5])).data, y1, rtol=0, atol=1e-15)
