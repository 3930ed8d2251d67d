"""Autodiff core: forward values from the worked examples, finite-difference
gradient oracles, and tape structure properties."""

import numpy as np
import pytest

from metasum import tensor as T
from gradcheck import check_op_gradients, rel_err, numeric_grad


def test_matmul_identity():
    a = T.Tensor(np.eye(2))
    b = T.Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(T.matmul(a, b).data, [[5.0, 6.0], [7.0, 8.0]])


def test_matmul_hand_arithmetic():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    assert np.array_equal(out.data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 2))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    err = check_op_gradients(lambda ts: T.matmul(ts[0], ts[1]),
                             [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
                             tol=1e-6)
    assert err <= 1e-6


def test_softmax_symmetry():
    out = T.softmax_rows(T.Tensor([[0.0, 0.0]]))
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_softmax_stabilized_against_overflow():
    out = T.softmax_rows(T.Tensor([[1000.0, 0.0]]))
    assert np.isfinite(out.data).all()
    assert out.data[0, 0] == pytest.approx(1.0)
    assert out.data[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_direct_computation():
    out = T.softmax_rows(T.Tensor([[1.0, 2.0, 3.0]]))
    assert np.allclose(out.data, [[0.09003, 0.24473, 0.66524]], atol=1e-5)


def test_softmax_rows_sum_to_one_and_masked_entries_zero():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 6))
    mask = rng.random((4, 6)) > 0.4
    mask[:, 0] = True
    out = T.softmax_rows(T.Tensor(x), mask)
    assert np.allclose(out.data.sum(axis=1), 1.0)
    assert (out.data[~mask] == 0.0).all()


def test_softmax_fully_masked_row_raises():
    mask = np.array([[True, True], [False, False]])
    with pytest.raises(T.DegenerateRowError, match="row 1"):
        T.softmax_rows(T.Tensor(np.zeros((2, 2))), mask)


def test_layer_norm_constant_vector_is_zero():
    out = T.layer_norm(T.Tensor([[3.0, 3.0, 3.0]]), T.Tensor(np.ones(3)),
                       T.Tensor(np.zeros(3)))
    assert np.allclose(out.data, 0.0)


def test_layer_norm_symmetric_standardization():
    out = T.layer_norm(T.Tensor([[1.0, 3.0]]), T.Tensor(np.ones(2)),
                       T.Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-6)


def test_layer_norm_requires_positive_eps():
    with pytest.raises(ValueError):
        T.layer_norm(T.Tensor([[1.0, 2.0]]), T.Tensor(np.ones(2)),
                     T.Tensor(np.zeros(2)), eps=0.0)


def test_layer_norm_gradient():
    rng = np.random.default_rng(2)
    err = check_op_gradients(
        lambda ts: T.layer_norm(ts[0], ts[1], ts[2]),
        [rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)],
        tol=1e-5)
    assert err <= 1e-5


def test_cross_entropy_uniform_logits():
    loss = T.cross_entropy(T.Tensor(np.zeros((3, 4))), [1, 2, 3], pad_id=0)
    assert loss.item() == pytest.approx(np.log(4.0))


def test_cross_entropy_confident_match_goes_to_zero():
    logits = np.full((2, 4), -50.0)
    logits[0, 1] = 50.0
    logits[1, 3] = 50.0
    loss = T.cross_entropy(T.Tensor(logits), [1, 3], pad_id=0)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_all_pad_raises():
    with pytest.raises(T.EmptyLossError):
        T.cross_entropy(T.Tensor(np.zeros((2, 4))), [0, 0], pad_id=0)


def test_cross_entropy_pad_positions_contribute_nothing():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(4, 5))
    full = T.cross_entropy(T.Tensor(logits), [2, 0, 3, 0], pad_id=0)
    kept = T.cross_entropy(T.Tensor(logits[[0, 2]]), [2, 3], pad_id=0)
    assert full.item() == pytest.approx(kept.item())


def test_cross_entropy_gradient():
    rng = np.random.default_rng(4)
    targets = [1, 6, 0, 4, 2]
    err = check_op_gradients(
        lambda ts: T.cross_entropy(ts[0], targets, pad_id=0),
        [rng.normal(size=(5, 7))], tol=1e-5)
    assert err <= 1e-5


def test_backward_sum_gives_ones():
    x = T.Tensor(np.arange(6.0).reshape(2, 3))
    with T.ComputationTape() as tape:
        loss = T.sum_all(x)
    T.backward(tape, loss)
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_elementwise_square():
    rng = np.random.default_rng(5)
    x = T.Tensor(rng.normal(size=(3, 3)))
    with T.ComputationTape() as tape:
        loss = T.sum_all(T.mul(x, x))
    T.backward(tape, loss)
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar_root():
    x = T.Tensor(np.zeros((2, 2)))
    with T.ComputationTape() as tape:
        y = T.add(x, x)
    with pytest.raises(T.NonScalarRootError):
        T.backward(tape, y)


def test_backward_diamond_graph_accumulates_per_path():
    # out = 2*h + 3*h with h = x*x shared: d/dx = 10x
    rng = np.random.default_rng(6)
    x = T.Tensor(rng.normal(size=(2, 4)))
    with T.ComputationTape() as tape:
        h = T.mul(x, x)
        loss = T.sum_all(T.add(T.scale(h, 2.0), T.scale(h, 3.0)))
    T.backward(tape, loss)
    assert np.allclose(x.grad, 10 * x.data)

    # per-path gradients computed separately sum to the shared-graph gradient
    x2 = T.Tensor(x.data.copy())
    with T.ComputationTape() as tape2:
        loss2 = T.sum_all(T.scale(T.mul(x2, x2), 2.0))
    T.backward(tape2, loss2)
    x3 = T.Tensor(x.data.copy())
    with T.ComputationTape() as tape3:
        loss3 = T.sum_all(T.scale(T.mul(x3, x3), 3.0))
    T.backward(tape3, loss3)
    assert np.allclose(x.grad, x2.grad + x3.grad)


def test_tape_is_topologically_ordered():
    rng = np.random.default_rng(7)
    x = T.Tensor(rng.normal(size=(3, 3)))
    y = T.Tensor(rng.normal(size=(3, 3)))
    with T.ComputationTape() as tape:
        h = T.matmul(x, y)
        out = T.add(h, x)
        T.sum_all(T.gelu(out))
    assert len(tape) == 4
    for entry in tape.entries:
        for inp in entry.inputs:
            assert inp.tid < entry.output.tid


ELEMENTWISE_CASES = {
    "add": (lambda ts: T.add(ts[0], ts[1]), [(3, 4), (3, 4)]),
    "mul": (lambda ts: T.mul(ts[0], ts[1]), [(3, 4), (3, 4)]),
    "scale": (lambda ts: T.scale(ts[0], -1.7), [(3, 4)]),
    "gelu": (lambda ts: T.gelu(ts[0]), [(3, 4)]),
    "add_bias_vec": (lambda ts: T.add_bias(ts[0], ts[1]), [(3, 4), (4,)]),
    "add_bias_row": (lambda ts: T.add_bias(ts[0], ts[1]), [(3, 4), (1, 4)]),
    # weight the softmax output so the objective is not the constant row sum
    "softmax": (lambda ts: T.mul(T.softmax_rows(ts[0]), ts[1]), [(4, 5), (4, 5)]),
    "layer_norm": (lambda ts: T.layer_norm(ts[0], ts[1], ts[2]),
                   [(3, 5), (5,), (5,)]),
}

STRUCTURAL_CASES = {
    "matmul": (lambda ts: T.matmul(ts[0], ts[1]), [(3, 4), (4, 2)]),
    "transpose": (lambda ts: T.matmul(T.transpose(ts[0]), ts[1]),
                  [(4, 3), (4, 2)]),
    "slice_rows": (lambda ts: T.slice_rows(ts[0], 1, 3), [(4, 3)]),
    "slice_cols": (lambda ts: T.slice_cols(ts[0], 0, 2), [(3, 4)]),
    "concat_cols": (lambda ts: T.concat_cols(ts), [(3, 2), (3, 3)]),
    "concat_rows": (lambda ts: T.concat_rows(ts), [(2, 3), (4, 3)]),
    "embedding": (lambda ts: T.embedding(ts[0], [0, 2, 2, 1]), [(4, 5)]),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE_CASES))
@pytest.mark.parametrize("seed", range(10))
def test_elementwise_gradients_over_seeds(name, seed):
    build, shapes = ELEMENTWISE_CASES[name]
    rng = np.random.default_rng(seed + 100)
    check_op_gradients(build, [rng.normal(size=s) for s in shapes], tol=1e-5)


@pytest.mark.parametrize("name", sorted(STRUCTURAL_CASES))
@pytest.mark.parametrize("seed", range(10))
def test_structural_gradients_over_seeds(name, seed):
    build, shapes = STRUCTURAL_CASES[name]
    rng = np.random.default_rng(seed + 200)
    check_op_gradients(build, [rng.normal(size=s) for s in shapes], tol=1e-3)


def test_ops_are_deterministic():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(6, 6))
    outs = []
    for _ in range(2):
        a = T.Tensor(x.copy())
        out = T.softmax_rows(T.gelu(T.matmul(a, T.transpose(a))))
        outs.append(out.data.copy())
    assert np.array_equal(outs[0], outs[1])


def test_no_recording_outside_tape():
    tape = T.ComputationTape()
    with tape:
        T.add(T.Tensor([1.0]), T.Tensor([2.0]))
    before = len(tape)
    T.add(T.Tensor([1.0]), T.Tensor([2.0]))
    assert len(tape) == before


def test_numeric_grad_helper_on_quadratic():
    # the oracle itself: d/dx sum(x^2) = 2x
    x = np.array([[1.0, -2.0, 0.5]])
    (g,) = numeric_grad(lambda arrs: float((arrs[0] ** 2).sum()), [x])
    assert rel_err(g, 2 * x) <= 1e-8
