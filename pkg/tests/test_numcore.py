# tests/test_numcore.py
import numpy as np
import pytest

from actiongraph import numcore as nc
from actiongraph.errors import ContractError, ParameterError, ShapeError


@pytest.fixture(name="rng")
def rng_fixture():
    return np.random.default_rng(1234)


def composite_loss(p):
    """Chain of most primitives, reduced to a scalar."""
    h = nc.elementwise(nc.add_bias(nc.matmul(p["x"], p["w"]), p["b"]), "tanh")
    sim = nc.cosine_similarity_matrix(h)
    pooled = nc.topk_mean_columns(nc.l2_normalize_rows(h), 2)
    log_p = nc.log_softmax_rows(pooled)
    log_q = nc.elementwise(nc.softmax_rows(pooled), "log")
    row = nc.select_row(nc.transpose(h), 1)
    cos = nc.cosine_rows(row, nc.scale(nc.column_sum(nc.transpose(h)), 0.5))
    return nc.total(
        [
            nc.sum_all(nc.mul_const(sim, np.arange(25.0).reshape(5, 5) / 25.0)),
            nc.scale(nc.sum_all(log_p), -1.0),
            nc.scale(nc.sum_all(log_q), -0.5),
            nc.affine(cos, -0.5, 0.5),
            nc.sum_all(nc.elementwise(nc.sub(h, nc.elementwise(h, "relu")), "abs")),
        ]
    )


# =====================================================================
# TESTS FOR MATRIX AND TAPE
# =====================================================================


def test_matrix_coerces_vectors_to_rows():
    assert nc.Matrix([1.0, 2.0, 3.0]).shape == (1, 3)
    assert nc.Matrix(2.5).shape == (1, 1)
    with pytest.raises(ShapeError):
        nc.Matrix(np.zeros((2, 2, 2)))


def test_constants_are_not_recorded():
    out = nc.matmul(nc.constant(np.eye(2)), nc.constant(np.ones((2, 3))))
    assert out.tape is None


def test_backward_requires_scalar_loss(rng):
    tape = nc.Tape()
    w = tape.watch(rng.standard_normal((2, 2)), "w")
    with pytest.raises(ContractError):
        nc.backward(tape, nc.scale(w, 2.0))


def test_unreachable_parameter_gets_zero_gradient(rng):
    tape = nc.Tape()
    a = tape.watch(rng.standard_normal((2, 2)), "a")
    tape.watch(rng.standard_normal((3, 1)), "unused")
    grads = nc.backward(tape, nc.sum_all(a))
    np.testing.assert_array_equal(grads["a"], np.ones((2, 2)))
    np.testing.assert_array_equal(grads["unused"], np.zeros((3, 1)))


def test_constant_loss_gives_zero_gradients(rng):
    tape = nc.Tape()
    tape.watch(rng.standard_normal((2, 2)), "a")
    grads = nc.backward(tape, nc.total([]))
    np.testing.assert_array_equal(grads["a"], np.zeros((2, 2)))


def test_gradients_accumulate_over_reuse():
    tape = nc.Tape()
    a = tape.watch(np.array([[2.0]]), "a")
    grads = nc.backward(tape, nc.add(nc.scale(a, 3.0), nc.scale(a, 4.0)))
    assert grads["a"][0, 0] == 7.0


# =====================================================================
# TESTS FOR FORWARD OPERATIONS
# =====================================================================


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        nc.matmul(nc.constant(np.ones((2, 3))), nc.constant(np.ones((2, 3))))


def test_softmax_rows_sum_to_one(rng):
    out = nc.softmax_rows(nc.constant(rng.standard_normal((4, 6)) * 50.0))
    np.testing.assert_allclose(out.value.sum(axis=1), np.ones(4))


def test_log_softmax_matches_log_of_softmax(rng):
    a = nc.constant(rng.standard_normal((4, 6)))
    expected = np.log(nc.softmax_rows(a).value)
    np.testing.assert_allclose(nc.log_softmax_rows(a).value, expected)


def test_log_softmax_stays_finite_on_large_gaps():
    out = nc.log_softmax_rows(nc.constant(np.array([[0.0, 2000.0]])))
    assert np.all(np.isfinite(out.value))
    assert out.value[0, 0] == pytest.approx(-2000.0)
    assert out.value[0, 1] == 0.0


def test_cosine_of_parallel_rows_is_exactly_one():
    for row in (np.ones(8), np.array([0.3, 0.7, 1.1]), np.full(7, 1.0 / 3.0)):
        sim = nc.cosine_similarity_matrix(nc.constant(np.tile(row, (5, 1)))).value
        np.testing.assert_array_equal(sim, np.ones((5, 5)))
        flipped = nc.cosine_similarity_matrix(nc.constant(np.stack([row, -2.0 * row]))).value
        np.testing.assert_array_equal(flipped, np.array([[1.0, -1.0], [-1.0, 1.0]]))


def test_topk_mean_ties_prefer_lowest_row():
    tape = nc.Tape()
    a = tape.watch(np.array([[1.0], [1.0], [0.0]]), "a")
    out = nc.topk_mean_columns(a, 1)
    assert out.item() == 1.0
    grads = nc.backward(tape, nc.sum_all(out))
    np.testing.assert_array_equal(grads["a"], np.array([[1.0], [0.0], [0.0]]))


def test_topk_mean_rejects_bad_k():
    with pytest.raises(ParameterError):
        nc.topk_mean_columns(nc.constant(np.ones((3, 2))), 4)
    with pytest.raises(ParameterError):
        nc.topk_mean_columns(nc.constant(np.ones((3, 2))), 0)


def test_cosine_similarity_matrix_properties(rng):
    x = rng.standard_normal((6, 4))
    x[2] = 0.0
    sim = nc.cosine_similarity_matrix(nc.constant(x)).value
    np.testing.assert_array_equal(sim, sim.T)
    assert np.all(sim <= 1.0) and np.all(sim >= -1.0)
    assert sim[2, 2] == 0.0
    np.testing.assert_array_equal(sim[2], np.zeros(6))
    assert all(sim[i, i] == 1.0 for i in (0, 1, 3, 4, 5))


def test_cosine_rows_of_zero_row_is_zero():
    tape = nc.Tape()
    a = tape.watch(np.zeros((1, 3)), "a")
    out = nc.cosine_rows(a, nc.constant(np.ones((1, 3))))
    assert out.item() == 0.0
    np.testing.assert_array_equal(nc.backward(tape, out)["a"], np.zeros((1, 3)))


def test_log_rejects_non_positive():
    with pytest.raises(ParameterError):
        nc.elementwise(nc.constant(np.array([[1.0, 0.0]])), "log")


def test_dropout_identity_at_inference(rng):
    a = nc.constant(rng.standard_normal((3, 4)))
    assert nc.dropout(a, 0.5, rng, training=False) is a
    assert nc.dropout(a, 0.0, rng, training=True) is a


def test_dropout_is_inverted(rng):
    a = nc.constant(np.ones((200, 50)))
    out = nc.dropout(a, 0.5, rng, training=True).value
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.05


def test_dropout_rejects_probability_one(rng):
    with pytest.raises(ParameterError):
        nc.dropout(nc.constant(np.ones((2, 2))), 1.0, rng, training=True)


# =====================================================================
# TESTS FOR GRADIENTS
# =====================================================================


def test_composite_gradients_match_finite_differences(rng):
    params = {
        "x": rng.standard_normal((5, 4)),
        "w": rng.standard_normal((4, 3)),
        "b": rng.standard_normal((1, 3)),
    }
    report = nc.gradcheck(composite_loss, params)
    assert set(report) == {"x", "w", "b"}
    assert max(report.values()) < 1e-5


def test_gradcheck_detects_corrupted_gradient(rng):
    params = {"x": rng.standard_normal((5, 4)), "w": rng.standard_normal((4, 3)), "b": np.zeros((1, 3))}
    report = nc.gradcheck(composite_loss, params, corrupt="w")
    assert report["w"] > 1e-2
    assert report["x"] < 1e-5


def test_gradcheck_samples_coordinates(rng):
    params = {"x": rng.standard_normal((5, 4)), "w": rng.standard_normal((4, 3)), "b": np.zeros((1, 3))}
    report = nc.gradcheck(composite_loss, params, samples=4)
    assert max(report.values()) < 1e-5


def test_relative_error_floor():
    assert nc.relative_error(0.0, 0.0) == 0.0
    assert nc.relative_error(1e-9, 0.0) == pytest.approx(1e-4)
    assert nc.relative_error(2.0, 1.0) == pytest.approx(0.5)


# =====================================================================
# TESTS FOR ADAM
# =====================================================================


def test_adam_first_step_moves_by_learning_rate():
    state = nc.AdamState(learning_rate=0.01)
    params = {"w": np.array([[1.0, -2.0, 3.0]])}
    grads = {"w": np.array([[0.5, -0.25, 2.0]])}
    updated = nc.adam_step(params, grads, state)
    np.testing.assert_allclose(updated["w"], params["w"] - 0.01 * np.sign(grads["w"]), atol=1e-8)
    assert state.step == 1
    np.testing.assert_allclose(state.m["w"], 0.1 * grads["w"])


def test_adam_zero_gradient_leaves_params():
    state = nc.AdamState()
    params = {"w": np.ones((2, 2))}
    updated = nc.adam_step(params, {"w": np.zeros((2, 2))}, state)
    np.testing.assert_array_equal(updated["w"], params["w"])


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        nc.adam_step({"w": np.ones((2, 2))}, {"w": np.ones((2, 3))}, nc.AdamState())
    with pytest.raises(ShapeError):
        nc.adam_step({"w": np.ones((2, 2))}, {}, nc.AdamState())


def test_adam_minimizes_quadratic():
    state = nc.AdamState(learning_rate=0.05)
    params = {"w": np.array([[3.0, -4.0]])}
    for _ in range(1000):
        params = nc.adam_step(params, {"w": 2.0 * params["w"]}, state)
    assert np.abs(params["w"]).max() < 0.1
