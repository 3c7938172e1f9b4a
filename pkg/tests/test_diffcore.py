import numpy as np
import pytest

from advrect import diffcore as dc
from advrect.errors import ContractViolation

from oracles import (
    assert_grad_close,
    finite_diff_grad,
    loop_entropy_bits,
    loop_kl,
    loop_matmul,
    loop_mse,
)


def test_dense_identity():
    x = dc.Tensor(np.eye(2))
    w = dc.Tensor(np.eye(2))
    b = dc.Tensor(np.zeros(2))
    out = dc.forward_dense(x, w, b)
    np.testing.assert_allclose(out.value, np.eye(2))


def test_dense_direct():
    out = dc.forward_dense(dc.Tensor([[1.0, 2.0]]), dc.Tensor([[1.0], [1.0]]), dc.Tensor([3.0]))
    np.testing.assert_allclose(out.value, [[6.0]])


def test_dense_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3)).astype(np.float32)
    w = rng.normal(size=(3, 2)).astype(np.float32)
    b = rng.normal(size=2).astype(np.float32)
    out = dc.forward_dense(dc.Tensor(x), dc.Tensor(w), dc.Tensor(b))
    np.testing.assert_allclose(out.value, loop_matmul(x, w, b), atol=1e-6)


def test_dense_shape_mismatch():
    with pytest.raises(ContractViolation):
        dc.forward_dense(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((4, 2))), dc.Tensor(np.ones(2)))


def test_cross_entropy_uniform():
    logits = dc.Tensor(np.zeros((2, 10)))
    loss = dc.softmax_cross_entropy(logits, np.array([3, 7]))
    assert abs(loss.scalar - np.log(10.0)) < 1e-6


def test_cross_entropy_saturated():
    z = np.zeros((1, 5), dtype=np.float32)
    z[0, 2] = 1e6
    loss = dc.softmax_cross_entropy(dc.Tensor(z), np.array([2]))
    assert loss.scalar < 1e-6


def test_cross_entropy_label_range():
    with pytest.raises(ContractViolation):
        dc.softmax_cross_entropy(dc.Tensor(np.zeros((1, 4))), np.array([4]))


def test_cross_entropy_grad_matches_fd():
    rng = np.random.default_rng(1)
    z0 = rng.normal(size=(3, 5))
    y = np.array([0, 2, 4])

    def f(z):
        return dc.softmax_cross_entropy(dc.Tensor(z), y).scalar

    logits = dc.Tensor(z0)
    loss = dc.softmax_cross_entropy(logits, y)
    analytic = dc.input_gradient(loss, logits).value
    assert_grad_close(analytic, finite_diff_grad(f, z0))


def test_entropy_values():
    onehot = np.zeros((1, 10))
    onehot[0, 0] = 1.0
    assert dc.entropy_loss(dc.Tensor(onehot)).scalar == pytest.approx(0.0, abs=1e-9)

    uniform = np.full((1, 10), 0.1)
    assert dc.entropy_loss(dc.Tensor(uniform)).scalar == pytest.approx(np.log2(10.0), abs=1e-6)

    two = np.zeros((1, 10))
    two[0, 0] = two[0, 1] = 0.5
    assert dc.entropy_loss(dc.Tensor(two)).scalar == pytest.approx(1.0, abs=1e-7)


def test_entropy_matches_loop_oracle():
    rng = np.random.default_rng(2)
    raw = rng.random((4, 6))
    p = raw / raw.sum(axis=1, keepdims=True)
    rows = dc.entropy_rows(dc.Tensor(p)).value
    np.testing.assert_allclose(rows, loop_entropy_bits(p.astype(np.float32)), atol=1e-6)


def test_entropy_rejects_unnormalized():
    with pytest.raises(ContractViolation):
        dc.entropy_loss(dc.Tensor(np.full((1, 4), 0.3)))


def test_entropy_permutation_invariant():
    rng = np.random.default_rng(3)
    for _ in range(50):
        raw = rng.random((2, 8))
        p = raw / raw.sum(axis=1, keepdims=True)
        perm = rng.permutation(8)
        a = dc.entropy_rows(dc.Tensor(p)).value
        b = dc.entropy_rows(dc.Tensor(p[:, perm])).value
        np.testing.assert_allclose(a, b, atol=1e-6)


def test_mse_values():
    a = dc.Tensor([[1.0, 2.0]])
    assert dc.mse_loss(a, dc.Tensor([[1.0, 2.0]])).scalar == 0.0
    assert dc.mse_loss(dc.Tensor([0.0]), dc.Tensor([2.0])).scalar == pytest.approx(4.0)


def test_mse_matches_loop_oracle():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 7)).astype(np.float32)
    b = rng.normal(size=(3, 7)).astype(np.float32)
    assert dc.mse_loss(dc.Tensor(a), dc.Tensor(b)).scalar == pytest.approx(loop_mse(a, b), abs=1e-6)


def test_mse_shape_mismatch():
    with pytest.raises(ContractViolation):
        dc.mse_loss(dc.Tensor(np.ones(3)), dc.Tensor(np.ones(4)))


def test_kl_values():
    p = np.array([[0.25, 0.75]])
    assert dc.kl_divergence(dc.Tensor(p), dc.Tensor(p)).scalar == pytest.approx(0.0, abs=1e-9)
    pk = np.array([[1.0, 0.0]])
    qk = np.array([[0.5, 0.5]])
    assert dc.kl_divergence(dc.Tensor(pk), dc.Tensor(qk)).scalar == pytest.approx(np.log(2.0), abs=1e-6)


def test_kl_matches_loop_oracle():
    rng = np.random.default_rng(5)
    rp, rq = rng.random((3, 5)), rng.random((3, 5))
    p = (rp / rp.sum(axis=1, keepdims=True)).astype(np.float32)
    q = (rq / rq.sum(axis=1, keepdims=True)).astype(np.float32)
    # renormalize after the float32 round so rows pass the 1e-5 gate exactly
    assert dc.kl_divergence(dc.Tensor(p), dc.Tensor(q)).scalar == pytest.approx(loop_kl(p, q), abs=1e-6)


def test_kl_rejects_unnormalized():
    with pytest.raises(ContractViolation):
        dc.kl_divergence(dc.Tensor(np.full((1, 4), 0.3)), dc.Tensor(np.full((1, 4), 0.25)))


def test_input_gradient_sum_squares():
    x0 = np.array([[1.0, -2.0, 3.0]])
    x = dc.Tensor(x0)
    loss = dc.sum_all(dc.square(x))
    g = dc.input_gradient(loss, x).value
    np.testing.assert_allclose(g, 2.0 * x0, rtol=1e-6)


def test_input_gradient_disconnected_is_zero():
    x = dc.Tensor(np.ones((2, 2)))
    y = dc.Tensor(np.ones((2, 2)))
    dc.square(x)  # x participates in a tape, but not the loss below
    loss = dc.sum_all(dc.square(y))
    g = dc.input_gradient(loss, x).value
    np.testing.assert_array_equal(g, np.zeros((2, 2)))


def test_input_gradient_never_used_raises():
    x = dc.Tensor(np.ones(2))
    loss = dc.sum_all(dc.square(dc.Tensor(np.ones(2))))
    with pytest.raises(ContractViolation):
        dc.input_gradient(loss, x)


def test_input_gradient_non_leaf_raises():
    x = dc.Tensor(np.ones(2))
    mid = dc.square(x)
    loss = dc.sum_all(mid)
    with pytest.raises(ContractViolation):
        dc.input_gradient(loss, mid)


def _mlp_loss(x, w1, b1, w2, b2, y):
    h = dc.relu(dc.forward_dense(x, w1, b1))
    return dc.softmax_cross_entropy(dc.forward_dense(h, w2, b2), y)


def test_full_model_gradients_match_fd():
    rng = np.random.default_rng(6)
    x0 = rng.normal(size=(4, 6))
    w1_0 = rng.normal(size=(6, 8)) * 0.5
    b1_0 = rng.normal(size=8) * 0.1
    w2_0 = rng.normal(size=(8, 3)) * 0.5
    b2_0 = rng.normal(size=3) * 0.1
    y = np.array([0, 1, 2, 1])

    parts = {"x": x0, "w1": w1_0, "b1": b1_0, "w2": w2_0, "b2": b2_0}
    tensors = {k: dc.Tensor(v) for k, v in parts.items()}
    loss = _mlp_loss(tensors["x"], tensors["w1"], tensors["b1"], tensors["w2"], tensors["b2"], y)
    grads = dc.gradients(loss, [tensors[k] for k in parts])

    for gi, (name, base) in zip(grads, parts.items()):
        def f(v, _name=name):
            vals = {k: parts[k] for k in parts}
            vals[_name] = v
            ts = {k: dc.Tensor(val) for k, val in vals.items()}
            return _mlp_loss(ts["x"], ts["w1"], ts["b1"], ts["w2"], ts["b2"], y).scalar

        assert_grad_close(gi, finite_diff_grad(f, base))


def test_entropy_through_softmax_matches_fd():
    rng = np.random.default_rng(7)
    z0 = rng.normal(size=(3, 6))

    def f(z):
        return dc.entropy_loss(dc.softmax(dc.Tensor(z))).scalar

    logits = dc.Tensor(z0)
    loss = dc.entropy_loss(dc.softmax(logits))
    analytic = dc.input_gradient(loss, logits).value
    assert_grad_close(analytic, finite_diff_grad(f, z0))


def test_weighted_row_objective_matches_fd():
    # the rectifier stage objective: mean(aux_rows - beta * ent_rows)
    rng = np.random.default_rng(8)
    z0 = rng.normal(size=(3, 5))
    target = rng.random((3, 5)).astype(np.float32)
    beta = np.array([0.25, 0.0625, 0.1])

    def build(z):
        x = dc.Tensor(z)
        probs = dc.softmax(x)
        aux = dc.mse_rows(x, dc.Tensor(target))
        ent = dc.entropy_rows(probs)
        return x, dc.mean_rows(dc.sub(aux, dc.scale_rows(ent, beta)))

    x, loss = build(z0)
    analytic = dc.input_gradient(loss, x).value
    assert_grad_close(analytic, finite_diff_grad(lambda z: build(z)[1].scalar, z0))


def test_loss_value_algebra_matches_fd():
    rng = np.random.default_rng(9)
    z0 = rng.normal(size=(2, 4))
    y = np.array([1, 3])
    sigma = 0.7

    def build(z):
        x = dc.Tensor(z)
        probs = dc.softmax(x)
        comp = dc.softmax_cross_entropy(x, y) - dc.mse_loss(x, dc.Tensor(np.zeros((2, 4)))) + sigma * dc.entropy_loss(probs)
        return x, comp

    x, loss = build(z0)
    analytic = dc.input_gradient(loss, x).value
    assert_grad_close(analytic, finite_diff_grad(lambda z: build(z)[1].scalar, z0))


def test_rotate_hw_roundtrip_and_grad():
    rng = np.random.default_rng(10)
    x0 = rng.random((2, 1, 4, 4))
    x = dc.Tensor(x0)
    full = dc.rotate_hw(dc.rotate_hw(dc.rotate_hw(dc.rotate_hw(x, 1), 1), 1), 1)
    np.testing.assert_allclose(full.value, x.value)

    w = rng.normal(size=(2, 1, 4, 4)).astype(np.float32)

    def f(v):
        r = dc.rotate_hw(dc.Tensor(v), 1)
        return dc.mse_loss(r, dc.Tensor(w)).scalar

    loss = dc.mse_loss(dc.rotate_hw(x, 1), dc.Tensor(w))
    analytic = dc.input_gradient(loss, x).value
    assert_grad_close(analytic, finite_diff_grad(f, x0))


def test_cw_margin_grad_matches_fd():
    rng = np.random.default_rng(11)
    z0 = rng.normal(size=(3, 5)) * 2.0
    y = np.array([0, 1, 2])

    def f(z):
        return dc.mean_rows(dc.cw_margin_rows(dc.Tensor(z), y)).scalar

    logits = dc.Tensor(z0)
    loss = dc.mean_rows(dc.cw_margin_rows(logits, y))
    analytic = dc.input_gradient(loss, logits).value
    assert_grad_close(analytic, finite_diff_grad(f, z0))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(12)
    z = rng.normal(size=(50, 10)) * 20.0
    p = dc.softmax(dc.Tensor(z)).value
    np.testing.assert_allclose(p.sum(axis=1), np.ones(50), atol=1e-6)


def test_backward_bit_deterministic():
    rng = np.random.default_rng(13)
    z0 = rng.normal(size=(4, 6))
    y = np.array([0, 1, 2, 3])

    def run():
        x = dc.Tensor(z0)
        h = dc.relu(dc.forward_dense(x, dc.Tensor(np.eye(6)), dc.Tensor(np.zeros(6))))
        loss = dc.softmax_cross_entropy(h, y)
        return dc.input_gradient(loss, x).value.tobytes()

    assert run() == run()


def test_finite_outputs_on_finite_inputs():
    rng = np.random.default_rng(14)
    z = rng.normal(size=(8, 6)) * 50.0
    p = dc.softmax(dc.Tensor(z))
    assert np.all(np.isfinite(p.value))
    assert np.isfinite(dc.entropy_loss(p).scalar)
    assert np.isfinite(dc.softmax_cross_entropy(dc.Tensor(z), np.zeros(8, dtype=int)).scalar)


def test_leaf_rejects_non_finite():
    with pytest.raises(ContractViolation):
        dc.Tensor([np.inf, 1.0])
