import numpy as np
import pytest

from itsrn import grad as G
from itsrn import gradcheck as gc


def test_sum_gradient_is_ones():
    tape = G.Tape()
    x = tape.param("x", np.arange(6.0).reshape(2, 3))
    g = G.backward(tape, G.sum_(x))
    np.testing.assert_array_equal(g["x"], np.ones((2, 3)))


def test_l1_norm_gradient_is_sign():
    tape = G.Tape()
    x = tape.param("x", np.array([2.0, -3.0]))
    np.testing.assert_array_equal(G.backward(tape, G.abs_sum(x))["x"], [1, -1])


def test_l1_loss_value_and_gradient():
    tape = G.Tape()
    pred = tape.param("p", np.array([1.0, 2.0, 3.0, 3.0]))
    loss = G.l1_loss(pred, np.array([0.5, 2.5, 2.5, 3.0]))
    assert float(loss.value) == pytest.approx(0.375)
    # sign(pred - gt) / N with the subgradient 0 at a zero residual
    np.testing.assert_array_equal(G.backward(tape, loss)["p"], [0.25, -0.25, 0.25, 0.0])


def _composite(seed):
    rng = np.random.default_rng(seed)
    params = {"x": rng.standard_normal((2, 5, 5)), "w": rng.standard_normal((3, 2, 3, 3)),
              "b": rng.standard_normal(3), "m": rng.standard_normal((4, 3))}
    gt = rng.standard_normal((25, 4))

    def loss_fn(tape, P):
        y = G.activation(G.conv2d(P["x"], P["w"], P["b"]), "relu")
        tok = G.transpose(G.reshape(y, (3, 25)), (1, 0))
        return G.l1_loss(G.matmul(tok, G.transpose(P["m"], (1, 0))), gt)
    return params, loss_fn


def test_composite_conv_relu_matmul_l1():
    rep = G.check_gradients(_composite, seeds=3)
    assert rep.passed(1e-4), rep.max_rel_err


def test_identity_has_zero_error():
    rep = G.check_gradients(gc.registry(include_model=False)["identity"])
    assert rep.worst < 1e-9


def test_gradient_of_sum_is_sum_of_gradients():
    rng = np.random.default_rng(0)
    xv, wv = rng.standard_normal((4, 3)), rng.standard_normal((2, 3))

    def grads(which):
        tape = G.Tape()
        x, w = tape.param("x", xv), tape.param("w", wv)
        y = G.linear(x, w)
        a = G.sum_(G.activation(y, "sin"))
        b = G.mean(G.mul(y, y))
        loss = {"a": a, "b": b, "ab": G.add(a, b)}[which]
        return G.backward(tape, loss)

    ga, gb, gab = grads("a"), grads("b"), grads("ab")
    for k in ("x", "w"):
        np.testing.assert_allclose(gab[k], ga[k] + gb[k], atol=1e-12)


def test_tape_is_single_use():
    tape = G.Tape()
    x = tape.param("x", np.ones(3))
    loss = G.sum_(x)
    G.backward(tape, loss)
    with pytest.raises(G.TapeError, match="already consumed"):
        G.backward(tape, loss)


def test_non_scalar_loss_rejected():
    tape = G.Tape()
    x = tape.param("x", np.ones(3))
    with pytest.raises(G.TapeError):
        G.backward(tape, G.scale(x, 2.0))


def test_unused_parameter_gets_zero_gradient():
    tape = G.Tape()
    x = tape.param("x", np.ones(3))
    tape.param("y", np.ones((2, 2)))
    g = G.backward(tape, G.sum_(x))
    np.testing.assert_array_equal(g["y"], np.zeros((2, 2)))


def test_inference_tape_keeps_no_graph():
    tape = G.Tape(record=False)
    x = tape.param("x", np.ones(3))
    y = G.activation(G.scale(x, 2.0), "tanh")
    assert y.parents == () and tape.nodes == []


def test_sin_backward_uses_cos_of_input():
    tape = G.Tape()
    x = tape.param("x", np.array([0.0, 1.0, 2.0]))
    g = G.backward(tape, G.sum_(G.activation(x, "sin")))
    np.testing.assert_allclose(g["x"], np.cos([0.0, 1.0, 2.0]))


def test_kink_probes_are_skipped_not_scored():
    # 5e-5 lies within one step of the |x| kink, so its +-step probe straddles it
    def builder(seed):
        return {"x": np.array([5e-5, 1.0])}, lambda tape, P: G.abs_sum(P["x"])

    rep = G.check_gradients(builder)
    assert rep.skipped["x"] == 1 and rep.checked["x"] == 1
    assert rep.passed()


def test_report_fails_when_nothing_verifiable():
    def builder(seed):
        return {"x": np.array([5e-5])}, lambda tape, P: G.abs_sum(P["x"])

    rep = G.check_gradients(builder)
    assert rep.unverified == ["x"] and not rep.passed()


def test_checker_detects_a_wrong_gradient():
    def bad_square(x):
        return x.tape._emit(x.value ** 2, (x,), lambda g: (g * 3 * x.value,))

    def builder(seed):
        return {"x": np.array([1.0, 2.0])}, lambda tape, P: G.sum_(bad_square(P["x"]))

    assert not G.check_gradients(builder).passed()


def test_subsampling_above_threshold():
    def builder(seed):
        return {"x": np.ones(20_000)}, lambda tape, P: G.sum_(G.mul(P["x"], P["x"]))

    rep = G.check_gradients(builder)
    assert rep.checked["x"] == 1000
