import numpy as np
import pytest

from whitecrate.autodiff import PRIMITIVES, Tape, UnregisteredPrimitiveError, grad, value_and_grad
from whitecrate.errors import CrateError
from whitecrate.gradcheck import MICRO, VJP_CASES, check_all_vjps, check_model_params, check_vjp, rel_err
from whitecrate.layers import ATTENTION_MODES, VARIANTS, ModelConfig, crate_forward, init_params
from whitecrate.linalg import Rng
from whitecrate.train import tape_forward


def test_half_squared_norm_closed_form():
    rng = Rng(0)
    w, x = rng.normal((3, 4)), rng.normal((4, 1))

    def loss(p):
        y = p["W"] @ x
        return (y * y).sum(axis=0).sum(axis=0) * 0.5

    val, g = value_and_grad(loss, {"W": w})
    assert val == pytest.approx(0.5 * float(np.sum((w @ x) ** 2)), rel=1e-14)
    np.testing.assert_allclose(g["W"], (w @ x) @ x.T, rtol=1e-14)


def test_constant_loss_gives_exact_zeros():
    params = {"a": np.ones((2, 3)), "b": np.arange(4.0)}
    val, g = value_and_grad(lambda p: 3.5, params)
    assert val == 3.5
    assert all(not np.any(v) and v.shape == params[k].shape for k, v in g.items())


def test_unused_parameter_gets_zero_gradient():
    g = grad(lambda p: (p["a"] * 2.0).sum(axis=0).sum(axis=0), {"a": np.ones((2, 2)), "b": np.ones((3, 3))})
    np.testing.assert_array_equal(g["a"], np.full((2, 2), 2.0))
    np.testing.assert_array_equal(g["b"], np.zeros((3, 3)))


def test_unregistered_primitive_rejected():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    with pytest.raises(UnregisteredPrimitiveError):
        tape.apply("exp", x)


def test_non_scalar_loss_rejected():
    with pytest.raises(CrateError):
        value_and_grad(lambda p: p["a"] * 1.0, {"a": np.ones((2, 2))})


def test_mixed_tapes_rejected():
    a, b = Tape(), Tape()
    with pytest.raises(CrateError):
        a.leaf(np.ones((2, 2))) @ b.leaf(np.ones((2, 2)))


def test_fan_out_accumulates():
    # y = x + x + x -> dy/dx = 3 everywhere
    g = grad(lambda p: ((p["x"] + p["x"]) + p["x"]).sum(axis=0).sum(axis=0), {"x": Rng(1).normal((2, 3))})
    np.testing.assert_array_equal(g["x"], np.full((2, 3), 3.0))


def test_relu_subgradient_at_zero_is_zero():
    tape = Tape()
    x = tape.leaf(np.array([[0.0, 1.0, -1.0]]))
    y = tape.apply("relu", x)
    adj = tape.backward(y, seed=np.ones((1, 3)))
    np.testing.assert_array_equal(adj[x.index], [[0.0, 1.0, 0.0]])


def test_every_primitive_has_a_vjp_case():
    assert set(VJP_CASES) == set(PRIMITIVES)


@pytest.mark.parametrize("name", sorted(VJP_CASES))
def test_vjp_matches_finite_differences(name):
    rng = Rng(2)
    for _ in range(3):
        assert check_vjp(name, rng) <= 1e-5


def test_check_all_vjps_passes():
    assert all(r.passed for r in check_all_vjps().values())


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("attention", ATTENTION_MODES)
def test_micro_model_parameter_gradients(variant, attention):
    res = check_model_params(variant, attention)
    assert res.max_rel_err <= 1e-5, res


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("attention", ATTENTION_MODES)
def test_tape_forward_matches_numpy_forward(variant, attention):
    cfg = ModelConfig(**MICRO, variant=variant, attention=attention)
    rng = Rng(3)
    params = init_params(cfg, rng)
    x = rng.normal((4, cfg.patch_dim, cfg.num_patches))
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in params.to_tensors().items()}
    ours = tape_forward(tape, leaves, x, cfg).value
    want, _ = crate_forward(x, params, cfg)
    np.testing.assert_allclose(ours, want, rtol=0, atol=1e-12)


def test_gradients_bit_identical_across_runs():
    from whitecrate.train import crate_loss

    cfg = ModelConfig(**MICRO)
    params = init_params(cfg, Rng(4)).to_tensors()
    x = Rng(5).normal((6, cfg.patch_dim, cfg.num_patches))
    y = np.array([0, 1, 2, 0, 1, 2])
    a = grad(crate_loss, params, x, y, cfg, 0.1)
    b = grad(crate_loss, params, x, y, cfg, 0.1)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_rel_err_conventions():
    assert rel_err(np.zeros(3), np.zeros(3)) == 0.0
    assert rel_err(np.array([1.0, 0.0]), np.array([1.0, 1e-3])) == pytest.approx(1e-3, rel=1e-6)
