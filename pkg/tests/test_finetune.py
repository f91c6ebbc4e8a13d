import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import numeric_grad, rel_error
from pdediscover.errors import InvalidArgumentError
from pdediscover.finetune import FinetuneConfig, build_physics_model, data_loss_and_grads, finetune
from pdediscover.simulate import (PdeSystem, burgers, evaluate_rhs, gray_scott, integrate, rhs_eval,
                                  smooth_random_field)

N = 16
DX = 1.0 / N
DT = 1e-3


def _u0(seed=0):
    return smooth_random_field(N, np.random.default_rng(seed), 2.0)


def _burgers_model(coefs=(0.005, -1.0, -1.0, 0.005, -1.0, -1.0), seed=0, s=1, st_=1):
    terms = [["lap(u)", "u*u_x", "v*u_y"], ["lap(v)", "u*v_x", "v*v_y"]]
    return build_physics_model(terms, [coefs[:3], coefs[3:]], _u0(seed), DX, DT, s, st_)


def test_rhs_shares_simulator_code_path():
    pm = _burgers_model()
    x = _u0(1)
    comps = [x[0], x[1]]
    ours = np.stack(evaluate_rhs(comps, pm.current_system(), DX))
    np.testing.assert_allclose(ours, rhs_eval(burgers(0.005), x, DX), atol=1e-12)


def test_rollout_matches_forward_euler_simulation():
    pm = _burgers_model()
    traj = pm.rollout(30)
    ref = integrate(burgers(0.005), pm.u0, DX, DT, 30, integrator="euler")
    for k in range(31):
        assert np.max(np.abs(traj[k] - ref[k])) < 1e-10
    np.testing.assert_array_equal(traj, ref)


def test_empty_term_set_is_zero_dynamics():
    pm = build_physics_model([[], []], [[], []], _u0(2), DX, DT)
    traj = pm.rollout(5)
    for k in range(6):
        np.testing.assert_array_equal(traj[k], pm.u0)
    system, hist = finetune(pm, traj[None, 0], FinetuneConfig(iterations=3))
    assert hist == [] and system.support() == [set(), set()]


def test_gray_scott_discovered_sets_build():
    s_u = ["lap(u)", "1", "u", "u*v^2"]
    s_v = ["lap(v)", "v", "u*v^2"]
    pm = build_physics_model([s_u, s_v], [[2e-5, 0.04, -0.04, -1.0], [5e-6, -0.1, 1.0]],
                             np.stack([np.ones((N, N)), np.zeros((N, N))]), DX, 0.5)
    assert [len(r) for r in pm.system.terms] == [4, 3]
    np.testing.assert_allclose(pm.rollout(3)[-1][0], 1.0, atol=1e-15)
    x = _u0(3) * 0.1 + 0.5
    np.testing.assert_allclose(np.stack(evaluate_rhs([x[0], x[1]], pm.system, DX)),
                               rhs_eval(gray_scott(feed=0.04, kill=0.06), x, DX), atol=1e-12)


def test_unknown_term_and_bad_coefficient_rejected():
    with pytest.raises(InvalidArgumentError):
        build_physics_model([["u*w"], []], [[1.0], []], _u0(), DX, DT)
    with pytest.raises(InvalidArgumentError):
        build_physics_model([["u"], []], [[np.nan], []], _u0(), DX, DT)
    with pytest.raises(InvalidArgumentError):
        build_physics_model([["u", "v"], []], [[1.0], []], _u0(), DX, DT)


def test_coefficient_gradients_match_finite_differences():
    pm = _burgers_model(coefs=(0.006, -0.9, -1.1, 0.004, -1.05, -0.95), s=2, st_=3)
    truth = _burgers_model(s=2, st_=3)
    meas = truth.rollout(9)[::3][:, :, ::2, ::2] + 0.01
    _, grads = data_loss_and_grads(pm, meas)
    for name in pm.theta:
        theta = {k: np.array(v, dtype=float) for k, v in pm.theta.items()}
        num = numeric_grad(lambda: data_loss_and_grads(pm, meas, theta)[0], theta[name])
        assert rel_error(grads[name], num) < 1e-5, name


def test_exact_measurements_leave_coefficients_fixed():
    pm = _burgers_model(s=2, st_=2)
    meas = pm.rollout(20)[::2][:, :, ::2, ::2]
    system, hist = finetune(pm, meas, FinetuneConfig(iterations=20))
    for a, b in zip(system.coefficients(), burgers(0.005).coefficients()):
        np.testing.assert_allclose(a, b, atol=1e-6)
    assert hist[0][1] < 1e-25


def test_finetune_reduces_coefficient_error_and_keeps_structure():
    truth = _burgers_model(s=2, st_=2)
    meas = truth.rollout(40)[::2][:, :, ::2, ::2]
    start = (0.0055, -0.95, -1.04, 0.0046, -1.03, -0.97)
    pm = _burgers_model(coefs=start, s=2, st_=2)
    before = pm.current_system()
    system, hist = finetune(pm, meas, FinetuneConfig(iterations=150, lr=0.005))
    assert system.support() == before.support()
    true_vec = np.concatenate(burgers(0.005).coefficients())
    err = lambda s: np.linalg.norm(np.concatenate(s.coefficients()) - true_vec) / np.linalg.norm(true_vec)
    assert err(system) < 0.25 * err(before)
    assert hist[-1][1] < hist[0][1]
    assert len(hist[0]) == 3


@given(st.floats(-2.0, 2.0).filter(lambda c: abs(c) > 1e-3), st.integers(0, 100))
def test_structure_preserved_for_any_start(c, seed):
    pm = build_physics_model([["u"], ["v*u_x"]], [[c], [0.5]], _u0(seed) * 0.1, DX, DT)
    meas = pm.rollout(4)[None, 0]
    system, _ = finetune(pm, np.concatenate([meas, meas]), FinetuneConfig(iterations=2))
    assert [t.name for t, _ in system.terms[0]] == ["u"] and [t.name for t, _ in system.terms[1]] == ["v*u_x"]


def test_fine_tuned_model_equals_simulation_of_its_system():
    truth = _burgers_model(s=2, st_=2)
    meas = truth.rollout(10)[::2][:, :, ::2, ::2]
    pm = _burgers_model(coefs=(0.0052, -0.97, -1.0, 0.005, -1.0, -1.02), s=2, st_=2)
    system, _ = finetune(pm, meas, FinetuneConfig(iterations=5))
    np.testing.assert_array_equal(pm.rollout(10), integrate(system, pm.u0, DX, DT, 10, integrator="euler"))


def test_grid_mismatch_rejected():
    pm = _burgers_model(s=2)
    with pytest.raises(InvalidArgumentError):
        data_loss_and_grads(pm, np.zeros((2, 2, 5, 5)))


def test_zero_coefficients_stay_trainable():
    pm = build_physics_model([["u"], []], [[0.0], []], _u0(4), DX, DT)
    assert pm.coefficients() == [[0.0], []]
    target = PdeSystem([[("u", 0.5)], []])
    meas = integrate(target, pm.u0, DX, DT, 10, integrator="euler")
    system, _ = finetune(pm, meas, FinetuneConfig(iterations=50, lr=0.05))
    assert system.coefficients()[0][0] > 0.1
