import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgcd import autodiff as ad
from rgcd.diffusion import (NoiseSchedule, TeacherDenoiser, augmented_solve, build_schedule, cfg_predict,
                            ddim_sample, ddim_step, ddim_update, perturb, sampling_grid,
                            schedule_relation_check, teacher_sample)
from rgcd.metrics import sliced_wasserstein
from rgcd.rng import Rng


# -- schedule ----------------------------------------------------------------

def test_two_step_schedule_by_hand():
    s = build_schedule(2, 1e-4, 0.5)
    assert s.alpha[0] == pytest.approx(np.sqrt(0.9999), abs=1e-15)
    assert s.beta[1] == pytest.approx(np.sqrt(1 - 0.9999 * 0.5), abs=1e-15)


@settings(max_examples=50, deadline=None, derandomize=True)
@given(st.integers(2, 400), st.floats(1e-5, 0.2), st.floats(0.0, 0.7))
def test_variance_preserving(N, b_min, extra):
    s = build_schedule(N, b_min, min(b_min + extra, 0.99))
    np.testing.assert_allclose(s.alpha ** 2 + s.beta ** 2, 1.0, rtol=0, atol=1e-15)
    assert np.all(np.diff(s.alpha) < 0)


def test_default_schedule_endpoints():
    s = build_schedule()
    assert s.beta[-1] >= 0.99
    assert s.alpha[0] >= 0.99


@pytest.mark.parametrize("args", [(1, 1e-3, 0.1), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_perturb_identity_and_arithmetic():
    s = NoiseSchedule(np.array([0.36, 0.5]))  # alpha_1 = 0.8, beta_1 = 0.6
    out = perturb(np.array([[1.0, 0.0]]), 1, np.array([[0.0, 1.0]]), s)
    np.testing.assert_allclose(out, [[0.8, 0.6]])
    z = np.ones((2, 2))
    np.testing.assert_array_equal(ddim_update(z, z, 1.0, 0.0, 1.0, 0.0), np.zeros((2, 2)))


def test_perturb_rejects_bad_index():
    s = build_schedule(10)
    with pytest.raises(IndexError):
        perturb(np.zeros((1, 2)), 11, np.zeros((1, 2)), s)
    with pytest.raises(ValueError):
        perturb(np.zeros((1, 2)), 1, np.zeros((1, 3)), s)


def test_perturb_variance_monte_carlo():
    s = build_schedule()
    noise = Rng(0, "t").normal((10000, 1))
    zt = perturb(np.zeros((10000, 1)), 10, noise, s)
    assert zt.var() == pytest.approx(s.beta[9] ** 2, rel=0.05)


# -- DDIM ----------------------------------------------------------------------

def test_ddim_same_level_is_zero(rng):
    s = build_schedule()
    z = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(ddim_step(z, 7, 7, rng.normal(size=(3, 2)), s), 0.0)


def test_ddim_zero_eps_ratio():
    psi = ddim_update(np.array([[3.0]]), np.zeros((1, 1)), 0.6, 0.8, 0.8, 0.6)
    np.testing.assert_allclose(psi, [[1.0]])


def test_ddim_generic_hand_value():
    psi = ddim_update(np.array([[0.0]]), np.array([[1.0]]), 0.6, 0.8, 0.8, 0.6)
    np.testing.assert_allclose(psi, [[-7.0 / 15.0]])


def test_ddim_clean_endpoint_limit():
    # beta_lo = 0 goes through the x0 form
    psi = ddim_update(np.array([[1.0]]), np.array([[0.5]]), 0.6, 0.8, 1.0, 0.0)
    np.testing.assert_allclose(psi, [[(1.0 - 0.8 * 0.5) / 0.6 - 1.0]])


def test_ddim_rejects_wrong_order(rng):
    with pytest.raises(ValueError):
        ddim_step(np.zeros((1, 1)), 3, 5, np.zeros((1, 1)), build_schedule())


def test_linear_gaussian_ddim_recovers_unit_covariance():
    s = build_schedule(1000, 1e-4, 0.02)
    z = ddim_sample(lambda z, n: s.beta[n - 1] * z, Rng(0, "lg").normal((2048, 2)), s, 1000)
    np.testing.assert_allclose(np.cov(z.T), np.eye(2), atol=0.1)


def test_sampling_grid():
    np.testing.assert_array_equal(sampling_grid(50, 1), [50])
    g = sampling_grid(50, 4)
    assert g[0] == 50 and g[-1] == 1 and np.all(np.diff(g) < 0)
    assert len(sampling_grid(50, 50)) == 50


def test_relation_check_constant_alpha():
    assert schedule_relation_check(NoiseSchedule(np.zeros(20))) < 1e-10


def test_relation_check_default_and_refinement():
    r50 = schedule_relation_check(build_schedule(50, 2e-3, 0.3))
    assert r50 < 1e-2
    prev = r50
    for N in (100, 200, 400):
        r = schedule_relation_check(build_schedule(N, 2e-3 * 50 / N, 0.3 * 50 / N))
        assert r < 0.6 * prev
        prev = r


# -- teacher -------------------------------------------------------------------

def test_teacher_loss_zero_and_dimension(tiny_teacher):
    t = tiny_teacher
    z = np.zeros((4000, 3))
    noise = Rng(1, "x").normal((4000, 3))
    n = np.full(4000, 5)
    zero_params = t.params_.zeros_like().constants()
    assert float(t.loss(zero_params, z, np.zeros(4000, int), n, noise).data) == pytest.approx(3.0, rel=0.05)


def test_teacher_one_adam_step_descends(tiny_data, tiny_codec):
    Z = tiny_codec.transform(tiny_data.X_train)[:64]
    y = tiny_data.y_train[:64]
    t = TeacherDenoiser(hidden=(16,), n_steps=20, iters=0).fit(Z, y)
    from rgcd.diffusion import init_backbone
    params = init_backbone(Rng(0, "i"), 3, 2, (16,))
    noise = Rng(2, "n").normal(Z.shape)
    n = Rng(3, "n").integers(1, 21, 64)
    loss0, g = ad.value_and_grad(lambda p: t.loss(p, Z, y, n, noise), params)
    new, _ = ad.adam_step(params, g, ad.adam_init(params), 1e-3)
    loss1 = float(t.loss(new.constants(), Z, y, n, noise).data)
    assert loss1 < loss0


def test_teacher_training_reduces_loss(tiny_teacher):
    h = tiny_teacher.loss_history_
    assert h[-1][1] < h[0][1]


def test_teacher_determinism(tiny_data, tiny_codec, tiny_teacher):
    Z = tiny_codec.transform(tiny_data.X_train)
    again = TeacherDenoiser(hidden=(16, 16), n_steps=20, iters=200, batch_size=128, seed=0).fit(
        Z, tiny_data.y_train)
    for k in tiny_teacher.params_:
        assert np.array_equal(again.params_[k], tiny_teacher.params_[k])


def test_p_uncond_one_leaves_class_rows_untouched(tiny_data, tiny_codec):
    Z = tiny_codec.transform(tiny_data.X_train)
    t0 = TeacherDenoiser(hidden=(8,), n_steps=20, iters=0, seed=1).fit(Z, tiny_data.y_train)
    t1 = TeacherDenoiser(hidden=(8,), n_steps=20, iters=20, p_uncond=1.0, seed=1).fit(Z, tiny_data.y_train)
    E0, E1 = t0.params_["cond.E"], t1.params_["cond.E"]
    np.testing.assert_array_equal(E0[:2], E1[:2])
    assert not np.array_equal(E0[2], E1[2])


def test_cfg_identities(tiny_teacher, rng):
    t = tiny_teacher
    z = rng.normal(size=(5, 3))
    c = np.array([0, 1, 0, 1, 1])
    cond = t.predict_noise(z, c, 4)
    unc = t.predict_noise(z, np.full(5, t.null_class), 4)
    np.testing.assert_array_equal(cfg_predict(t, z, c, 0.0, 4), cond)
    np.testing.assert_allclose(cfg_predict(t, z, c, -1.0, 4), unc, atol=1e-14)
    np.testing.assert_allclose(cfg_predict(t, z, c, 2.0, 4), 3 * cond - 2 * unc, atol=1e-13)
    with pytest.raises(ValueError):
        cfg_predict(t, z, np.full(5, t.null_class), 1.0, 4)


def test_augmented_solve_identities(tiny_teacher, rng):
    t = tiny_teacher
    z = rng.normal(size=(4, 3))
    c = np.array([0, 1, 1, 0])
    np.testing.assert_allclose(augmented_solve(t, z, 6, 6, c, 3.0), z)
    plain = z + ddim_step(z, 9, 4, t.predict_noise(z, c, 9), t.schedule_)
    np.testing.assert_array_equal(augmented_solve(t, z, 9, 4, c, 0.0), plain)
    a0, a1, a2 = (augmented_solve(t, z, 9, 4, c, w) for w in (0.0, 1.0, 2.0))
    np.testing.assert_allclose(a2 - a1, a1 - a0, atol=1e-12)


def test_teacher_sample_deterministic(tiny_teacher):
    c = np.arange(16) % 2
    a = teacher_sample(tiny_teacher, 5, 0.0, c, seed=4)
    b = teacher_sample(tiny_teacher, 5, 0.0, c, seed=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, teacher_sample(tiny_teacher, 5, 0.0, c, seed=5))


def test_teacher_full_grid_matches_reference_trajectory(tiny_teacher):
    t = tiny_teacher
    c = np.arange(8) % 2
    zT = Rng(9, "teacher.sample").normal((8, 3))
    ref = zT.copy()
    for n in range(t.n_steps, 0, -1):
        ref = ref + ddim_step(ref, n, n - 1, t.cfg_predict(ref, c, 0.0, n), t.schedule_)
    np.testing.assert_allclose(t.sample(8, t.n_steps, 0.0, c, z_T=zT), ref, atol=1e-12)


def test_more_teacher_steps_get_closer_to_data(tiny_teacher, tiny_codec, tiny_data):
    c = np.arange(512) % 2
    Zt = tiny_codec.transform(tiny_data.X_test)
    sw2 = np.mean([sliced_wasserstein(teacher_sample(tiny_teacher, 2, 0.0, c, s), Zt, 32) for s in range(3)])
    sw50 = np.mean([sliced_wasserstein(teacher_sample(tiny_teacher, 20, 0.0, c, s), Zt, 32)
                    for s in range(3)])
    assert sw50 < sw2
