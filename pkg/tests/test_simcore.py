import numpy as np
import pytest

from epiflow.models import SEIR_PARAM_NAMES, SeirModel, reference_vector
from epiflow.simcore import (
    EpiState,
    IntegrationError,
    IntegratorConfig,
    integrate,
    make_rng,
    rk4_step,
    sample_negbinomial,
    sample_student_t4,
)

from seir_oracle import euler, richardson

POP = 83e6


def smooth_params():
    # change points on the half-day grid so both step sizes below hit every kink
    p = dict(zip(SEIR_PARAM_NAMES, reference_vector()))
    p.update(lambda0=1.0, t1=7.0, t2=15.0, t3=22.0, t4=40.0, dt1=3.0, dt2=3.0, dt3=3.0, dt4=3.0)
    return p


def seir_run(p, n_days, dt):
    model = SeirModel(population=POP, integrator=IntegratorConfig(dt, round(1 / dt)))
    cols = model._columns(np.array([p[n] for n in model.param_names]))
    y0 = np.array([[POP - p["e0"], p["e0"], 0, 0, 0, 0]])
    traj, clamp = integrate(y0, model.derivs(cols), n_days, model.integrator)
    return traj[0], clamp[0], model.derivs(cols)


@pytest.fixture(scope="module")
def oracle_i():
    states, _ = euler(smooth_params(), POP, 50, 1e-4)
    return states[:, 3]


def test_no_seed_means_no_dynamics():
    _, _, f = seir_run(smooth_params(), 1, 0.5)
    state = EpiState(s=1e6, e=0.0, c=0.0, i=0.0, r=5.0, d=1.0)
    assert rk4_step(state, f, 3.0, 0.5) == state


def test_derivative_sum_is_zero_at_random_states():
    _, _, f = seir_run(smooth_params(), 1, 0.5)
    rng = np.random.default_rng(0)
    y = rng.uniform(0, 1, size=(200, 6)) * POP / 6
    for t in (0.0, 20.5, 40.0):
        total = f(t, y).sum(axis=1)
        assert np.all(np.abs(total) < 1e-12 * y.sum(axis=1))


def test_step_preserves_population():
    _, _, f = seir_run(smooth_params(), 1, 0.5)
    state = EpiState(POP - 2e5, 5e4, 5e4, 5e4, 3e4, 2e4)
    new = rk4_step(state, f, 30.0, 0.5)
    assert abs(new.n - state.n) < 1e-6 * POP


def test_matches_fine_euler_oracle(oracle_i):
    traj, _, _ = seir_run(smooth_params(), 50, 0.5)
    dev = np.max(np.abs(traj[:, 3] - oracle_i)) / np.max(np.abs(oracle_i))
    assert dev < 1e-4


def test_fourth_order_convergence():
    ref, _ = richardson(smooth_params(), POP, 50, 1e-4)
    errs = []
    for dt in (0.5, 0.25):
        traj, _, _ = seir_run(smooth_params(), 50, dt)
        errs.append(np.max(np.abs(traj[:, 3] - ref[:, 3])))
    assert errs[0] / errs[1] >= 8.0


def test_clamp_mass_is_negligible():
    _, clamp, _ = seir_run(dict(zip(SEIR_PARAM_NAMES, reference_vector())), 120, 0.5)
    assert clamp < 1e-9 * POP


def test_non_finite_derivative_raises_with_time_and_state():
    def bad(t, y):
        return np.full_like(y, np.nan) if t > 1.0 else np.zeros_like(y)

    state = np.ones(6)
    rk4_step(state, bad, 0.0, 0.5)
    with pytest.raises(IntegrationError) as info:
        rk4_step(state, bad, 1.0, 0.5)
    assert info.value.t == 1.0
    np.testing.assert_array_equal(info.value.state, state)


def test_invalid_step_config():
    with pytest.raises(ValueError):
        IntegratorConfig(dt=0.0)
    with pytest.raises(ValueError):
        IntegratorConfig(dt=0.3, output_stride=3)
    with pytest.raises(ValueError):
        rk4_step(np.ones(6), lambda t, y: y, 0.0, -0.5)


def test_state_array_round_trip():
    s = EpiState(1, 2, 3, 4, 5, 6)
    assert EpiState.from_array(s.to_array()) == s and s.n == 21


def test_student_t4_moments():
    x = sample_student_t4(make_rng(1), 1_000_000)
    assert abs(x.mean()) < 3 * np.sqrt(2.0) / 1000
    assert abs(x.var() / 2.0 - 1.0) < 0.05


def test_student_t4_reproducible():
    np.testing.assert_array_equal(sample_student_t4(make_rng(3), 100), sample_student_t4(make_rng(3), 100))
    assert not np.array_equal(sample_student_t4(make_rng(3), 100), sample_student_t4(make_rng(4), 100))


def test_negbinomial_zero_mean():
    assert np.all(sample_negbinomial(0.0, 3.0, make_rng(0), 1000) == 0)


def test_negbinomial_poisson_limit():
    x = sample_negbinomial(50.0, 1e9, make_rng(2), 100_000)
    assert abs(x.var() / 50.0 - 1.0) < 0.1


def test_negbinomial_mean():
    x = sample_negbinomial(10.0, 5.0, make_rng(0), 100_000)
    se = np.sqrt((10.0 + 100.0 / 5.0) / x.size)
    assert abs(x.mean() - 10.0) < 3 * se
    assert abs(x.var() / 30.0 - 1.0) < 0.05


@pytest.mark.parametrize("mean,disp", [(np.nan, 1.0), (1.0, np.inf), (-1.0, 1.0), (1.0, 0.0)])
def test_negbinomial_rejects_bad_input(mean, disp):
    with pytest.raises(ValueError):
        sample_negbinomial(mean, disp, make_rng(0))

