import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from epiflow.models import SeirModel, SirModel
from epiflow.priors import (
    ParameterSpace,
    ParamSpec,
    Prior,
    SupportError,
    build_space,
    default_space,
    fit_standardization,
    sample_prior,
    to_natural,
    to_unconstrained,
)


def unit_space():
    return ParameterSpace((ParamSpec("u", "unit-interval", Prior("uniform", 0.0, 1.0)),))


def mixed_space():
    return ParameterSpace((
        ParamSpec("rate", "positive", Prior("lognormal", 0.4, 0.5)),
        ParamSpec("frac", "unit-interval", Prior("logitnormal", 0.3, 0.7)),
        ParamSpec("box", "bounded", Prior("uniform", 2.0, 5.0), bounds=(2.0, 5.0)),
        ParamSpec("loc", "unbounded", Prior("normal", -1.0, 2.0)),
        ParamSpec("later", "ordered", Prior("lognormal", 3.0, 0.4), after="loc"),
    ))


@pytest.fixture(scope="module")
def seir_space():
    return default_space(SeirModel()).fit_standardization(200_000, rng=3)


def test_uniform_prior_mean():
    draws = sample_prior(unit_space(), rng=11, n=100_000)
    assert abs(draws.mean() - 0.5) < 0.005


def test_degenerate_bounded_support_rejected():
    with pytest.raises(ValueError, match="lo < hi"):
        ParamSpec("x", "bounded", Prior("uniform", 1.0, 1.0), bounds=(1.0, 1.0))


def test_prior_outside_support_rejected():
    with pytest.raises(ValueError, match="exceeds support"):
        ParamSpec("x", "bounded", Prior("uniform", 0.0, 3.0), bounds=(1.0, 2.0))
    with pytest.raises(ValueError, match="not compatible"):
        ParamSpec("x", "positive", Prior("normal", 0.0, 1.0))


def test_duplicate_names_rejected():
    spec = ParamSpec("x", "unbounded", Prior("normal", 0.0, 1.0))
    with pytest.raises(ValueError, match="duplicate"):
        ParameterSpace((spec, spec))


def test_seeded_draws_reproducible(seir_space):
    np.testing.assert_array_equal(seir_space.sample(5, 10), seir_space.sample(5, 10))
    assert not np.array_equal(seir_space.sample(5, 10), seir_space.sample(6, 10))


def test_round_trip(seir_space):
    v = seir_space.sample(1, 500)
    back = to_natural(seir_space, to_unconstrained(seir_space, v))
    assert np.max(np.abs(back - v) / np.abs(v)) < 1e-10


def test_round_trip_mixed_supports():
    space = mixed_space().fit_standardization(2000, rng=0)
    v = space.sample(2, 1000)
    np.testing.assert_allclose(space.to_natural(space.to_unconstrained(v)), v, rtol=1e-10)


def test_logit_of_half_is_zero():
    assert unit_space().to_unconstrained(np.array([0.5]), standardize=False)[0] == 0.0


def test_standardized_prior_is_centered(seir_space):
    u = seir_space.to_unconstrained(seir_space.sample(99, 100_000))
    assert np.all(np.abs(u.mean(axis=0)) < 0.01)
    assert np.all(np.abs(u.std(axis=0) - 1.0) < 0.01)


def test_outside_support_error_names_parameter(seir_space):
    v = seir_space.sample(0)
    v[seir_space.index("alpha")] = 1.5
    with pytest.raises(SupportError, match="alpha"):
        seir_space.to_unconstrained(v)
    v = seir_space.sample(0)
    v[seir_space.index("t3")] = v[seir_space.index("t2")] - 1.0
    with pytest.raises(SupportError, match="t3"):
        seir_space.to_unconstrained(v)


def test_non_finite_unconstrained_rejected(seir_space):
    u = np.zeros(seir_space.dim)
    u[0] = np.nan
    with pytest.raises(ValueError):
        seir_space.to_natural(u)


def test_standardization_of_standard_normal():
    space = ParameterSpace((ParamSpec("z", "unbounded", Prior("normal", 0.0, 1.0)),))
    fitted = fit_standardization(space, 5000, rng=1)
    assert abs(fitted.mean[0]) < 0.05 and abs(fitted.std[0] - 1.0) < 0.05


def test_standardization_seed_stability(seir_space):
    space = default_space(SeirModel())
    a = space.fit_standardization(5000, rng=1)
    b = space.fit_standardization(5000, rng=2)
    assert np.all(np.abs(a.std / b.std - 1.0) < 0.05)


def test_standardization_deterministic():
    space = default_space(SirModel())
    np.testing.assert_array_equal(space.fit_standardization(1000, rng=4).mean,
                                  space.fit_standardization(1000, rng=4).mean)


def test_standardization_needs_enough_draws():
    with pytest.raises(ValueError):
        default_space(SirModel()).fit_standardization(999)


def test_ordering_holds_by_construction(seir_space):
    t = seir_space.sample(7, 20000)[:, :4]
    assert np.all(np.diff(t, axis=1) > 0)


def test_jacobians_finite_and_nonzero_at_quantiles():
    space = mixed_space()
    qs = np.array([0.01, 0.5, 0.99])
    cols = [
        stats.lognorm(0.5, scale=0.4).ppf(qs),
        stats.norm.cdf(stats.norm(np.log(0.3 / 0.7), 0.7).ppf(qs)),
        2.0 + 3.0 * qs,
        stats.norm(-1.0, 2.0).ppf(qs),
    ]
    v = np.stack(cols + [cols[3] + stats.lognorm(0.4, scale=3.0).ppf(qs)], axis=1)
    logjac = space.log_abs_jacobian(v)
    assert np.all(np.isfinite(logjac))
    # independent check of d(transform)/dx by central differences
    h = 1e-6
    for j in range(4):
        vp, vm = v.copy(), v.copy()
        vp[:, j] += h * np.abs(v[:, j]).clip(1e-3)
        vm[:, j] -= h * np.abs(v[:, j]).clip(1e-3)
        du = space.to_unconstrained(vp, standardize=False)[:, j] - space.to_unconstrained(vm, standardize=False)[:, j]
        fd = du / (vp[:, j] - vm[:, j])
        np.testing.assert_allclose(np.log(np.abs(fd)), logjac[:, j], atol=1e-5)


def test_default_sir_priors_match_documented_medians():
    space = default_space(SirModel())
    draws = space.sample(0, 40000)
    np.testing.assert_allclose(np.median(draws, axis=0), [0.4, 0.125, 8.0, 5.0, 20.0], rtol=0.02)


def test_dummies_are_uniform():
    space = default_space(SirModel(n_dummies=5))
    assert space.names[-5:] == tuple(f"dummy{j}" for j in range(1, 6))
    d = space.sample(0, 5000)[:, 5:]
    assert d.min() > 0 and d.max() < 1
    assert space.with_dummies(2).dim == space.dim + 2


def test_overrides_replace_entries():
    space = default_space(SirModel(), overrides={"psi": {"prior": "lognormal", "median": 50.0, "log_sd": 0.1}})
    assert space.specs[3].prior.a == 50.0
    assert space.config_hash() != default_space(SirModel()).config_hash()


def test_missing_prior_is_an_error():
    with pytest.raises(KeyError, match="nope"):
        build_space(["nope"], {})


def test_serialization_round_trip(seir_space):
    restored = ParameterSpace.from_dict(seir_space.to_dict())
    assert restored.names == seir_space.names
    np.testing.assert_array_equal(restored.std, seir_space.std)
    assert restored.config_hash() == seir_space.config_hash()


def test_ablated_space_drops_ordering_links():
    space = default_space(SeirModel(no_intervention_model=True))
    assert "t2" not in space.names and "lambda0" in space.names


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-8, 8), min_size=5, max_size=5))
def test_unconstrained_to_natural_stays_in_support(u):
    space = mixed_space()
    v = space.to_natural(np.array(u), standardized=False)
    assert v[0] > 0 and 0 < v[1] < 1 and 2 < v[2] < 5 and v[4] > v[3]
    np.testing.assert_allclose(space.to_unconstrained(v, standardize=False), u, atol=1e-9)
