import numpy as np
import pytest

from impdiff.data import (Candidate, Exact, MixtureSpec, Noisy, SupervisionModel, Unlabeled,
                          default_spec, gaussian_spec_1d, symmetric_transition)
from impdiff.oracle import (Oracle, OracleError, bayes_accuracy, clean_conditional_score,
                            convex_combination_score, imprecise_conditional_score, oracle_posterior)
from impdiff.schedules import Schedule
from impdiff.verify import pooled_score_check

from oracles import mixture_logpdf, numerical_grad

EDM = Schedule()


def test_score_zero_at_mode():
    spec = MixtureSpec([[1.0]], [[[0.4, -0.3]]], [[np.diag([0.2, 0.5])]], [1.0])
    assert np.allclose(clean_conditional_score(spec, EDM, [[0.4, -0.3]], 0, 0.7), 0.0)


def test_score_1d_example():
    spec = gaussian_spec_1d(means=(2.0, -2.0))
    assert clean_conditional_score(spec, EDM, [[3.0]], 0, 1.0)[0, 0] == pytest.approx(-0.5, abs=1e-15)


def test_score_matches_independent_density_gradient():
    spec = default_spec()
    rng = np.random.default_rng(0)
    for _ in range(100):
        y = int(rng.integers(2))
        t = float(np.exp(rng.uniform(np.log(0.02), np.log(5))))
        x = rng.normal(0, 1, 2)
        f = lambda v: mixture_logpdf(v, spec.weights[y], spec.means[y], spec.covs[y], 1.0, t)  # noqa: E731
        num = numerical_grad(f, x, 1e-4 * max(t, 0.1))
        got = clean_conditional_score(spec, EDM, x[None], y, t)[0]
        assert np.linalg.norm(got - num) <= 1e-5 * max(1.0, np.linalg.norm(num))


def test_ddpm_schedule_score():
    spec = gaussian_spec_1d()
    sch = Schedule.ddpm_linear(100)
    orc = Oracle(spec, sch)
    from impdiff.schedules import alpha_sigma
    a, s = alpha_sigma(sch, 40)
    x = np.array([[0.3]])
    want = -(0.3 - a * -2.0) / (a * a * 1.0 + s * s)
    assert orc.clean_conditional_score(x, 0, 40)[0, 0] == pytest.approx(want, rel=1e-12)


def test_imprecise_one_hot_reduces_to_clean():
    spec = default_spec()
    m = SupervisionModel(spec.prior)
    x = np.random.default_rng(1).normal(size=(5, 2))
    got = imprecise_conditional_score(spec, EDM, x, Exact(1), m, 0.4)
    assert np.allclose(got, clean_conditional_score(spec, EDM, x, 1, 0.4), atol=1e-13)


def test_imprecise_equal_mixture_fd():
    spec = gaussian_spec_1d()
    m = SupervisionModel(spec.prior)
    for x in (-3.0, -0.5, 0.0, 1.7):
        f = lambda v: np.log(0.5 * np.exp(mixture_logpdf(v, [1.0], [[-2.0]], [[[1.0]]], 1.0, 0.6))  # noqa: E731
                             + 0.5 * np.exp(mixture_logpdf(v, [1.0], [[2.0]], [[[1.0]]], 1.0, 0.6)))
        num = numerical_grad(f, np.array([x]))
        got = imprecise_conditional_score(spec, EDM, [[x]], Unlabeled(), m, 0.6)[0]
        assert got[0] == pytest.approx(num[0], abs=1e-7)


def test_pooled_score_identity_all_supervision_kinds():
    res = pooled_score_check(n=300, seed=3)
    assert res.max() < 1e-8


def test_convex_combination_matches_pooled():
    spec = default_spec()
    m = SupervisionModel(spec.prior, symmetric_transition(2, 0.3))
    x = np.random.default_rng(2).normal(size=(20, 2))
    for z in (Noisy(0), Candidate(frozenset({0, 1})), Unlabeled()):
        a = imprecise_conditional_score(spec, EDM, x, z, m, 0.3)
        b = convex_combination_score(spec, EDM, x, z, m, 0.3)
        assert np.allclose(a, b, rtol=1e-10, atol=1e-12)


def test_non_simplex_rejected():
    spec = default_spec()

    class Unnormalised:
        def p_y_given_z(self, z):
            return np.array([0.7, 0.7])

    bad = Unnormalised()
    with pytest.raises(OracleError):
        imprecise_conditional_score(spec, EDM, [[0.0, 0.0]], Unlabeled(), bad, 0.3)


def test_posterior_properties():
    spec = default_spec()
    post = oracle_posterior(spec, EDM, [[0.0, 0.0]], 0.2, [0.5, 0.5])
    assert np.allclose(post, 0.5)
    assert np.allclose(oracle_posterior(spec, EDM, [[-3.0, 1.0]], 0.2, [0.0, 1.0]), [0.0, 1.0])
    x = np.random.default_rng(0).normal(0, 2, size=(10_000, 2))
    p = oracle_posterior(spec, EDM, x, 0.5, [0.3, 0.7])
    assert np.max(np.abs(p.sum(1) - 1)) < 1e-12


def test_posterior_small_t_approaches_clean_bayes():
    spec = default_spec()
    x = np.random.default_rng(4).normal(0, 1, size=(200, 2))
    assert np.allclose(oracle_posterior(spec, EDM, x, 1e-6, None), oracle_posterior(spec, EDM, x, 0.0, None), atol=1e-5)


def test_per_row_timesteps_match_scalar():
    spec = default_spec()
    orc = Oracle(spec)
    x = np.random.default_rng(5).normal(size=(6, 2))
    t = np.array([0.1, 0.1, 0.5, 0.5, 2.0, 2.0])
    rows = orc.clean_conditional_score(x, 1, t)
    for i in range(6):
        assert np.allclose(rows[i], orc.clean_conditional_score(x[i:i + 1], 1, float(t[i]))[0], rtol=1e-12)


def test_bayes_accuracy_default_spec():
    from impdiff.data import sample_dataset
    d = sample_dataset(default_spec(), 4000, np.random.default_rng(0))
    assert 0.96 < bayes_accuracy(default_spec(), d.x, d.y_true) < 0.995


def test_dimension_mismatch():
    with pytest.raises(OracleError):
        Oracle(default_spec()).clean_conditional_score([[0.0]], 0, 0.5)
