import math
import time

import numpy as np
import pytest
import torch

from impdiff.classifier import (NoiseDraws, PlanError, PriorError, TimestepPlan, candidate_restricted,
                                classifier_weight, classify, elbo_logits, err_diagnostic,
                                err_from_hbar, estimate_prior_pl, estimate_prior_su,
                                logits_to_posterior, plan_subinterval, quadrature_nodes,
                                solve_prior_nl)
from impdiff.data import (Dataset, corrupt_partial, corrupt_semi, default_spec, sample_dataset,
                          symmetric_transition)
from impdiff.oracle import Oracle, bayes_accuracy
from impdiff.schedules import Schedule

from oracles import L_DELTA_64, LOGNORMAL_MEDIAN, bisect_interval, lognormal_cdf, pl_prior_closed_form

EDM = Schedule()
VP = Schedule("VP", {"beta_min": 0.1, "beta_max": 20.0})


def test_uniform_plan_exact():
    plan = plan_subinterval(VP, 0.5)
    assert (plan.l, plan.r) == (0.25, 0.75)
    with pytest.raises(PlanError):
        plan_subinterval(VP, 1.5)


def test_lognormal_zero_width_is_median():
    plan = plan_subinterval(EDM, 0.0)
    assert abs(plan.l - LOGNORMAL_MEDIAN) < 1e-10 and plan.l == plan.r


def test_lognormal_delta_64():
    t0 = time.perf_counter()
    plan = plan_subinterval(EDM, 6.4)
    assert time.perf_counter() - t0 < 1.0
    assert plan.residual < 1e-10
    assert abs(plan.l - bisect_interval(6.4)) < 1e-9
    assert plan.l == pytest.approx(L_DELTA_64, abs=1e-12)
    assert lognormal_cdf(plan.l) + lognormal_cdf(plan.r) == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("delta", [0.01, 0.3, 1.0, 3.0, 20.0])
def test_plan_balances_mass(delta):
    plan = plan_subinterval(EDM, delta)
    assert plan.r - plan.l == pytest.approx(delta, rel=1e-12)
    assert abs(plan.l - bisect_interval(delta)) < 1e-9


def test_negative_delta_rejected():
    with pytest.raises(PlanError):
        plan_subinterval(EDM, -1.0)
    with pytest.raises(PlanError):
        TimestepPlan(0.5, 0.2)
    with pytest.raises(PlanError):
        TimestepPlan(0.1, 0.2, draws=0)


def test_plan_draws_inside_interval_and_stratified():
    plan = plan_subinterval(EDM, 6.4, draws=16)
    tau = plan.sample(np.random.default_rng(0), (500, 16))
    assert tau.min() >= plan.l and tau.max() <= plan.r
    # one draw per equal-mass stratum
    u = (lognormal_cdf_vec(tau) - lognormal_cdf(plan.l)) / plan.mass
    assert np.all(np.floor(u * 16) == np.arange(16))


def lognormal_cdf_vec(tau):
    return np.vectorize(lognormal_cdf)(tau)


def test_classifier_weight_formula():
    tau = 0.7
    lam = (tau**2 + 0.25) / (tau**2 * 0.25)
    dens = math.exp(-((math.log(tau) + 1.2) ** 2) / (2 * 1.44)) / (tau * 1.2 * math.sqrt(2 * math.pi))
    assert float(classifier_weight(tau)) == pytest.approx(lam * dens, rel=1e-14)


def test_noise_reuse_shapes():
    plan = TimestepPlan(0.1, 1.0, draws=4)
    d = NoiseDraws.draw(plan, 3, 2, 5, np.random.default_rng(0))
    assert d.tau.shape == (3, 4) and d.eps.shape == (3, 4, 2)
    plan2 = TimestepPlan(0.1, 1.0, draws=4, reuse_noise=False)
    d2 = NoiseDraws.draw(plan2, 3, 2, 5, np.random.default_rng(0))
    assert d2.tau.shape == (3, 5, 4) and d2.eps.shape == (3, 5, 4, 2)


def test_identical_class_models_give_uniform_posterior():
    def same(x, y, s):
        return -x / (s[:, None] ** 2 + 1.0)
    post = logits_to_posterior(elbo_logits(same, np.random.default_rng(0).normal(size=(7, 2)),
                                           TimestepPlan(0.05, 2.0), np.random.default_rng(1), 3))
    assert torch.allclose(post, torch.full((7, 3), 1 / 3, dtype=torch.float64), atol=1e-12)


def test_prior_shifts_posterior():
    logits = torch.zeros(1, 2, dtype=torch.float64)
    assert np.allclose(logits_to_posterior(logits, [0.8, 0.2]).numpy(), [[0.8, 0.2]])
    with pytest.raises(ValueError):
        logits_to_posterior(logits, [0.8, 0.8])


def test_oracle_classifier_near_bayes():
    spec = default_spec()
    test = sample_dataset(spec, 600, np.random.default_rng(2))
    post = classify(Oracle(spec), test.x, plan_subinterval(EDM, 6.4), [0.5, 0.5], np.random.default_rng(3))
    assert np.allclose(post.sum(1), 1.0)
    acc = np.mean(post.argmax(1) == test.y_true)
    assert acc >= bayes_accuracy(spec, test.x, test.y_true) - 0.02


def test_err_zero_for_constant_hbar():
    u, _ = quadrature_nodes(plan_subinterval(EDM, 6.4))
    err, mean = err_from_hbar(np.full((4, len(u)), 2.5), u)
    assert np.all(err == 0.0) and np.allclose(mean, 2.5)


def test_err_zero_for_linear_hbar_uniform_law():
    plan = TimestepPlan(0.1, 0.9, law="uniform")
    u, tau = quadrature_nodes(plan)
    err, _ = err_from_hbar(3.0 - 2.0 * tau, u)
    assert abs(err) < 1e-12


def test_err_nonzero_for_convex_hbar():
    plan = TimestepPlan(0.0, 1.0, law="uniform")
    u, tau = quadrature_nodes(plan)
    err, _ = err_from_hbar(tau**2, u)
    # mean of tau^2 is 1/3, endpoint average 1/2
    assert err == pytest.approx(1 / 3 - 1 / 2, abs=1e-3)


def test_err_diagnostic_shapes():
    spec = default_spec()
    x = sample_dataset(spec, 10, np.random.default_rng(0))
    err, mean = err_diagnostic(Oracle(spec), x.x, x.y_true, plan_subinterval(EDM, 6.4),
                               np.random.default_rng(1), quad_points=9, mc_draws=4, classes=2)
    assert err.shape == mean.shape == (10,) and np.all(mean > 0)


def test_pl_prior_geometric_closed_form():
    c, n = 3, 12
    rng = np.random.default_rng(0)
    y = np.arange(n) % c
    data = corrupt_partial(Dataset(np.zeros((n, 1)), y, c), "random", 0.5, rng)
    scores = rng.random((n, c))
    z = np.bincount(np.where(data.mask, scores, -np.inf).argmax(1), minlength=c) / n
    for k in (1, 5, 40):
        r, hist = estimate_prior_pl(data, [scores] * k, mu=0.9)
        assert np.max(np.abs(r - pl_prior_closed_form(z, 0.9, k))) < 1e-10
        assert len(hist) == k + 1
    with pytest.raises(PriorError):
        estimate_prior_pl(data, [scores], mu=1.0)


def test_su_prior_counts_labeled():
    y = np.array([0] * 30 + [1] * 70)
    semi = corrupt_semi(Dataset(np.zeros((100, 1)), y, 2), 0.2, np.random.default_rng(0))
    assert np.allclose(estimate_prior_su(semi), [6 / 20, 14 / 20])


def test_nl_prior_solve():
    assert np.allclose(solve_prior_nl([0.6, 0.4], symmetric_transition(2, 0.4)), [1.0, 0.0], atol=1e-12)
    assert np.allclose(solve_prior_nl([0.3, 0.7], np.eye(2)), [0.3, 0.7])
    with pytest.raises(PriorError):
        solve_prior_nl([0.5, 0.5], symmetric_transition(2, 0.5))


def test_nl_prior_infeasible_warns():
    with pytest.warns(RuntimeWarning):
        pi = solve_prior_nl([0.9, 0.1], symmetric_transition(2, 0.4))
    assert np.allclose(pi.sum(), 1.0) and np.all(pi >= 0)


def test_candidate_restricted():
    out = candidate_restricted([[0.2, 0.5, 0.3]], [[True, False, True]])
    assert np.allclose(out, [[0.4, 0.0, 0.6]])
