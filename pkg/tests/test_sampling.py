import numpy as np
import pytest

from impdiff.data import Dataset, MixtureSpec, default_spec, sample_dataset
from impdiff.oracle import Oracle, bayes_accuracy
from impdiff.sampling import (SampleBatch, centroid_rule_accuracy, condense, evaluate_generation,
                              nearest_centroid_accuracy, noisy_subset_accuracy, reverse_step_ancestral,
                              sample_ancestral, sample_edm, sigma_grid)
from impdiff.schedules import DegenerateTimestepError, Schedule, alpha_sigma

GAUSS = MixtureSpec([[1.0], [1.0]], [[[1.0, -0.5]], [[-1.0, 0.5]]],
                    [[[[0.5, 0.2], [0.2, 0.3]]], [[[0.2, 0.0], [0.0, 0.4]]]], [0.5, 0.5])


def test_sigma_grid_endpoints_and_order():
    g = sigma_grid(32, 0.002, 80.0)
    assert g[0] == pytest.approx(80.0) and g[-1] == pytest.approx(0.002) and np.all(np.diff(g) < 0)
    with pytest.raises(ValueError):
        sigma_grid(1, 0.002, 80.0)


def test_oracle_sampler_reproduces_moments():
    n = 4000
    for y in range(2):
        pts = sample_edm(Oracle(GAUSS), y, n, 32, rng=np.random.default_rng(y)).points
        cov = GAUSS.class_cov(y)
        stderr = np.sqrt(np.diag(cov) / n)
        assert np.all(np.abs(pts.mean(0) - GAUSS.class_mean(y)) < 3 * stderr)
        emp = np.cov(pts, rowvar=False)
        assert np.linalg.norm(emp - cov) / np.linalg.norm(cov) < 0.05


def test_heun_self_convergence():
    ends = [sample_edm(Oracle(GAUSS), 0, 200, k, rng=np.random.default_rng(5)).points for k in (8, 16, 32)]
    d1 = np.abs(ends[0] - ends[1]).mean()
    d2 = np.abs(ends[1] - ends[2]).mean()
    assert d2 / d1 < 0.6


def test_empty_batch_and_determinism():
    b = sample_edm(Oracle(GAUSS), 1, 0)
    assert isinstance(b, SampleBatch) and len(b) == 0 and b.points.shape == (0, 2)
    a = sample_edm(Oracle(GAUSS), 1, 10, 8, rng=np.random.default_rng(3)).points
    c = sample_edm(Oracle(GAUSS), 1, 10, 8, rng=np.random.default_rng(3)).points
    assert np.array_equal(a, c)


def _point_mass_score(x_star, schedule):
    def score(x, y, t):
        a, s = alpha_sigma(schedule, t)
        return -(x - a * x_star) / s**2
    return score


def test_ancestral_point_mass_chain():
    sch = Schedule.ddpm_linear(200)
    x_star = np.array([1.5, -0.7])
    out = sample_ancestral(_point_mass_score(x_star, sch), 0, 1000, 2, sch, np.random.default_rng(0))
    a0 = alpha_sigma(sch, 0)[0]
    assert np.linalg.norm(out.points.mean(0) - a0 * x_star) < 0.05
    assert out.kind == "ancestral" and len(out) == 1000


def test_ancestral_vanishing_gap_step():
    sch = Schedule("DDPM-discrete", {"betas": [0.1, 0.0]})
    a_t, _ = alpha_sigma(sch, 2)
    a_p, _ = alpha_sigma(sch, 1)
    x = np.array([[0.4, -1.1]])
    got = reverse_step_ancestral(lambda x, y, t: np.full_like(x, 7.0), x, 0, 2, sch, np.random.default_rng(0))
    assert np.array_equal(got, (a_p / a_t) * x)


def test_ancestral_contract():
    sch = Schedule.ddpm_linear(10)
    zero = lambda x, y, t: np.zeros_like(x)  # noqa: E731
    with pytest.raises(DegenerateTimestepError):
        reverse_step_ancestral(zero, np.zeros((1, 2)), 0, 0, sch, np.random.default_rng(0))
    with pytest.raises(ValueError):
        reverse_step_ancestral(zero, np.zeros((1, 2)), 0, 1, Schedule(), np.random.default_rng(0))
    a = reverse_step_ancestral(zero, np.ones((3, 2)), 0, 5, sch, np.random.default_rng(9))
    b = reverse_step_ancestral(zero, np.ones((3, 2)), 0, 5, sch, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_purity_of_true_samples_near_bayes():
    spec = default_spec()
    rng = np.random.default_rng(0)
    batches = [SampleBatch(y, spec.sample_class(y, 3000, rng), np.array([])) for y in range(2)]
    m = evaluate_generation(batches, spec)
    test = sample_dataset(spec, 6000, rng)
    assert abs(m.mean_purity - bayes_accuracy(spec, test.x, test.y_true)) < 0.02
    assert np.all(m.mean_error >= 0) and np.all((m.purity >= 0) & (m.purity <= 1))


def test_degenerate_batch_metrics():
    spec = default_spec()
    batches = [SampleBatch(y, np.tile(spec.class_mean(y), (5, 1)), np.array([])) for y in range(2)]
    m = evaluate_generation(batches, spec)
    assert np.allclose(m.mean_error, 0)
    assert np.allclose(m.cov_error, [np.linalg.norm(spec.class_cov(y)) for y in range(2)])
    assert [r["n"] for r in m.rows()] == [5, 5]


def test_centroid_rule_and_condense_oracle():
    spec = default_spec()
    test = sample_dataset(spec, 2000, np.random.default_rng(1))
    ideal = centroid_rule_accuracy(spec, test)
    acc = condense(Oracle(spec), 200, spec, test, np.random.default_rng(2), steps=16)
    assert abs(acc - ideal) < 0.02
    with pytest.raises(ValueError):
        condense(Oracle(spec), 0, spec, test, np.random.default_rng(2))


def test_nearest_centroid_and_noisy_subset():
    x = np.array([[-1.0, 0], [1.0, 0], [-2.0, 0], [2.0, 0]])
    y = np.array([0, 1, 0, 1])
    assert nearest_centroid_accuracy([[-1, 0], [1, 0]], x, y) == 1.0
    train = Dataset(x, y, 2)
    assert noisy_subset_accuracy(train, 1, train, np.random.default_rng(0), repeats=3) == 1.0
