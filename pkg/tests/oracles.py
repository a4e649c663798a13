"""Independent reference computations, written without importing the package.

Frozen constants were computed by hand or by the routines below before the
implementation existed; tests compare the package against both.
"""

from __future__ import annotations

import math

import numpy as np

# exp(-1.2): median of the default log-normal timestep law
LOGNORMAL_MEDIAN = 0.30119421191220214

# DDPM with betas (0.1, 0.2) at t = 2
DDPM2_ALPHA = math.sqrt(0.72)
DDPM2_SIGMA = math.sqrt(0.28)

# left end of the Delta = 6.4 interval, from bisection below
L_DELTA_64 = 0.014143424505105933


def normal_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def lognormal_cdf(tau: float, mean: float = -1.2, std: float = 1.2) -> float:
    return 0.0 if tau <= 0 else normal_cdf((math.log(tau) - mean) / std)


def bisect_interval(delta: float, mean: float = -1.2, std: float = 1.2, iters: int = 200) -> float:
    """Left end l of [l, l + delta] with F(l) + F(l + delta) = 1, by plain bisection."""
    lo, hi = 0.0, math.exp(mean)
    g = lambda t: lognormal_cdf(t, mean, std) + lognormal_cdf(t + delta, mean, std) - 1.0  # noqa: E731
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def ddpm_weight_alt(a_t, s_t, a_p, s_p) -> float:
    """w_t = (1 / (2 sq^2)) (a_p / a_t)^2 (s_t^2 - (a_t / a_p)^2 s_p^2)^2."""
    sq2 = (s_t**2 - (a_t / a_p) ** 2 * s_p**2) * s_p**2 / s_t**2
    return (a_p / a_t) ** 2 * (s_t**2 - (a_t**2 / a_p**2) * s_p**2) ** 2 / (2 * sq2)


def gaussian_logpdf(x, mean, cov) -> float:
    x, mean, cov = np.asarray(x, float), np.asarray(mean, float), np.asarray(cov, float)
    d = len(x)
    diff = x - mean
    sign, logdet = np.linalg.slogdet(cov)
    return float(-0.5 * (diff @ np.linalg.solve(cov, diff) + logdet + d * math.log(2 * math.pi)))


def mixture_logpdf(x, weights, means, covs, alpha, sigma) -> float:
    terms = [math.log(w) + gaussian_logpdf(x, alpha * np.asarray(m), alpha**2 * np.asarray(c) + sigma**2 * np.eye(len(x)))
             for w, m, c in zip(weights, means, covs) if w > 0]
    top = max(terms)
    return top + math.log(sum(math.exp(t - top) for t in terms))


def numerical_grad(f, x, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def elr_r(f_s, f_t, y: int) -> list[float]:
    """Noisy-label target computed entry by entry."""
    c = len(f_s)
    delta = sum(f_s[k] * f_t[k] for k in range(c))
    return [(1.0 if k == y else 0.0) - f_s[k] * (delta - f_t[k]) / (1.0 - delta) for k in range(c)]


def pl_prior_closed_form(z, mu: float, k: int) -> np.ndarray:
    c = len(z)
    return np.full(c, 1.0 / c) * mu**k + np.asarray(z) * (1 - mu**k)


def edm_precondition(sigma: float, sd: float = 0.5):
    s2 = sigma**2 + sd**2
    return sd**2 / s2, sigma * sd / math.sqrt(s2), 1 / math.sqrt(s2), math.log(sigma) / 4
