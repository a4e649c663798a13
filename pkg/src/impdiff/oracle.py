"""Closed-form densities, scores and posteriors of a Gaussian mixture pushed
through the forward kernel N(alpha_t x_0, sigma_t^2 I).

Class ``y`` at time ``t`` is again a mixture with means ``alpha_t mu_k`` and
covariances ``A_k = alpha_t^2 Sigma_k + sigma_t^2 I``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp

from .data import MixtureSpec, Supervision, SupervisionModel
from .schedules import Schedule, alpha_sigma


class OracleError(ValueError):
    pass


def _alpha_sigma_rows(schedule: Schedule, t, n: int):
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        a, s = alpha_sigma(schedule, float(t))
        return np.full(n, a), np.full(n, s)
    if schedule.kind == "EDM":
        if np.any(t < 0):
            raise OracleError("negative EDM timestep")
        return np.ones_like(t), t.copy()
    pairs = np.array([alpha_sigma(schedule, float(v)) for v in t])
    return pairs[:, 0], pairs[:, 1]


class Oracle:
    """Analytic engine for one mixture under one schedule.

    For scalar timesteps the per-component Cholesky factors are cached; per-row
    timesteps fall back to batched solves.
    """

    def __init__(self, spec: MixtureSpec, schedule: Schedule | None = None):
        self.spec = spec
        self.schedule = schedule or Schedule()
        self._cache: dict = {}

    # -- per-component pieces ---------------------------------------------
    def _factors(self, y: int, a: float, s: float):
        key = (y, a, s)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        d = self.spec.dim
        A = a * a * self.spec.covs[y] + (s * s) * np.eye(d)
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError as exc:
            raise OracleError("noised covariance is numerically singular") from exc
        Ainv = np.linalg.inv(A)
        logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[key] = (Ainv, logdet)
        return Ainv, logdet

    def _component_terms(self, x, y: int, t):
        """Return (log w_k + log N_k(x), -A_k^{-1}(x - m_k)) with shapes (n, K), (n, K, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        if d != self.spec.dim:
            raise OracleError(f"point dimension {d} != spec dimension {self.spec.dim}")
        mu, w = self.spec.means[y], self.spec.weights[y]
        t_arr = np.asarray(t, dtype=float)
        if t_arr.ndim == 0:
            a, s = alpha_sigma(self.schedule, float(t_arr))
            Ainv, logdet = self._factors(y, a, s)
            diff = x[:, None, :] - a * mu[None]                       # (n,K,d)
            sol = np.einsum("kij,nkj->nki", Ainv, diff)
            logdet = logdet[None, :]
        else:
            a, s = _alpha_sigma_rows(self.schedule, t_arr, n)
            A = (a[:, None, None, None] ** 2) * self.spec.covs[y][None] \
                + (s[:, None, None, None] ** 2) * np.eye(d)            # (n,K,d,d)
            sign, logdet = np.linalg.slogdet(A)
            if np.any(sign <= 0):
                raise OracleError("noised covariance is numerically singular")
            diff = x[:, None, :] - a[:, None, None] * mu[None]
            sol = np.linalg.solve(A, diff[..., None])[..., 0]
        maha = np.einsum("nki,nki->nk", diff, sol)
        with np.errstate(divide="ignore"):
            logw = np.log(w)[None, :]
        logp = logw - 0.5 * (maha + logdet + d * math.log(2 * math.pi))
        return logp, -sol

    # -- class level -------------------------------------------------------
    def class_log_density(self, x, y: int, t) -> np.ndarray:
        logp, _ = self._component_terms(x, y, t)
        return logsumexp(logp, axis=1)

    def class_log_densities(self, x, t) -> np.ndarray:
        return np.stack([self.class_log_density(x, y, t) for y in range(self.spec.num_classes)], axis=1)

    def clean_conditional_score(self, x, y: int, t) -> np.ndarray:
        logp, comp_scores = self._component_terms(x, y, t)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        return np.einsum("nk,nkd->nd", resp, comp_scores)

    def clean_scores(self, x, t) -> np.ndarray:
        """All class scores stacked as (n, c, d)."""
        return np.stack([self.clean_conditional_score(x, y, t) for y in range(self.spec.num_classes)], axis=1)

    def posterior(self, x, t, prior=None) -> np.ndarray:
        prior = self.spec.prior if prior is None else np.asarray(prior, dtype=float)
        _check_simplex(prior)
        with np.errstate(divide="ignore"):
            logits = np.log(prior)[None, :] + self.class_log_densities(x, t)
        return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))

    # -- pooled (imprecise-label) mixture ---------------------------------
    def pooled_terms(self, x, class_weights, t):
        class_weights = np.asarray(class_weights, dtype=float)
        logps, scores = [], []
        with np.errstate(divide="ignore"):
            for y in range(self.spec.num_classes):
                if class_weights[..., y].max() <= 0:
                    continue
                logp, sc = self._component_terms(x, y, t)
                logps.append(logp + np.log(class_weights[..., y]).reshape(-1, 1))
                scores.append(sc)
        return np.concatenate(logps, axis=1), np.concatenate(scores, axis=1)

    def pooled_log_density(self, x, class_weights, t) -> np.ndarray:
        logp, _ = self.pooled_terms(x, class_weights, t)
        return logsumexp(logp, axis=1)

    def pooled_score(self, x, class_weights, t) -> np.ndarray:
        """Score of sum_y w_y q_t(x | y), treating every component of every class jointly."""
        logp, scores = self.pooled_terms(x, class_weights, t)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        return np.einsum("nk,nkd->nd", resp, scores)

    def score_fn(self):
        """Adapter ``f(x, y, sigma) -> score`` over numpy rows (EDM levels)."""
        def fn(x, y, sigma):
            x = np.asarray(x, dtype=float)
            y = np.asarray(y)
            sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (len(x),))
            out = np.empty_like(x)
            for cls in np.unique(y):
                idx = np.flatnonzero(y == cls)
                out[idx] = self.clean_conditional_score(x[idx], int(cls), sigma[idx])
            return out
        return fn


def _check_simplex(p, tol: float = 1e-9):
    p = np.asarray(p, dtype=float)
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=-1) - 1) > tol):
        raise OracleError("weights must form a simplex")


# -- function-style API -------------------------------------------------------

def clean_conditional_score(spec: MixtureSpec, schedule: Schedule, x_t, y: int, t):
    return Oracle(spec, schedule).clean_conditional_score(x_t, y, t)


def imprecise_conditional_score(spec: MixtureSpec, schedule: Schedule, x_t, z: Supervision,
                                supervision_model: SupervisionModel, t):
    """Score of q_t(x | z) = sum_y p(y | z) q_t(x | y), from the pooled density."""
    p = supervision_model.p_y_given_z(z)
    _check_simplex(p)
    return Oracle(spec, schedule).pooled_score(x_t, p, t)


def convex_combination_score(spec: MixtureSpec, schedule: Schedule, x_t, z: Supervision,
                             supervision_model: SupervisionModel, t):
    """sum_y p(y | x_t, z) * clean score of y, with the posterior from Bayes' rule."""
    orc = Oracle(spec, schedule)
    p = supervision_model.p_y_given_z(z)
    post = orc.posterior(x_t, t, prior=p)
    return np.einsum("nc,ncd->nd", post, orc.clean_scores(x_t, t))


def oracle_posterior(spec: MixtureSpec, schedule: Schedule, x_t, t, prior=None):
    return Oracle(spec, schedule).posterior(x_t, t, prior)


def bayes_accuracy(spec: MixtureSpec, x, y_true) -> float:
    pred = Oracle(spec).posterior(x, 0.0).argmax(axis=1)
    return float(np.mean(pred == np.asarray(y_true)))


def pooled_score_residuals(spec: MixtureSpec, schedule: Schedule, supervision_model: SupervisionModel,
                       n: int, rng: np.random.Generator, zs=None, t_range=(0.01, 5.0)):
    """Relative residuals between the pooled score and its convex-combination form.

    Draws ``n`` random (x, t, z) triples. Returns an array of residuals.
    """
    c = spec.num_classes
    if zs is None:
        from .data import Candidate, Exact, Noisy, Unlabeled
        zs = [Exact(y) for y in range(c)] + [Noisy(y) for y in range(c)] + [Unlabeled()]
        zs += [Candidate(frozenset(s)) for s in _nonempty_subsets(c)]
    orc = Oracle(spec, schedule)
    ts = np.exp(rng.uniform(np.log(t_range[0]), np.log(t_range[1]), size=n))
    spread = np.sqrt(np.max([np.diag(spec.class_cov(y)).max() for y in range(c)]))
    out = np.empty(n)
    for i in range(n):
        z = zs[rng.integers(len(zs))]
        y = rng.integers(c)
        t = ts[i]
        a, s = alpha_sigma(schedule, t)
        x = a * spec.class_mean(y) + rng.standard_normal(spec.dim) * 2 * np.sqrt(a * a * spread**2 + s * s)
        p = supervision_model.p_y_given_z(z)
        lhs = orc.pooled_score(x[None], p, t)[0]
        post = orc.posterior(x[None], t, prior=p)[0]
        rhs = post @ orc.clean_scores(x[None], t)[0]
        out[i] = np.linalg.norm(lhs - rhs) / (np.linalg.norm(rhs) + 1e-12)
    return out


def _nonempty_subsets(c: int):
    for bits in range(1, 1 << c):
        yield [j for j in range(c) if bits >> j & 1]
