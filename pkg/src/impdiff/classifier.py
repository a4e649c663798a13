"""Diffusion classifier, timestep-subinterval planning and class-prior estimation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from .data import EXACT, Dataset
from .net import DTYPE, ScoreNet, as_tensor
from .oracle import Oracle
from .schedules import Schedule

ScoreFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class PlanError(ValueError):
    pass


class PriorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# timestep law
# ---------------------------------------------------------------------------

def lognormal_cdf(tau, P_mean: float, P_std: float):
    tau = np.asarray(tau, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(tau > 0, ndtr((np.log(np.maximum(tau, 1e-300)) - P_mean) / P_std), 0.0)


def lognormal_pdf(tau, P_mean: float, P_std: float):
    tau = np.asarray(tau, dtype=float)
    z = (np.log(tau) - P_mean) / P_std
    return np.exp(-0.5 * z * z) / (tau * P_std * math.sqrt(2 * math.pi))


def lognormal_ppf(u, P_mean: float, P_std: float):
    return np.exp(P_mean + P_std * ndtri(np.asarray(u, dtype=float)))


def classifier_weight(tau, sigma_data: float = 0.5, P_mean: float = -1.2, P_std: float = 1.2):
    """w_tau = EDM loss weight times the log-normal training density at tau."""
    tau = np.asarray(tau, dtype=float) if not isinstance(tau, torch.Tensor) else tau
    lib = torch if isinstance(tau, torch.Tensor) else np
    lam = (tau**2 + sigma_data**2) / (tau**2 * sigma_data**2)
    dens = (1.0 / P_std) / (tau * math.sqrt(2 * math.pi)) \
        * lib.exp(-((lib.log(tau) - P_mean) ** 2) / (2 * P_std**2))
    return lam * dens


@dataclass(frozen=True)
class TimestepPlan:
    """Restriction of the timestep law to [l, r] plus Monte-Carlo settings.

    ``law`` is ``"lognormal"`` (EDM) or ``"uniform"`` (unit interval).
    ``r = inf`` with ``l = 0`` means the unrestricted law.
    """

    l: float
    r: float
    draws: int = 16
    reuse_noise: bool = True
    law: str = "lognormal"
    P_mean: float = -1.2
    P_std: float = 1.2
    sigma_data: float = 0.5
    quad_nodes: int = 33
    stratified: bool = True
    residual: float = 0.0

    def __post_init__(self):
        if self.law not in ("lognormal", "uniform"):
            raise PlanError(f"unknown timestep law {self.law!r}")
        if self.draws < 1:
            raise PlanError("plan needs at least one draw")
        if not (0 <= self.l <= self.r):
            raise PlanError("need 0 <= l <= r")

    def cdf(self, tau):
        if self.law == "uniform":
            return np.clip(np.asarray(tau, dtype=float), 0.0, 1.0)
        return lognormal_cdf(tau, self.P_mean, self.P_std)

    def ppf(self, u):
        if self.law == "uniform":
            return np.asarray(u, dtype=float)
        return lognormal_ppf(u, self.P_mean, self.P_std)

    def pdf(self, tau):
        if self.law == "uniform":
            return np.ones_like(np.asarray(tau, dtype=float))
        return lognormal_pdf(tau, self.P_mean, self.P_std)

    @property
    def mass(self) -> float:
        return float(self.cdf(self.r) - self.cdf(self.l))

    def weight(self, tau):
        return classifier_weight(tau, self.sigma_data, self.P_mean, self.P_std)

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        """Draw tau ~ p(tau | tau in [l, r]) by inverse CDF; stratified along the last axis."""
        lo, hi = float(self.cdf(self.l)), float(self.cdf(self.r))
        shape = tuple(np.atleast_1d(shape))
        if hi <= lo:
            return np.full(shape, self.l if self.l > 0 else self.ppf(0.5))
        u = rng.random(shape)
        if self.stratified:
            k = shape[-1]
            u = (np.arange(k) + u) / k
        tau = self.ppf(lo + (hi - lo) * u)
        return np.clip(tau, max(self.l, 1e-12), self.r) if self.law == "lognormal" else tau

    def unrestricted(self) -> "TimestepPlan":
        hi = 1.0 if self.law == "uniform" else math.inf
        return TimestepPlan(0.0, hi, self.draws, self.reuse_noise, self.law, self.P_mean,
                            self.P_std, self.sigma_data, self.quad_nodes, self.stratified)

    def with_draws(self, draws: int) -> "TimestepPlan":
        return TimestepPlan(self.l, self.r, draws, self.reuse_noise, self.law, self.P_mean,
                            self.P_std, self.sigma_data, self.quad_nodes, self.stratified, self.residual)


def plan_subinterval(schedule: Schedule, delta: float, draws: int = 16, reuse_noise: bool = True,
                     law: str | None = None, xtol: float = 1e-14) -> TimestepPlan:
    """Interval [l, l + delta] holding equal probability mass on both sides of the median.

    Solves F(tau) + F(tau + delta) - 1 = 0 with Brent's method for the log-normal
    law; the uniform(0, 1) law has the closed form l = (1 - delta) / 2.
    """
    if delta < 0:
        raise PlanError("delta must be non-negative")
    if law is None:
        law = "lognormal" if schedule.kind == "EDM" else "uniform"
    common = dict(draws=draws, reuse_noise=reuse_noise, law=law, sigma_data=schedule.sigma_data)
    if law == "uniform":
        if delta > 1:
            raise PlanError("delta exceeds the unit support")
        l = (1.0 - delta) / 2.0
        return TimestepPlan(l, l + delta, **common)

    P_mean, P_std = schedule.P_mean, schedule.P_std
    median = math.exp(P_mean)
    if delta == 0:
        return TimestepPlan(median, median, P_mean=P_mean, P_std=P_std, **common)

    def g(tau):
        return float(lognormal_cdf(tau, P_mean, P_std) + lognormal_cdf(tau + delta, P_mean, P_std) - 1.0)

    lo, hi = 0.0, median
    if not (g(lo) < 0 <= g(hi)):
        raise PlanError("no sign change of F(tau) + F(tau + delta) - 1 in the bracket")
    l = brentq(g, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=500)
    return TimestepPlan(l, l + delta, P_mean=P_mean, P_std=P_std, residual=abs(g(l)), **common)


# ---------------------------------------------------------------------------
# score models
# ---------------------------------------------------------------------------

class OracleScoreModel:
    """Wrap the analytic oracle as a torch score function (no gradients)."""

    def __init__(self, oracle: Oracle):
        self.oracle = oracle
        self.fn = oracle.score_fn()

    def __call__(self, x, y, sigma):
        out = self.fn(x.detach().cpu().numpy(), y.cpu().numpy(), sigma.detach().cpu().numpy())
        return torch.as_tensor(out, dtype=DTYPE)


def as_score_fn(model) -> ScoreFn:
    if isinstance(model, ScoreNet):
        return model.score
    if isinstance(model, Oracle):
        return OracleScoreModel(model)
    if callable(model):
        return model
    raise TypeError(f"cannot use {type(model).__name__} as a score model")


# ---------------------------------------------------------------------------
# ELBO logits and posterior
# ---------------------------------------------------------------------------

@dataclass
class NoiseDraws:
    """Pre-drawn (tau, eps); shape (n, draws) and (n, draws, d), or with a class axis."""

    tau: np.ndarray
    eps: np.ndarray

    @classmethod
    def draw(cls, plan: TimestepPlan, n: int, d: int, c: int, rng: np.random.Generator) -> "NoiseDraws":
        if plan.reuse_noise:
            return cls(plan.sample(rng, (n, plan.draws)), rng.standard_normal((n, plan.draws, d)))
        return cls(plan.sample(rng, (n, c, plan.draws)), rng.standard_normal((n, c, plan.draws, d)))


def reconstruction_errors(score_model, x, plan: TimestepPlan, draws: NoiseDraws, classes: int,
                          sigma_in=None, start: str = "raw"):
    """Per-draw weighted reconstruction errors w_tau ||h(x_tau, y, tau) - target||^2.

    Returns a torch tensor (n, c, draws). ``sigma_in`` is the noise level
    already present in ``x`` (None for clean inputs): extra noise tau is added
    on top and the denoiser is queried at sqrt(sigma_in^2 + tau^2).
    """
    fn = as_score_fn(score_model)
    x = as_tensor(x)
    n, d = x.shape
    c = classes
    tau = torch.as_tensor(draws.tau, dtype=DTYPE)
    eps = torch.as_tensor(draws.eps, dtype=DTYPE)
    if tau.ndim == 2:                                   # shared across classes
        tau = tau[:, None, :].expand(n, c, tau.shape[-1])
        eps = eps[:, None].expand(n, c, *eps.shape[1:])
    k = tau.shape[-1]
    s_in = torch.zeros(n, dtype=DTYPE) if sigma_in is None else as_tensor(sigma_in).reshape(-1).expand(n)
    ys = torch.arange(c).view(1, c, 1).expand(n, c, k)

    if start == "estimate" and sigma_in is not None:
        xs = x[:, None, :].expand(n, c, d).reshape(-1, d)
        sin_rows = s_in[:, None].expand(n, c).reshape(-1)
        y_rows = torch.arange(c).repeat(n)
        target = (xs + sin_rows[:, None] ** 2 * fn(xs, y_rows, sin_rows)).view(n, c, d)
        level = tau
    elif start == "raw":
        target = x[:, None, :].expand(n, c, d)
        level = torch.sqrt(s_in[:, None, None] ** 2 + tau**2)
    else:
        raise ValueError(f"unknown start {start!r}")

    x_tau = target[:, :, None, :] + tau[..., None] * eps           # (n,c,k,d)
    s = fn(x_tau.reshape(-1, d), ys.reshape(-1), level.reshape(-1)).view(n, c, k, d)
    h = x_tau + tau[..., None] ** 2 * s
    err = ((h - target[:, :, None, :]) ** 2).sum(-1)
    w = classifier_weight(tau, plan.sigma_data, plan.P_mean, plan.P_std)
    return w * err


def elbo_logits(score_model, x, plan: TimestepPlan, rng: np.random.Generator, classes: int,
                sigma_in=None, draws: NoiseDraws | None = None, start: str = "raw") -> torch.Tensor:
    """Approximate class log-likelihoods: minus the summed weighted reconstruction error."""
    if plan.draws < 1:
        raise PlanError("empty plan")
    x = as_tensor(x)
    if draws is None:
        draws = NoiseDraws.draw(plan, x.shape[0], x.shape[1], classes, rng)
    return -reconstruction_errors(score_model, x, plan, draws, classes, sigma_in, start).sum(-1)


def elbo_logit(score_model, x, y: int, plan: TimestepPlan, rng: np.random.Generator,
               classes: int | None = None) -> torch.Tensor:
    classes = (y + 1) if classes is None else classes
    return elbo_logits(score_model, x, plan, rng, classes)[:, y]


def logits_to_posterior(logits, prior=None):
    logits = as_tensor(logits)
    if prior is not None:
        prior = as_tensor(prior)
        if torch.any(prior < 0) or abs(float(prior.sum()) - 1) > 1e-9:
            raise ValueError("prior must be a simplex")
        logits = logits + torch.log(prior)
    return torch.softmax(logits, dim=-1)


def posterior(score_model, x, plan: TimestepPlan, prior, rng: np.random.Generator,
              classes: int | None = None, sigma_in=None) -> torch.Tensor:
    classes = len(prior) if classes is None else classes
    return logits_to_posterior(elbo_logits(score_model, x, plan, rng, classes, sigma_in), prior)


def classify(score_model, x, plan: TimestepPlan, prior, rng: np.random.Generator,
             batch: int = 512) -> np.ndarray:
    """Posterior rows for every point, evaluated in fixed-size batches."""
    x = np.asarray(x, dtype=float)
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch):
            out.append(posterior(score_model, x[i:i + batch], plan, prior, rng).numpy())
    return np.concatenate(out) if out else np.zeros((0, len(prior)))


# ---------------------------------------------------------------------------
# subinterval diagnostic
# ---------------------------------------------------------------------------

def quadrature_nodes(plan: TimestepPlan, nodes: int | None = None):
    """Nodes tau_j equally spaced in probability mass across [l, r]."""
    nodes = nodes or plan.quad_nodes
    lo, hi = float(plan.cdf(plan.l)), float(plan.cdf(plan.r))
    u = np.linspace(lo, hi, nodes)
    tau = plan.ppf(u)
    tau[0], tau[-1] = plan.l, plan.r
    return u, tau


def err_from_hbar(hbar: np.ndarray, u: np.ndarray):
    """Interval mean of hbar minus its endpoint average; trapezoid over mass coordinates.

    ``hbar`` has the node axis last. Returns (err, interval_mean).
    """
    hbar = np.asarray(hbar, dtype=float)
    du = np.diff(u)
    ends = 0.5 * (hbar[..., :1] + hbar[..., -1:])
    seg = 0.5 * (hbar[..., 1:] + hbar[..., :-1])
    # centring per segment keeps a constant integrand at exactly zero
    err = np.sum((seg - ends) * du, axis=-1) / du.sum()
    return err, np.sum(seg * du, axis=-1) / du.sum()


def hbar_values(score_model, x, plan: TimestepPlan, classes: int, rng: np.random.Generator,
                mc_draws: int = 32, nodes: int | None = None):
    """Monte-Carlo estimate of hbar(tau_j, y) for each point; shape (n, c, nodes)."""
    u, tau_nodes = quadrature_nodes(plan, nodes)
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    eps = rng.standard_normal((n, mc_draws, d))
    out = np.empty((n, classes, len(tau_nodes)))
    with torch.no_grad():
        for j, tau in enumerate(tau_nodes):
            draws = NoiseDraws(np.full((n, mc_draws), tau), eps)
            out[:, :, j] = reconstruction_errors(score_model, x, plan, draws, classes).mean(-1).numpy()
    return u, tau_nodes, out


def err_diagnostic(score_model, x, y, plan: TimestepPlan, rng: np.random.Generator,
                   quad_points: int | None = None, mc_draws: int = 32, classes: int | None = None):
    """Per-sample Err(l, r, y) at each point's own class ``y``; returns (err, interval_mean_hbar)."""
    y = np.asarray(y)
    classes = int(y.max()) + 1 if classes is None else classes
    u, _, hb = hbar_values(score_model, x, plan, classes, rng, mc_draws, quad_points)
    hb_y = hb[np.arange(len(y)), y]
    return err_from_hbar(hb_y, u)


# ---------------------------------------------------------------------------
# class priors
# ---------------------------------------------------------------------------

def estimate_prior_pl(dataset: Dataset, predictions, mu: float = 0.9, epochs: int | None = None):
    """Moving-average prior from candidate-restricted argmax predictions.

    ``predictions`` is either a callable ``epoch -> (n, c) scores`` or a
    sequence of per-epoch score arrays. Returns (prior, history).
    """
    if not 0 <= mu < 1:
        raise PriorError("mu must lie in [0, 1)")
    c = dataset.num_classes
    if callable(predictions):
        if epochs is None:
            raise PriorError("epochs required with a callable predictor")
        per_epoch = (predictions(e) for e in range(epochs))
    else:
        per_epoch = list(predictions)[: epochs] if epochs is not None else list(predictions)
    r = np.full(c, 1.0 / c)
    history = [r.copy()]
    for scores in per_epoch:
        scores = np.asarray(scores, dtype=float)
        masked = np.where(dataset.mask, scores, -np.inf)
        z = np.bincount(masked.argmax(axis=1), minlength=c) / len(dataset)
        r = mu * r + (1 - mu) * z
        history.append(r.copy())
    return r, np.array(history)


def estimate_prior_su(dataset: Dataset) -> np.ndarray:
    labeled = dataset.kind == EXACT
    if not labeled.any():
        raise PriorError("no labeled samples to count")
    return np.bincount(dataset.label[labeled], minlength=dataset.num_classes) / labeled.sum()


def noisy_label_frequencies(dataset: Dataset) -> np.ndarray:
    return np.bincount(dataset.label, minlength=dataset.num_classes) / len(dataset)


def solve_prior_nl(noisy_counts, T, cond_max: float = 1e8) -> np.ndarray:
    """Clean prior pi from noisy-label frequencies via T^T pi = pi_noisy."""
    pi_noisy = np.asarray(noisy_counts, dtype=float)
    T = np.asarray(T, dtype=float)
    if np.linalg.cond(T) > cond_max:
        raise PriorError("transition matrix is singular or ill-conditioned")
    pi = np.linalg.solve(T.T, pi_noisy)
    if np.any(pi < -1e-9) or np.any(pi > 1 + 1e-9):
        warnings.warn("clean prior solution is infeasible; clipping to the simplex", RuntimeWarning)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def candidate_restricted(scores, mask) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    out = np.where(mask, scores, 0.0)
    return out / out.sum(axis=1, keepdims=True)


__all__: Sequence[str] = [
    "TimestepPlan", "plan_subinterval", "elbo_logits", "elbo_logit", "posterior", "classify",
    "err_diagnostic", "err_from_hbar", "estimate_prior_pl", "estimate_prior_su", "solve_prior_nl",
    "classifier_weight", "lognormal_cdf", "NoiseDraws", "OracleScoreModel",
]
