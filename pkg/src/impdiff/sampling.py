"""Reverse-process samplers, generation metrics and nearest-centroid condensation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .classifier import as_score_fn
from .data import Dataset, MixtureSpec
from .net import DTYPE
from .oracle import Oracle
from .schedules import DegenerateTimestepError, Schedule, alpha_sigma


@dataclass
class SampleBatch:
    y: int
    points: np.ndarray
    sigmas: np.ndarray
    kind: str = "heun"

    def __len__(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------------------
# discrete ancestral sampling
# ---------------------------------------------------------------------------

def discrete_score_fn(model, schedule: Schedule):
    """Score on the discrete schedule, from a model parameterised on the EDM noise level.

    x_t = alpha x0 + sigma eps means x_t / alpha is x0 plus noise sigma / alpha, so
    s_t(x) = s_edm(x / alpha, sigma / alpha) / alpha.
    """
    fn = as_score_fn(model)

    def score(x, y, t):
        a, s = alpha_sigma(schedule, t)
        x = torch.as_tensor(np.asarray(x), dtype=DTYPE)
        ys = torch.full((x.shape[0],), int(y), dtype=torch.long)
        lvl = torch.full((x.shape[0],), s / a, dtype=DTYPE)
        with torch.no_grad():
            return fn(x / a, ys, lvl).numpy() / a
    return score


def reverse_step_ancestral(score_fn, x_t, y: int, t: int, schedule: Schedule,
                           rng: np.random.Generator) -> np.ndarray:
    """One Gaussian reverse step x_t -> x_{t-1} on a discrete schedule.

    Mean (a_{t-1}/a_t)[x_t + (s_t^2 - (a_t/a_{t-1})^2 s_{t-1}^2) score];
    variance is the forward posterior variance at t.
    """
    if schedule.kind != "DDPM-discrete":
        raise ValueError("ancestral steps need a discrete schedule")
    if t < 1:
        raise DegenerateTimestepError("reverse step needs t >= 1")
    a_t, s_t = alpha_sigma(schedule, t)
    a_p, s_p = alpha_sigma(schedule, t - 1)
    x_t = np.asarray(x_t, dtype=float)
    gap = s_t**2 - (a_t / a_p) ** 2 * s_p**2
    mean = (a_p / a_t) * (x_t + gap * np.asarray(score_fn(x_t, y, t)))
    var = gap * s_p**2 / s_t**2
    return mean + np.sqrt(max(var, 0.0)) * rng.standard_normal(x_t.shape)


def sample_ancestral(score_fn, y: int, n: int, dim: int, schedule: Schedule,
                     rng: np.random.Generator) -> SampleBatch:
    T = schedule.num_steps
    _, s_T = alpha_sigma(schedule, T)
    x = s_T * rng.standard_normal((n, dim))
    for t in range(T, 0, -1):
        x = reverse_step_ancestral(score_fn, x, y, t, schedule, rng)
    return SampleBatch(y, x, np.array([alpha_sigma(schedule, t)[1] for t in range(T, -1, -1)]), "ancestral")


# ---------------------------------------------------------------------------
# probability-flow ODE
# ---------------------------------------------------------------------------

def sigma_grid(steps: int, sigma_min: float, sigma_max: float, rho: float = 7.0) -> np.ndarray:
    """Decreasing grid from sigma_max to sigma_min with rho-warped spacing."""
    if steps < 2:
        raise ValueError("need at least 2 steps")
    i = np.arange(steps) / (steps - 1)
    hi, lo = sigma_max ** (1 / rho), sigma_min ** (1 / rho)
    return (hi + i * (lo - hi)) ** rho


def sample_edm(model, y: int, n: int, steps: int = 32, schedule: Schedule | None = None,
               rng: np.random.Generator | None = None, dim: int | None = None) -> SampleBatch:
    """Integrate dx/dsigma = -sigma s(x, y, sigma) with Heun steps from sigma_max to sigma_min."""
    schedule = schedule or Schedule()
    rng = rng or np.random.default_rng(0)
    fn = as_score_fn(model)
    dim = dim or getattr(model, "dim", None) or getattr(getattr(model, "spec", None), "dim", None)
    if dim is None:
        raise ValueError("cannot infer the data dimension; pass dim")
    sig = sigma_grid(steps, schedule.sigma_min, schedule.sigma_max)
    if n == 0:
        return SampleBatch(y, np.zeros((0, dim)), sig, "heun")
    ys = torch.full((n,), int(y), dtype=torch.long)

    def drift(x, s):
        return -s * fn(x, ys, torch.full((n,), s, dtype=DTYPE))

    x = torch.as_tensor(sig[0] * rng.standard_normal((n, dim)), dtype=DTYPE)
    with torch.no_grad():
        for s_cur, s_next in zip(sig[:-1], sig[1:]):
            h = s_next - s_cur
            d1 = drift(x, s_cur)
            x_eul = x + h * d1
            d2 = drift(x_eul, s_next)
            x = x + 0.5 * h * (d1 + d2)
    return SampleBatch(y, x.numpy(), sig, "heun")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class GenMetrics:
    mean_error: np.ndarray
    cov_error: np.ndarray
    purity: np.ndarray
    count: np.ndarray
    score_mse: float | None = None

    def rows(self):
        for y in range(len(self.purity)):
            yield {"y": y, "n": int(self.count[y]), "mean_error": float(self.mean_error[y]),
                   "cov_error": float(self.cov_error[y]), "purity": float(self.purity[y])}

    @property
    def mean_purity(self) -> float:
        return float(np.mean(self.purity))


def evaluate_generation(batches, spec: MixtureSpec) -> GenMetrics:
    """Per-class moment errors and oracle-Bayes purity of generated points."""
    c = spec.num_classes
    me, ce, pur, cnt = np.zeros(c), np.zeros(c), np.zeros(c), np.zeros(c, dtype=int)
    orc = Oracle(spec)
    for b in batches:
        pts = np.asarray(b.points, dtype=float)
        y = b.y
        cnt[y] = len(pts)
        if len(pts) == 0:
            continue
        mu, cov = spec.class_mean(y), spec.class_cov(y)
        me[y] = np.linalg.norm(pts.mean(0) - mu)
        emp = np.cov(pts, rowvar=False, bias=True).reshape(spec.dim, spec.dim) if len(pts) > 1 \
            else np.zeros((spec.dim, spec.dim))
        ce[y] = np.linalg.norm(emp - cov)
        pur[y] = np.mean(orc.posterior(pts, 0.0).argmax(1) == y)
    return GenMetrics(me, ce, pur, cnt)


# ---------------------------------------------------------------------------
# condensation
# ---------------------------------------------------------------------------

def nearest_centroid_accuracy(centroids, x, y) -> float:
    centroids = np.asarray(centroids, dtype=float)
    d2 = ((np.asarray(x)[:, None, :] - centroids[None]) ** 2).sum(-1)
    return float(np.mean(d2.argmin(1) == np.asarray(y)))


def condense(model, ipc: int, spec: MixtureSpec, eval_set: Dataset, rng: np.random.Generator,
             steps: int = 32, schedule: Schedule | None = None, repeats: int = 1) -> float:
    """Synthesize ``ipc`` points per class, fit nearest centroids, report clean-test accuracy.

    With ``repeats > 1`` the accuracy is averaged over independent syntheses.
    """
    if ipc < 1:
        raise ValueError("ipc must be >= 1")
    accs = []
    for _ in range(repeats):
        cents = [sample_edm(model, y, ipc, steps, schedule, rng, dim=spec.dim).points.mean(0)
                 for y in range(spec.num_classes)]
        accs.append(nearest_centroid_accuracy(cents, eval_set.x, eval_set.y_true))
    return float(np.mean(accs))


def noisy_subset_accuracy(train: Dataset, ipc: int, eval_set: Dataset, rng: np.random.Generator,
                          repeats: int = 1) -> float:
    """Centroids from ``ipc`` random real points per observed (noisy) label."""
    c = train.num_classes
    accs = []
    for _ in range(repeats):
        cents = []
        for y in range(c):
            pool = np.flatnonzero(train.label == y)
            if len(pool) == 0:
                pool = np.arange(len(train))
            pick = rng.choice(pool, size=ipc, replace=len(pool) < ipc)
            cents.append(train.x[pick].mean(0))
        accs.append(nearest_centroid_accuracy(cents, eval_set.x, eval_set.y_true))
    return float(np.mean(accs))


def centroid_rule_accuracy(spec: MixtureSpec, eval_set: Dataset) -> float:
    """Accuracy of nearest-centroid at the true class means."""
    cents = [spec.class_mean(y) for y in range(spec.num_classes)]
    return nearest_centroid_accuracy(cents, eval_set.x, eval_set.y_true)
