"""Noise schedules, training-time distributions, loss weights and
prediction-kind conversions.

Every schedule is described by the pair ``(alpha_t, sigma_t)`` of the
forward kernel ``q(x_t | x_0) = N(alpha_t x_0, sigma_t^2 I)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np


class ScheduleError(ValueError):
    """Timestep outside the support, or an operation the schedule cannot serve."""


class DegenerateTimestepError(ScheduleError):
    """sigma_t == 0 where a division by sigma_t is required."""


class PredictionKind(str, Enum):
    SCORE = "score"
    X0 = "x0"
    EPSILON = "epsilon"
    V = "v"


EDM_DEFAULTS = {"sigma_min": 0.002, "sigma_max": 80.0, "P_mean": -1.2, "P_std": 1.2}
KINDS = ("EDM", "DDPM-discrete", "VE", "VP")


@dataclass(frozen=True)
class Schedule:
    kind: str = "EDM"
    params: dict[str, Any] = field(default_factory=lambda: dict(EDM_DEFAULTS))
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if not self.sigma_data > 0:
            raise ScheduleError("sigma_data must be positive")
        if self.kind == "EDM":
            merged = dict(EDM_DEFAULTS)
            merged.update(self.params)
            object.__setattr__(self, "params", merged)
            if not 0 < merged["sigma_min"] < merged["sigma_max"]:
                raise ScheduleError("need 0 < sigma_min < sigma_max")
            if not merged["P_std"] > 0:
                raise ScheduleError("P_std must be positive")
        elif self.kind == "DDPM-discrete":
            betas = np.asarray(self.params.get("betas", []), dtype=float)
            if betas.ndim != 1 or betas.size == 0:
                raise ScheduleError("DDPM-discrete needs a non-empty 'betas' list")
            # a zero beta is a constant-SNR step; the first must be positive so sigma_1 > 0
            if np.any(betas < 0) or np.any(betas >= 1) or betas[0] <= 0:
                raise ScheduleError("betas must lie in [0, 1) with betas[0] > 0")
        elif self.kind == "VE":
            lo, hi = self.params.get("sigma_min", 0.01), self.params.get("sigma_max", 50.0)
            if not 0 < lo < hi:
                raise ScheduleError("VE needs 0 < sigma_min < sigma_max")
        elif self.kind == "VP":
            lo, hi = self.params.get("beta_min", 0.1), self.params.get("beta_max", 20.0)
            if not 0 < lo <= hi:
                raise ScheduleError("VP needs 0 < beta_min <= beta_max")

    # -- convenience -------------------------------------------------------
    @property
    def P_mean(self) -> float:
        return float(self.params.get("P_mean", EDM_DEFAULTS["P_mean"]))

    @property
    def P_std(self) -> float:
        return float(self.params.get("P_std", EDM_DEFAULTS["P_std"]))

    @property
    def sigma_min(self) -> float:
        return float(self.params.get("sigma_min", EDM_DEFAULTS["sigma_min"]))

    @property
    def sigma_max(self) -> float:
        return float(self.params.get("sigma_max", EDM_DEFAULTS["sigma_max"]))

    @property
    def num_steps(self) -> int:
        if self.kind != "DDPM-discrete":
            raise ScheduleError("num_steps is defined for DDPM-discrete only")
        return len(self.params["betas"])

    def to_dict(self) -> dict:
        params = {k: (list(v) if isinstance(v, (list, tuple, np.ndarray)) else v)
                  for k, v in self.params.items()}
        return {"kind": self.kind, "params": params, "sigma_data": self.sigma_data}

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        unknown = set(d) - {"kind", "params", "sigma_data"}
        if unknown:
            raise ScheduleError(f"unknown schedule keys {sorted(unknown)}")
        return cls(kind=d.get("kind", "EDM"), params=dict(d.get("params", {})),
                   sigma_data=float(d.get("sigma_data", 0.5)))

    @classmethod
    def ddpm_linear(cls, T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> "Schedule":
        return cls("DDPM-discrete", {"betas": np.linspace(beta_1, beta_T, T).tolist()})


def _cumprod_alpha_bar(betas) -> np.ndarray:
    # index 0 is the clean level (empty product)
    return np.concatenate([[1.0], np.cumprod(1.0 - np.asarray(betas, dtype=float))])


def alpha_sigma(schedule: Schedule, t) -> tuple[float, float]:
    """Return ``(alpha_t, sigma_t)`` for a scalar timestep ``t``."""
    kind = schedule.kind
    if kind == "EDM":
        t = float(t)
        if not (t >= 0 and math.isfinite(t)):
            raise ScheduleError(f"EDM timestep must be finite and >= 0, got {t}")
        return 1.0, t
    if kind == "DDPM-discrete":
        T = schedule.num_steps
        if int(t) != t or not 0 <= t <= T:
            raise ScheduleError(f"DDPM-discrete timestep must be an integer in [0, {T}], got {t}")
        abar = _cumprod_alpha_bar(schedule.params["betas"])[int(t)]
        return math.sqrt(abar), math.sqrt(1.0 - abar)
    t = float(t)
    if not 0 <= t <= 1:
        raise ScheduleError(f"{kind} timestep must lie in [0, 1], got {t}")
    if kind == "VE":
        lo = float(schedule.params.get("sigma_min", 0.01))
        hi = float(schedule.params.get("sigma_max", 50.0))
        sig_t = lo * (hi / lo) ** t
        return 1.0, math.sqrt(max(sig_t**2 - lo**2, 0.0))
    # VP: beta(t) linear in t
    lo = float(schedule.params.get("beta_min", 0.1))
    hi = float(schedule.params.get("beta_max", 20.0))
    integral = lo * t + 0.5 * (hi - lo) * t * t
    return math.exp(-0.5 * integral), math.sqrt(-math.expm1(-integral))


def snr(schedule: Schedule, t) -> float:
    a, s = alpha_sigma(schedule, t)
    if s == 0:
        return math.inf
    return a * a / (s * s)


def support_grid(schedule: Schedule, n: int = 1000) -> np.ndarray:
    """``n`` timesteps spanning the schedule's support, excluding the clean level."""
    if schedule.kind == "EDM":
        return np.geomspace(schedule.sigma_min, schedule.sigma_max, n)
    if schedule.kind == "DDPM-discrete":
        return np.arange(1, schedule.num_steps + 1)
    return np.linspace(1.0 / n, 1.0, n)


def edm_loss_weight(sigma, sigma_data: float):
    """Continuous EDM training weight (sigma^2 + sigma_data^2) / (sigma sigma_data)^2."""
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def ancestral_weight(schedule: Schedule, t: int) -> float:
    """Discrete ELBO weight w_t of the score-matching term at step ``t``."""
    if schedule.kind != "DDPM-discrete":
        raise ScheduleError("ancestral_weight is defined for discrete schedules only; "
                            "use edm_loss_weight on the continuous path")
    if int(t) != t or t < 1:
        raise ScheduleError(f"integer t >= 1 required, got {t}")
    a_t, s_t = alpha_sigma(schedule, t)
    a_p, s_p = alpha_sigma(schedule, t - 1)
    if s_p == 0:
        raise ScheduleError("w_t is undefined at t = 1 (sigma_0 = 0)")
    return 0.5 * s_t**2 * (s_t**2 * a_p**2 / (s_p**2 * a_t**2) - 1.0)


def posterior_variance(schedule: Schedule, t: int) -> float:
    """sigma_q^2(t): variance of q(x_{t-1} | x_t, x_0)."""
    a_t, s_t = alpha_sigma(schedule, t)
    a_p, s_p = alpha_sigma(schedule, t - 1)
    return (s_t**2 - (a_t / a_p) ** 2 * s_p**2) * s_p**2 / s_t**2


def sample_train_timestep(schedule: Schedule, rng: np.random.Generator, size=None):
    """Draw training timesteps: log-normal sigma for EDM, uniform {1..T} for DDPM."""
    if schedule.kind == "EDM":
        return np.exp(rng.normal(schedule.P_mean, schedule.P_std, size=size))
    if schedule.kind == "DDPM-discrete":
        return rng.integers(1, schedule.num_steps + 1, size=size)
    raise ScheduleError(f"no training-time distribution for {schedule.kind}")


def convert_prediction(x_t, t, value, src, dst, schedule: Schedule):
    """Convert a network output between score / x0 / epsilon / v parameterizations."""
    src, dst = PredictionKind(src), PredictionKind(dst)
    x_t = np.asarray(x_t, dtype=float)
    value = np.asarray(value, dtype=float)
    if src == dst:
        return value.copy()
    a, s = alpha_sigma(schedule, t)
    if s == 0 and (src == PredictionKind.SCORE or dst != PredictionKind.X0):
        raise DegenerateTimestepError("conversion needs sigma_t > 0")

    # recover (x0, eps) with x_t = a x0 + s eps; epsilon is the hub so score <-> epsilon
    # never rounds through x0
    if src == PredictionKind.SCORE:
        eps = -s * value
        x0 = (x_t - s * eps) / a
    elif src == PredictionKind.X0:
        x0 = value
        eps = (x_t - a * x0) / s
    elif src == PredictionKind.EPSILON:
        eps = value
        x0 = (x_t - s * eps) / a
    else:
        norm = a * a + s * s
        x0 = (a * x_t - s * value) / norm
        eps = (s * x_t + a * value) / norm

    if dst == PredictionKind.X0:
        return x0
    if dst == PredictionKind.SCORE:
        return -eps / s
    if dst == PredictionKind.EPSILON:
        return eps
    return a * eps - s * x0
