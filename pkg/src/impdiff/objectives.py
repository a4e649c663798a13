"""Training losses and the combined generative + classification trainer."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np
import torch

from .classifier import (NoiseDraws, TimestepPlan, elbo_logits, estimate_prior_pl,
                         estimate_prior_su, noisy_label_frequencies, plan_subinterval,
                         solve_prior_nl)
from .data import (CANDIDATE, EXACT, NOISY, UNLABELED, Candidate, Dataset, Exact, MixtureSpec,
                   Noisy, Supervision, Unlabeled, conditioning_tokens)
from .net import DTYPE, Adam, ModelPair, ScoreNet, as_tensor
from .oracle import Oracle
from .schedules import DegenerateTimestepError, Schedule, alpha_sigma, edm_loss_weight


class NumericalError(RuntimeError):
    """Training produced a non-finite loss; ``record`` carries the diagnostic."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

def dsm_target(x0, x_t, schedule: Schedule, t):
    """Conditional score of the forward kernel: -(x_t - alpha_t x0) / sigma_t^2."""
    a, s = alpha_sigma(schedule, t)
    if s == 0:
        raise DegenerateTimestepError("sigma_t = 0 has no denoising target")
    return -(x_t - a * x0) / (s * s)


@dataclass
class GenDraws:
    sigma: np.ndarray   # (B,)
    eps: np.ndarray     # (B, d)

    @classmethod
    def draw(cls, schedule: Schedule, n: int, d: int, rng: np.random.Generator) -> "GenDraws":
        return cls(np.exp(rng.normal(schedule.P_mean, schedule.P_std, size=n)),
                   rng.standard_normal((n, d)))

    def noised(self, x0: torch.Tensor) -> torch.Tensor:
        return x0 + torch.as_tensor(self.sigma, dtype=DTYPE)[:, None] * torch.as_tensor(self.eps, dtype=DTYPE)


# ---------------------------------------------------------------------------
# posterior weights
# ---------------------------------------------------------------------------

def supervision_likelihood(kind, label, mask, num_classes: int, transition=None) -> np.ndarray:
    """Rows proportional to p(z | y) used to condition a base posterior on z."""
    kind, label, mask = np.asarray(kind), np.asarray(label), np.asarray(mask, dtype=bool)
    out = mask.astype(float)                     # candidate sets; unlabeled rows are all True
    ex = kind == EXACT
    out[ex] = np.eye(num_classes)[label[ex]]
    ny = kind == NOISY
    if ny.any():
        out[ny] = 1.0 if transition is None else np.asarray(transition)[:, label[ny]].T
    return out


def condition_posterior(base, kind, label, mask, transition=None):
    """Multiply a base posterior by p(z | y) and renormalise.

    Returns ``(weights, fallback)`` where ``fallback`` flags rows whose
    intersection was empty; those rows become uniform over the candidate set.
    """
    base = np.asarray(base, dtype=float)
    lik = supervision_likelihood(kind, label, mask, base.shape[1], transition)
    w = base * lik
    total = w.sum(axis=1, keepdims=True)
    fallback = total[:, 0] <= 0
    if fallback.any():
        m = np.asarray(mask, dtype=float)[fallback]
        w[fallback] = m
        total[fallback] = m.sum(axis=1, keepdims=True)
    return w / total, fallback


def posterior_weights(pair: ModelPair, x_t, sigma_t, z: Supervision, plan: TimestepPlan,
                      rng: np.random.Generator, prior=None, transition=None) -> np.ndarray:
    """p(y | x_t, z) for one sample from the teacher's diffusion classifier."""
    c = pair.teacher.num_classes
    kind, label, mask = _encode(z, c)
    w, _ = batch_posterior_weights(pair.teacher, np.atleast_2d(x_t), np.atleast_1d(sigma_t),
                                   kind[None], label[None], mask[None], plan, rng, prior, transition)
    return w[0]


def _encode(z: Supervision, c: int):
    mask = np.zeros(c, dtype=bool)
    if isinstance(z, Exact):
        mask[z.y] = True
        return np.int64(EXACT), np.int64(z.y), mask
    if isinstance(z, Noisy):
        mask[z.y] = True
        return np.int64(NOISY), np.int64(z.y), mask
    if isinstance(z, Unlabeled):
        mask[:] = True
        return np.int64(UNLABELED), np.int64(-1), mask
    if isinstance(z, Candidate):
        mask[list(z.s)] = True
        return np.int64(CANDIDATE), np.int64(-1), mask
    raise TypeError(f"unsupported supervision {z!r}")


@torch.no_grad()
def batch_posterior_weights(teacher, x_t, sigma_t, kind, label, mask, plan: TimestepPlan,
                            rng: np.random.Generator, prior=None, transition=None):
    c = mask.shape[1]
    prior = np.full(c, 1.0 / c) if prior is None else np.asarray(prior, dtype=float)
    need = kind != EXACT
    base = np.tile(prior, (len(kind), 1))
    if need.any():
        idx = np.flatnonzero(need)
        logits = elbo_logits(teacher, as_tensor(x_t)[idx], plan, rng, c,
                             sigma_in=as_tensor(sigma_t)[idx])
        base[idx] = torch.softmax(logits + torch.log(as_tensor(prior)), dim=1).numpy()
    return condition_posterior(base, kind, label, mask, transition)


# ---------------------------------------------------------------------------
# generative losses
# ---------------------------------------------------------------------------

def loss_vanilla(pair: ModelPair, x0, tokens, schedule: Schedule, draws: GenDraws) -> torch.Tensor:
    """EDM-weighted conditional DSM with one conditioning token per sample.

    lambda(sigma) ||D - x0||^2 equals lambda(sigma) sigma^4 ||s - target||^2.
    """
    x0 = as_tensor(x0)
    x_t = draws.noised(x0)
    sigma = torch.as_tensor(draws.sigma, dtype=DTYPE)
    D = pair.student.denoise(x_t, torch.as_tensor(tokens), sigma)
    lam = edm_loss_weight(sigma, schedule.sigma_data)
    return (lam * ((D - x0) ** 2).sum(1)).mean()


def loss_weighted_dsm(pair: ModelPair, x0, weights, schedule: Schedule, draws: GenDraws) -> torch.Tensor:
    """DSM on the posterior-weighted aggregate sum_y w_y s(x_t, y, sigma).

    ``weights`` (B, c) must already be detached; the gradient flows only
    through the student's per-class outputs.
    """
    x0 = as_tensor(x0)
    w = as_tensor(weights).detach()
    B, c = w.shape
    d = x0.shape[1]
    x_t = draws.noised(x0)
    sigma = torch.as_tensor(draws.sigma, dtype=DTYPE)
    xs = x_t.repeat_interleave(c, dim=0)
    ys = torch.arange(c).repeat(B)
    D = pair.student.denoise(xs, ys, sigma.repeat_interleave(c)).view(B, c, d)
    agg = (w[:, :, None] * D).sum(1)
    lam = edm_loss_weight(sigma, schedule.sigma_data)
    return (lam * ((agg - x0) ** 2).sum(1)).mean()


# ---------------------------------------------------------------------------
# classification losses
# ---------------------------------------------------------------------------

def soft_cross_entropy(logits: torch.Tensor, target) -> torch.Tensor:
    """Mean over rows of -sum_y target_y log softmax(logits)_y."""
    target = as_tensor(target).detach()
    logp = torch.log_softmax(logits, dim=-1)
    return -(target * torch.where(target != 0, logp, torch.zeros_like(logp))).sum(-1).mean()


def pl_target(f_teacher, mask) -> np.ndarray:
    """Teacher probabilities restricted to the candidate set and renormalised."""
    f = np.where(np.asarray(mask, dtype=bool), np.asarray(f_teacher, dtype=float), 0.0)
    total = f.sum(axis=1, keepdims=True)
    empty = total[:, 0] <= 0
    if empty.any():
        f[empty] = np.asarray(mask, dtype=float)[empty]
        total[empty] = f[empty].sum(axis=1, keepdims=True)
    return f / total


def su_target(f_teacher, kind, label) -> np.ndarray:
    f = np.array(f_teacher, dtype=float)
    ex = np.asarray(kind) == EXACT
    f[ex] = np.eye(f.shape[1])[np.asarray(label)[ex]]
    return f


def elr_target(f_student, f_teacher, y_noisy, lam: float = 1.0, clamp: float = 1e-6) -> np.ndarray:
    """r = onehot(y) - lam * f_s * (delta 1 - f_t) / (1 - delta), delta = <f_s, f_t>.

    Rows with delta >= 1 - clamp fall back to the one-hot label.
    """
    f_s = np.asarray(f_student, dtype=float)
    f_t = np.asarray(f_teacher, dtype=float)
    onehot = np.eye(f_s.shape[1])[np.asarray(y_noisy)]
    delta = np.sum(f_s * f_t, axis=1, keepdims=True)
    safe = delta < 1 - clamp
    corr = f_s * (delta - f_t) / np.where(safe, 1 - delta, 1.0)
    return np.where(safe, onehot - lam * corr, onehot)


def cls_logits(model, x, plan: TimestepPlan, draws: NoiseDraws, prior, sigma_in=None) -> torch.Tensor:
    c = len(prior)
    return elbo_logits(model, x, plan, None, c, sigma_in=sigma_in, draws=draws) + torch.log(as_tensor(prior))


def _student_teacher_logits(pair, x, plan, rng, prior, sigma_in):
    x = as_tensor(x)
    c = len(prior)
    draws = NoiseDraws.draw(plan, x.shape[0], x.shape[1], c, rng)
    s_in = None if sigma_in is None else as_tensor(np.broadcast_to(sigma_in, (x.shape[0],)))
    logit_s = cls_logits(pair.student, x, plan, draws, prior, s_in)
    with torch.no_grad():
        logit_t = cls_logits(pair.teacher, x, plan, draws, prior, s_in)
    return logit_s, torch.softmax(logit_t, dim=1).numpy()


def loss_cls_pl(pair: ModelPair, x, mask, plan: TimestepPlan, rng, prior, sigma_in=None):
    logit_s, f_t = _student_teacher_logits(pair, x, plan, rng, prior, sigma_in)
    return soft_cross_entropy(logit_s, pl_target(f_t, mask))


def loss_cls_su(pair: ModelPair, x, kind, label, plan: TimestepPlan, rng, prior, sigma_in=None):
    logit_s, f_t = _student_teacher_logits(pair, x, plan, rng, prior, sigma_in)
    return soft_cross_entropy(logit_s, su_target(f_t, kind, label))


def loss_cls_nl(pair: ModelPair, x, y_noisy, plan: TimestepPlan, rng, prior, sigma_in=None,
                lam: float = 1.0):
    logit_s, f_t = _student_teacher_logits(pair, x, plan, rng, prior, sigma_in)
    f_s = torch.softmax(logit_s, dim=1).detach().numpy()
    return soft_cross_entropy(logit_s, elr_target(f_s, f_t, y_noisy, lam))


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

EVAL_SIGMAS = tuple(np.geomspace(0.05, 2.0, 8))


def score_eval_set(spec: MixtureSpec, n_per: int = 256, sigmas=EVAL_SIGMAS, seed: int = 12345):
    """Fixed density-weighted evaluation points: rows (x, y, sigma) drawn from q_sigma(x | y)."""
    rng = np.random.default_rng(seed)
    xs, ys, ss = [], [], []
    for y in range(spec.num_classes):
        for s in sigmas:
            x0 = spec.sample_class(y, n_per, rng)
            xs.append(x0 + s * rng.standard_normal(x0.shape))
            ys.append(np.full(n_per, y))
            ss.append(np.full(n_per, s))
    x, y, s = np.concatenate(xs), np.concatenate(ys), np.concatenate(ss)
    target = Oracle(spec).score_fn()(x, y, s)
    return x, y, s, target


@torch.no_grad()
def score_grid_mse(net: ScoreNet, eval_set) -> float:
    """Mean of sigma^2 ||s_theta - s_oracle||^2 over the evaluation points."""
    x, y, s, target = eval_set
    pred = net.score(x, torch.as_tensor(y), s).numpy()
    return float(np.mean(s**2 * ((pred - target) ** 2).sum(1)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

METHODS = ("weighted", "vanilla")


@dataclass
class TrainConfig:
    method: str = "weighted"
    batch_size: int = 128
    iterations: int = 5000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.5
    cls_weight: float = 1.0
    elr_lambda: float = 1.0
    seed: int = 0
    width: int = 128
    depth: int = 3
    emb_dim: int = 32
    token_buckets: int = 16
    delta: float = 6.4
    posterior_draws: int = 8
    cls_draws: int = 4
    noisy_weighting: str = "transition"
    cls_input: str = "clean"
    prior_mode: str = "uniform"
    prior_momentum: float = 0.9
    log_every: int = 250
    eval_points: int = 256
    record_wall_time: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.batch_size < 1 or self.iterations < 0 or self.log_every < 1:
            raise ValueError("counts must be positive")
        if self.cls_weight < 0:
            raise ValueError("cls_weight must be >= 0")
        if self.noisy_weighting not in ("transition", "raw"):
            raise ValueError("noisy_weighting must be 'transition' or 'raw'")
        if self.cls_input not in ("clean", "noised"):
            raise ValueError("cls_input must be 'clean' or 'noised'")
        if self.prior_mode not in ("uniform", "estimate"):
            raise ValueError("prior_mode must be 'uniform' or 'estimate'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


LOG_COLUMNS = ("iter", "loss_gen", "loss_cls", "score_mse_vs_oracle", "cls_acc", "wall_ms")


@dataclass
class TrainResult:
    pair: ModelPair
    log: list = field(default_factory=list)
    prior: np.ndarray | None = None
    fallbacks: int = 0

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.log:
            w.writerow([_fmt(row.get(k)) for k in LOG_COLUMNS])
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def build_pair(dataset: Dataset, config: TrainConfig, schedule: Schedule) -> ModelPair:
    net = ScoreNet(dataset.dim, dataset.num_classes, width=config.width, depth=config.depth,
                   emb_dim=config.emb_dim, extra_tokens=1 + config.token_buckets,
                   sigma_data=schedule.sigma_data, seed=config.seed)
    return ModelPair(net, ema_decay=config.ema_decay, meta={"method": config.method})


def initial_prior(dataset: Dataset, config: TrainConfig, transition=None) -> np.ndarray:
    c = dataset.num_classes
    if config.prior_mode == "uniform":
        return np.full(c, 1.0 / c)
    mode = dataset.mode()
    if mode == "exact":
        return np.bincount(dataset.label, minlength=c) / len(dataset)
    if mode == "semi":
        return estimate_prior_su(dataset)
    if mode == "noisy":
        freq = noisy_label_frequencies(dataset)
        return freq if transition is None else solve_prior_nl(freq, transition)
    return np.full(c, 1.0 / c)   # partial: refined by the moving average during training


def train(dataset: Dataset, config: TrainConfig, schedule: Schedule | None = None,
          spec: MixtureSpec | None = None, transition=None, pair: ModelPair | None = None,
          eval_data: Dataset | None = None,
          weights_fn: Callable | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Minibatch training: generative loss + cls_weight * classification loss, Adam, EMA.

    ``method='vanilla'`` trains plain conditional DSM on one token per sample.
    ``method='weighted'`` uses the posterior-weighted DSM with teacher weights (or
    ``weights_fn(x_t, sigma, batch_index)`` when given) plus the mode-matched
    classification loss. ``spec`` enables the oracle score MSE column and
    ``eval_data`` (clean labels) the accuracy column.
    """
    schedule = schedule or Schedule()
    rng = np.random.default_rng(config.seed)
    pair = pair or build_pair(dataset, config, schedule)
    opt = Adam(pair.student.parameters(), config.lr, config.beta1, config.beta2, config.eps)
    plan_w = plan_subinterval(schedule, config.delta, draws=config.posterior_draws)
    plan_c = plan_w.with_draws(config.cls_draws)
    mode = dataset.mode()
    c = dataset.num_classes
    T = transition if config.noisy_weighting == "transition" else None
    prior = initial_prior(dataset, config, transition)
    tokens = conditioning_tokens(dataset, config.token_buckets)
    x_all = torch.as_tensor(dataset.x, dtype=DTYPE)

    score_eval = score_eval_set(spec, n_per=max(8, config.eval_points // 8)) if spec is not None else None
    acc_eval = eval_data.subset(np.arange(min(len(eval_data), config.eval_points))) if eval_data is not None else None
    eval_rng_seed = config.seed + 7919
    steps_per_epoch = max(1, len(dataset) // config.batch_size)

    result = TrainResult(pair, prior=prior)
    t0 = time.perf_counter()
    for it in range(1, config.iterations + 1):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        x0 = x_all[idx]
        draws = GenDraws.draw(schedule, len(idx), dataset.dim, rng)
        loss_cls = torch.zeros((), dtype=DTYPE)

        if config.method == "vanilla":
            loss_gen = loss_vanilla(pair, x0, tokens[idx], schedule, draws)
        else:
            x_t = draws.noised(x0)
            if weights_fn is not None:
                w = weights_fn(x_t.numpy(), draws.sigma, idx)
            else:
                w, fb = batch_posterior_weights(pair.teacher, x_t, draws.sigma, dataset.kind[idx],
                                                dataset.label[idx], dataset.mask[idx], plan_w, rng,
                                                prior, T)
                result.fallbacks += int(fb.sum())
            loss_gen = loss_weighted_dsm(pair, x0, w, schedule, draws)
            if config.cls_weight > 0 and mode != "exact":
                x_in, sig = (x0, None) if config.cls_input == "clean" else (x_t, draws.sigma)
                if mode == "partial":
                    loss_cls = loss_cls_pl(pair, x_in, dataset.mask[idx], plan_c, rng, prior, sig)
                elif mode == "semi":
                    loss_cls = loss_cls_su(pair, x_in, dataset.kind[idx], dataset.label[idx],
                                           plan_c, rng, prior, sig)
                else:
                    loss_cls = loss_cls_nl(pair, x_in, dataset.label[idx], plan_c, rng, prior, sig,
                                           config.elr_lambda)

        total = loss_gen + config.cls_weight * loss_cls
        if not torch.isfinite(total):
            raise NumericalError("non-finite loss", {"iter": it, "loss_gen": loss_gen.item(),
                                                     "loss_cls": loss_cls.item()})
        pair.student.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        pair.ema_update()

        if (config.prior_mode == "estimate" and mode == "partial" and config.method == "weighted"
                and it % steps_per_epoch == 0):
            prior = _refresh_pl_prior(pair, dataset, plan_c, prior, config.prior_momentum, rng)
            result.prior = prior

        if it % config.log_every == 0 or it == config.iterations:
            row = {"iter": it, "loss_gen": loss_gen.item(), "loss_cls": loss_cls.item()}
            if score_eval is not None:
                row["score_mse_vs_oracle"] = score_grid_mse(pair.teacher, score_eval)
            if acc_eval is not None:
                row["cls_acc"] = classifier_accuracy(pair.teacher, acc_eval, plan_subinterval(
                    schedule, config.delta), np.full(c, 1.0 / c), np.random.default_rng(eval_rng_seed))
            if config.record_wall_time:
                row["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            result.log.append(row)
            if progress is not None:
                progress(row)
    return result


def _refresh_pl_prior(pair, dataset, plan, prior, mu, rng):
    with torch.no_grad():
        logits = elbo_logits(pair.teacher, dataset.x, plan, rng, dataset.num_classes)
    r, _ = estimate_prior_pl(dataset, [logits.numpy()], mu=0.0)
    new = mu * np.asarray(prior) + (1 - mu) * r
    return new / new.sum()


def classifier_accuracy(model, data: Dataset, plan: TimestepPlan, prior, rng) -> float:
    from .classifier import classify
    post = classify(model, data.x, plan, prior, rng)
    return float(np.mean(post.argmax(1) == data.y_true))


def value_and_grad(pair: ModelPair, loss_fn: Callable[[], torch.Tensor]):
    """Evaluate ``loss_fn`` and return (loss, flat gradient w.r.t. student parameters)."""
    pair.student.zero_grad(set_to_none=True)
    loss = loss_fn()
    params = list(pair.student.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1)
                      for g, p in zip(grads, params)])
    return loss.item(), flat



# ---------------------------------------------------------------------------
# linear-feature minimiser of the weighted loss
# ---------------------------------------------------------------------------

def fit_linear_weighted_dsm(spec: MixtureSpec, supervision_model, dataset: Dataset, sigmas,
                            rng: np.random.Generator, draws_per_sigma: int = 200_000):
    """Exact minimiser of weighted DSM for s(x, y, sigma) = a_y + b_y x, fitted per sigma level.

    Weights are the oracle posteriors p(y | x_t, z). The loss is quadratic in
    (a_y, b_y), so the minimiser is a least-squares solve. Returns an array of
    shape (len(sigmas), c, 2) holding (a_y, b_y). One-dimensional data only.
    """
    if spec.dim != 1:
        raise ValueError("linear-feature fit expects one-dimensional data")
    orc = Oracle(spec)
    c = spec.num_classes
    lik = supervision_model.likelihood_matrix(dataset)
    out = np.empty((len(sigmas), c, 2))
    for k, s in enumerate(sigmas):
        idx = rng.integers(0, len(dataset), size=draws_per_sigma)
        eps = rng.standard_normal(draws_per_sigma)
        x0 = dataset.x[idx, 0]
        x_t = x0 + s * eps
        logd = orc.class_log_densities(x_t[:, None], s)
        with np.errstate(divide="ignore"):
            logits = logd + np.log(lik[idx] * spec.prior)
        w = np.exp(logits - logits.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        design = np.concatenate([w, w * x_t[:, None]], axis=1)       # (n, 2c)
        coef, *_ = np.linalg.lstsq(design, -eps / s, rcond=None)
        out[k, :, 0], out[k, :, 1] = coef[:c], coef[c:]
    return out


def linear_fit_grid_mse(spec: MixtureSpec, coefs, sigmas, grid) -> np.ndarray:
    """Per-class mean squared error of the linear scores against oracle scores on ``grid``."""
    orc = Oracle(spec)
    grid = np.asarray(grid, dtype=float)
    err = np.zeros(spec.num_classes)
    for k, s in enumerate(sigmas):
        for y in range(spec.num_classes):
            pred = coefs[k, y, 0] + coefs[k, y, 1] * grid
            true = orc.clean_conditional_score(grid[:, None], y, s)[:, 0]
            err[y] += np.mean((pred - true) ** 2)
    return err / len(sigmas)
