"""Self-checks shared by the command line and the test suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .classifier import NoiseDraws, plan_subinterval
from .data import (Candidate, Exact, MixtureSpec, Noisy, SupervisionModel, Unlabeled,
                   corrupt_noisy, corrupt_partial, corrupt_semi, default_spec,
                   partial_inclusion_matrix, sample_dataset, symmetric_transition)
from .net import ModelPair, ScoreNet
from .objectives import (GenDraws, batch_posterior_weights, cls_logits, elr_target, loss_cls_pl,
                         loss_cls_su, loss_vanilla, loss_weighted_dsm, soft_cross_entropy)
from .oracle import pooled_score_residuals
from .schedules import Schedule

POOLED_SCORE_TOL = 1e-8
GRADIENT_TOL = 1e-4


def pooled_score_check(spec: MixtureSpec | None = None, n: int = 1000, seed: int = 0,
                   schedule: Schedule | None = None):
    """Residuals of the pooled-score identity for noisy, partial and mixed supervision.

    Returns the per-triple relative residuals.
    """
    spec = spec or default_spec()
    c = spec.num_classes
    model = SupervisionModel(spec.prior, symmetric_transition(c, 0.4),
                             partial_inclusion_matrix(c, "random", 0.5))
    zs = [Exact(y) for y in range(c)] + [Noisy(y) for y in range(c)] + [Unlabeled()]
    zs += [Candidate(frozenset(s)) for s in _subsets(c)]
    return pooled_score_residuals(spec, schedule or Schedule(), model, n, np.random.default_rng(seed), zs)


def _subsets(c: int):
    for bits in range(1, 1 << c):
        yield [j for j in range(c) if bits >> j & 1]


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

@dataclass
class GradientRecord:
    loss: str
    input: int
    coord: int
    analytic: float
    numeric: float

    @property
    def rel_err(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if scale == 0 else abs(self.analytic - self.numeric) / scale


def finite_difference_check(net: ScoreNet, closure, rng: np.random.Generator, coords: int = 10,
                            h: float = 1e-5, min_grad: float = 1e-7):
    """Compare autograd against central differences on random parameter coordinates.

    Coordinates are drawn among those whose autograd derivative exceeds
    ``min_grad`` in magnitude, so the relative error is well defined.
    """
    params = list(net.parameters())
    net.zero_grad(set_to_none=True)
    loss = closure()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1)
                      for g, p in zip(grads, params)]).numpy()
    candidates = np.flatnonzero(np.abs(flat) > min_grad)
    pick = rng.choice(candidates, size=min(coords, len(candidates)), replace=False)
    base = net.flat()
    out = []
    with torch.no_grad():
        for k in pick:
            vals = []
            for sgn in (1.0, -1.0):
                v = base.clone()
                v[k] += sgn * h
                net.load_flat(v)
                vals.append(float(closure()))
            net.load_flat(base)
            out.append((int(k), float(flat[k]), (vals[0] - vals[1]) / (2 * h)))
    return out


def gradient_suite(seed: int = 0, inputs: int = 10, coords: int = 10, batch: int = 8,
                   width: int = 16) -> list[GradientRecord]:
    """Finite-difference checks of every training loss on a small network."""
    spec = default_spec()
    schedule = Schedule()
    c, d = spec.num_classes, spec.dim
    rng = np.random.default_rng(seed)
    clean = sample_dataset(spec, 64, rng)
    T = symmetric_transition(c, 0.4)
    noisy = corrupt_noisy(clean, T, rng)
    partial = corrupt_partial(clean, "random", 0.5, rng)
    semi = corrupt_semi(clean, 0.5, rng)
    plan = plan_subinterval(schedule, 6.4, draws=2)
    prior = np.full(c, 1.0 / c)
    records = []

    for i in range(inputs):
        student = ScoreNet(d, c, width=width, depth=2, emb_dim=4, n_freq=2, extra_tokens=3, seed=seed + i)
        # a non-zero output layer so every parameter has a gradient
        with torch.no_grad():
            student.layers[-1].weight.normal_(0, 0.3, generator=torch.Generator().manual_seed(i))
        pair = ModelPair(student, ema_decay=0.5)
        with torch.no_grad():
            pair.teacher.load_flat(pair.student.flat() + 0.01 * torch.randn(
                student.num_parameters(), dtype=torch.float64, generator=torch.Generator().manual_seed(100 + i)))
        idx = rng.choice(len(clean), size=batch, replace=False)
        x0 = clean.x[idx]
        draws = GenDraws.draw(schedule, batch, d, rng)
        tokens = noisy.label[idx]
        x_t = draws.noised(torch.as_tensor(x0))
        w, _ = batch_posterior_weights(pair.teacher, x_t, draws.sigma, noisy.kind[idx], noisy.label[idx],
                                       noisy.mask[idx], plan, rng, prior, T)
        cls_seed = int(rng.integers(1 << 31))

        def fresh():
            return np.random.default_rng(cls_seed)

        nd = NoiseDraws.draw(plan, batch, d, c, fresh())
        with torch.no_grad():
            f_s = torch.softmax(cls_logits(pair.student, x0, plan, nd, prior), 1).numpy()
            f_t = torch.softmax(cls_logits(pair.teacher, x0, plan, nd, prior), 1).numpy()
        r = elr_target(f_s, f_t, noisy.label[idx])

        closures = {
            "vanilla_dsm": lambda: loss_vanilla(pair, x0, tokens, schedule, draws),
            "weighted_dsm": lambda: loss_weighted_dsm(pair, x0, w, schedule, draws),
            "cls_partial": lambda: loss_cls_pl(pair, x0, partial.mask[idx], plan, fresh(), prior),
            "cls_semi": lambda: loss_cls_su(pair, x0, semi.kind[idx], semi.label[idx], plan, fresh(), prior),
            "cls_noisy": lambda: soft_cross_entropy(cls_logits(pair.student, x0, plan, nd, prior), r),
        }
        for name, fn in closures.items():
            for k, a, num in finite_difference_check(pair.student, fn, rng, coords):
                records.append(GradientRecord(name, i, k, a, num))
    return records
