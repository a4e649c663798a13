"""Conditioned score network, Adam, EMA teacher and checkpoints.

Reverse-mode differentiation is delegated to torch autograd; everything runs
in float64 on the CPU.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"IMPDIFF-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def precondition(sigma: torch.Tensor, sigma_data: float):
    """EDM preconditioning coefficients (c_skip, c_out, c_in, c_noise)."""
    s2 = sigma**2 + sigma_data**2
    c_skip = sigma_data**2 / s2
    c_out = sigma * sigma_data / torch.sqrt(s2)
    c_in = 1.0 / torch.sqrt(s2)
    c_noise = torch.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


class ScoreNet(nn.Module):
    """MLP denoiser D(x) = c_skip x + c_out F(c_in x, c_noise, emb(token)).

    Tokens ``0..c-1`` are classes. The table carries ``extra_tokens`` further
    rows for the null token and hashed candidate sets used by the plain
    baseline.
    """

    def __init__(self, dim: int, num_classes: int, width: int = 128, depth: int = 3,
                 emb_dim: int = 32, n_freq: int = 8, extra_tokens: int = 17,
                 sigma_data: float = 0.5, seed: int = 0):
        super().__init__()
        if not 2 <= depth <= 4:
            raise ValueError("depth must be between 2 and 4 hidden layers")
        self.dim, self.num_classes = dim, num_classes
        self.width, self.depth, self.emb_dim, self.n_freq = width, depth, emb_dim, n_freq
        self.extra_tokens, self.sigma_data = extra_tokens, float(sigma_data)
        self.register_buffer("freqs", torch.as_tensor(np.geomspace(0.25, 8.0, n_freq), dtype=DTYPE))
        self.embed = nn.Parameter(torch.empty(num_classes + extra_tokens, emb_dim, dtype=DTYPE))
        sizes = [dim + 1 + 2 * n_freq + emb_dim] + [width] * depth + [dim]
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(sizes[:-1], sizes[1:]))
        self.reset_parameters(seed)

    @property
    def widths(self) -> list[int]:
        return [self.width] * self.depth

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            self.embed.normal_(0.0, 1.0, generator=g)
            for layer in self.layers[:-1]:
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=g)
                layer.bias.uniform_(-bound, bound, generator=g)
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()

    def noise_features(self, c_noise: torch.Tensor) -> torch.Tensor:
        ang = 2 * math.pi * c_noise[:, None] * self.freqs[None, :]
        return torch.cat([c_noise[:, None], torch.sin(ang), torch.cos(ang)], dim=1)

    def denoise(self, x, tokens, sigma) -> torch.Tensor:
        x, sigma = as_tensor(x), as_tensor(sigma)
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if sigma.ndim == 0:
            sigma = sigma.expand(x.shape[0])
        if torch.any(sigma <= 0):
            raise ValueError("sigma must be positive")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.embed.shape[0]):
            raise IndexError("conditioning token out of range")
        c_skip, c_out, c_in, c_noise = precondition(sigma, self.sigma_data)
        h = torch.cat([c_in[:, None] * x, self.noise_features(c_noise), self.embed[tokens]], dim=1)
        for layer in self.layers[:-1]:
            h = torch.nn.functional.silu(layer(h))
        return c_skip[:, None] * x + c_out[:, None] * self.layers[-1](h)

    def score(self, x, y, sigma) -> torch.Tensor:
        """s(x, y, sigma) = (D(x) - x) / sigma^2."""
        x, sigma = as_tensor(x), as_tensor(sigma)
        if sigma.ndim == 0:
            sigma = sigma.expand(x.shape[0])
        return (self.denoise(x, y, sigma) - x) / sigma[:, None] ** 2

    def check_class(self, y) -> None:
        y = torch.as_tensor(y)
        if y.numel() and (y.min() < 0 or y.max() >= self.num_classes):
            raise IndexError(f"class index outside [0, {self.num_classes})")

    def flat(self) -> torch.Tensor:
        return torch.nn.utils.parameters_to_vector(self.parameters()).detach().clone()

    def load_flat(self, vec) -> None:
        with torch.no_grad():
            torch.nn.utils.vector_to_parameters(as_tensor(vec), self.parameters())

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def config(self) -> dict:
        return {"d": self.dim, "c": self.num_classes, "widths": self.widths,
                "sigma_data": self.sigma_data, "emb_dim": self.emb_dim,
                "n_freq": self.n_freq, "extra_tokens": self.extra_tokens}

    def clone(self) -> "ScoreNet":
        other = ScoreNet(self.dim, self.num_classes, self.width, self.depth, self.emb_dim,
                         self.n_freq, self.extra_tokens, self.sigma_data)
        other.load_flat(self.flat())
        return other


def forward_score(net: ScoreNet, x_t, y, sigma) -> torch.Tensor:
    net.check_class(y)
    return net.score(x_t, y, sigma)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment updates with bias correction over a module's parameters."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if not (lr > 0 and 0 <= beta1 < 1 and 0 <= beta2 < 1 and eps > 0):
            raise ValueError("invalid Adam hyperparameters")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.t = 0

    @torch.no_grad()
    def step(self, grads=None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1, corr2 = 1 - b1**self.t, 1 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(self.lr * (m / corr1) / (torch.sqrt(v / corr2) + self.eps))


def split_flat(net: nn.Module, grad) -> list[torch.Tensor]:
    grad = as_tensor(grad)
    params = list(net.parameters())
    if grad.numel() != sum(p.numel() for p in params):
        raise ValueError("gradient size does not match parameters")
    out, i = [], 0
    for p in params:
        out.append(grad[i:i + p.numel()].view_as(p))
        i += p.numel()
    return out


def adam_step(net: nn.Module, grad, opt: Adam) -> nn.Module:
    """Apply one Adam update with a flat gradient vector; returns ``net``."""
    opt.step(split_flat(net, grad))
    return net


@dataclass
class ModelPair:
    student: ScoreNet
    teacher: ScoreNet = None
    ema_decay: float = 0.5
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.teacher is None:
            self.teacher = self.student.clone()
        for p in self.teacher.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def ema_update(self) -> "ModelPair":
        sp, tp = list(self.student.parameters()), list(self.teacher.parameters())
        if len(sp) != len(tp) or any(a.shape != b.shape for a, b in zip(sp, tp)):
            raise ValueError("student and teacher shapes differ")
        for s, t in zip(sp, tp):
            t.mul_(self.ema_decay).add_(s, alpha=1 - self.ema_decay)
        return self


def ema_update(pair: ModelPair) -> ModelPair:
    return pair.ema_update()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(pair: ModelPair) -> bytes:
    net = pair.student
    header = dict(format_version=FORMAT_VERSION, **net.config(),
                  depth=net.depth, ema_decay=pair.ema_decay,
                  n_params=net.num_parameters(), models=["student", "teacher"], meta=pair.meta)
    body = np.concatenate([pair.student.flat().numpy(), pair.teacher.flat().numpy()])
    head = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + body.astype("<f8").tobytes()


def save_checkpoint(pair: ModelPair, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(pair))


def load_checkpoint(path_or_bytes) -> ModelPair:
    raw = path_or_bytes if isinstance(path_or_bytes, bytes) else Path(path_or_bytes).read_bytes()
    buf = io.BytesIO(raw)
    if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    (hlen,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(hlen))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {header.get('format_version')!r}")
    widths = header["widths"]
    net = ScoreNet(header["d"], header["c"], width=widths[0], depth=len(widths),
                   emb_dim=header["emb_dim"], n_freq=header["n_freq"],
                   extra_tokens=header["extra_tokens"], sigma_data=header["sigma_data"])
    n = header["n_params"]
    body = np.frombuffer(buf.read(), dtype="<f8")
    if body.size != 2 * n:
        raise CheckpointError("parameter payload has the wrong length")
    net.load_flat(body[:n].copy())
    teacher = net.clone()
    teacher.load_flat(body[n:].copy())
    return ModelPair(net, teacher, header["ema_decay"], header.get("meta", {}))
