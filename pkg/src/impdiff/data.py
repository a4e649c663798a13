"""Synthetic Gaussian-mixture datasets and imprecise-label corruption."""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np


class SpecError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------

@dataclass
class MixtureSpec:
    """Per-class Gaussian mixtures plus the class prior.

    ``weights[y]`` is a length-K_y simplex, ``means[y]`` a ``(K_y, d)`` array
    and ``covs[y]`` a ``(K_y, d, d)`` stack of SPD matrices.
    """

    weights: list
    means: list
    covs: list
    prior: np.ndarray

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float).reshape(-1) for w in self.weights]
        self.means = [np.atleast_2d(np.asarray(m, dtype=float)) for m in self.means]
        d = self.means[0].shape[1]
        covs = []
        for y, cov in enumerate(self.covs):
            cov = np.asarray(cov, dtype=float).reshape(-1, d, d)
            covs.append(cov)
        self.covs = covs
        self.prior = np.asarray(self.prior, dtype=float)
        c = len(self.weights)
        if c < 1 or not (len(self.means) == len(self.covs) == c == self.prior.size):
            raise SpecError("weights, means, covs and prior must all have one entry per class")
        if abs(self.prior.sum() - 1) > 1e-12 or np.any(self.prior < 0):
            raise SpecError("prior must be a simplex")
        for y in range(c):
            w, m, S = self.weights[y], self.means[y], self.covs[y]
            if not (w.size == m.shape[0] == S.shape[0]):
                raise SpecError(f"class {y}: component counts disagree")
            if abs(w.sum() - 1) > 1e-12 or np.any(w < 0):
                raise SpecError(f"class {y}: component weights must be a simplex")
            if m.shape[1] != d:
                raise SpecError("all means must share one dimension")
            for k in range(S.shape[0]):
                if not np.allclose(S[k], S[k].T):
                    raise SpecError(f"class {y} component {k}: covariance not symmetric")
                try:
                    np.linalg.cholesky(S[k])
                except np.linalg.LinAlgError as exc:
                    raise SpecError(f"class {y} component {k}: covariance not SPD") from exc

    @property
    def num_classes(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means[0].shape[1]

    def class_mean(self, y: int) -> np.ndarray:
        return self.weights[y] @ self.means[y]

    def class_cov(self, y: int) -> np.ndarray:
        mu = self.class_mean(y)
        w, m, S = self.weights[y], self.means[y], self.covs[y]
        diff = m - mu
        return np.einsum("k,kij->ij", w, S) + np.einsum("k,ki,kj->ij", w, diff, diff)

    def sample_class(self, y: int, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.weights[y].size, size=n, p=self.weights[y])
        z = rng.standard_normal((n, self.dim))
        chol = np.linalg.cholesky(self.covs[y])
        return self.means[y][comp] + np.einsum("nij,nj->ni", chol[comp], z)

    def to_dict(self) -> dict:
        return {
            "weights": [w.tolist() for w in self.weights],
            "means": [m.tolist() for m in self.means],
            "covs": [S.tolist() for S in self.covs],
            "prior": self.prior.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        unknown = set(d) - {"weights", "means", "covs", "prior"}
        if unknown:
            raise SpecError(f"unknown spec keys {sorted(unknown)}")
        return cls(d["weights"], d["means"], d["covs"], d["prior"])


def default_spec() -> MixtureSpec:
    """Two classes in 2D, each a pair of elongated blobs; Bayes accuracy ~0.98."""
    cov = np.diag([0.30**2, 0.25**2])
    return MixtureSpec(
        weights=[[0.5, 0.5], [0.5, 0.5]],
        means=[[[-0.6, -0.6], [-0.6, 0.6]], [[0.6, -0.6], [0.6, 0.6]]],
        covs=[[cov, cov], [cov, cov]],
        prior=[0.5, 0.5],
    )


def gaussian_spec_1d(means=(-2.0, 2.0), variances=(1.0, 1.0), prior=(0.5, 0.5)) -> MixtureSpec:
    return MixtureSpec(
        weights=[[1.0] for _ in means],
        means=[[[m]] for m in means],
        covs=[[[[v]]] for v in variances],
        prior=list(prior),
    )


# ---------------------------------------------------------------------------
# supervision
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Exact:
    y: int


@dataclass(frozen=True)
class Candidate:
    s: frozenset

    def __post_init__(self):
        if not self.s:
            raise ValueError("candidate set must be non-empty")


@dataclass(frozen=True)
class Unlabeled:
    pass


@dataclass(frozen=True)
class Noisy:
    y: int


Supervision = Union[Exact, Candidate, Unlabeled, Noisy]

EXACT, CANDIDATE, UNLABELED, NOISY = 0, 1, 2, 3
KIND_NAMES = ("exact", "candidate", "unlabeled", "noisy")


@dataclass
class Dataset:
    """Points, held-out true labels and per-sample supervision.

    Supervision is stored column-wise: ``kind`` holds one of the module-level
    codes, ``label`` the class for Exact/Noisy (-1 otherwise) and ``mask`` the
    candidate set as a boolean row (all True for Unlabeled).
    """

    x: np.ndarray
    y_true: np.ndarray
    num_classes: int
    kind: np.ndarray = None
    label: np.ndarray = None
    mask: np.ndarray = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.y_true = np.asarray(self.y_true, dtype=np.int64)
        n, c = len(self.y_true), self.num_classes
        if self.kind is None:
            self.kind = np.full(n, EXACT, dtype=np.int64)
            self.label = self.y_true.copy()
            self.mask = np.eye(c, dtype=bool)[self.y_true]
        self.kind = np.asarray(self.kind, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)

    def __len__(self) -> int:
        return len(self.y_true)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def supervision(self, i: int) -> Supervision:
        k = self.kind[i]
        if k == EXACT:
            return Exact(int(self.label[i]))
        if k == NOISY:
            return Noisy(int(self.label[i]))
        if k == UNLABELED:
            return Unlabeled()
        return Candidate(frozenset(np.flatnonzero(self.mask[i]).tolist()))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y_true[idx], self.num_classes,
                       self.kind[idx], self.label[idx], self.mask[idx])

    def with_supervision(self, kind, label, mask) -> "Dataset":
        return Dataset(self.x.copy(), self.y_true.copy(), self.num_classes, kind, label, mask)

    def mode(self) -> str:
        kinds = set(np.unique(self.kind).tolist())
        if kinds <= {EXACT}:
            return "exact"
        if kinds <= {EXACT, UNLABELED}:
            return "semi"
        if kinds <= {CANDIDATE}:
            return "partial"
        if kinds <= {NOISY}:
            return "noisy"
        raise ValueError(f"mixed supervision kinds {sorted(kinds)}")


def sample_dataset(spec: MixtureSpec, n: int, rng: np.random.Generator) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    y = rng.choice(spec.num_classes, size=n, p=spec.prior)
    x = np.empty((n, spec.dim))
    for cls in range(spec.num_classes):
        idx = np.flatnonzero(y == cls)
        if idx.size:
            x[idx] = spec.sample_class(cls, idx.size, rng)
    return Dataset(x, y, spec.num_classes)


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------

def symmetric_transition(c: int, eps: float) -> np.ndarray:
    if c < 2:
        return np.ones((1, 1))
    T = np.full((c, c), eps / (c - 1))
    np.fill_diagonal(T, 1.0 - eps)
    return T


def pair_transition(c: int, eps: float, mapping: dict | None = None) -> np.ndarray:
    """Asymmetric flips: class i goes to ``mapping[i]`` with probability eps.

    Unmapped classes are never flipped. The default maps every class to its
    cyclic successor.
    """
    if mapping is None:
        mapping = {i: (i + 1) % c for i in range(c)}
    T = np.eye(c)
    for src, dst in mapping.items():
        src, dst = int(src), int(dst)
        if src == dst:
            continue
        T[src, src] = 1.0 - eps
        T[src, dst] = eps
    return T


def check_transition(T) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValueError("transition matrix must be square")
    if np.any(T < 0) or np.any(T > 1) or np.max(np.abs(T.sum(axis=1) - 1)) > 1e-12:
        raise ValueError("transition matrix must be row-stochastic")
    return T


def corrupt_noisy(data: Dataset, T, rng: np.random.Generator) -> Dataset:
    T = check_transition(T)
    c = data.num_classes
    u = rng.random(len(data))
    cdf = np.cumsum(T[data.y_true], axis=1)
    noisy = np.minimum((u[:, None] >= cdf).sum(axis=1), c - 1)
    mask = np.eye(c, dtype=bool)[noisy]
    return data.with_supervision(np.full(len(data), NOISY), noisy, mask)


def class_dependent_partial_matrix(c: int, q: float) -> np.ndarray:
    """Circulant inclusion probabilities: entry (i, j) is P(j in S | Y = i).

    Wrong labels at cyclic offset k = 1, 2, 3, ... receive q+0.2, q, q-0.2,
    repeating; the diagonal is 1.
    """
    if c < 4:
        raise ValueError("class-dependent partial labels need c >= 4")
    if q - 0.2 < 0 or q + 0.2 > 1:
        raise ValueError(f"q={q} puts q +/- 0.2 outside [0, 1]")
    pattern = (q + 0.2, q, q - 0.2)
    Q = np.empty((c, c))
    for i in range(c):
        for j in range(c):
            Q[i, j] = 1.0 if i == j else pattern[((j - i) % c - 1) % 3]
    return Q


def partial_inclusion_matrix(c: int, mode: str, q: float) -> np.ndarray:
    if mode == "random":
        if not 0 <= q <= 1:
            raise ValueError("q must lie in [0, 1]")
        Q = np.full((c, c), float(q))
        np.fill_diagonal(Q, 1.0)
        return Q
    if mode == "class_dependent":
        return class_dependent_partial_matrix(c, q)
    raise ValueError(f"unknown partial-label mode {mode!r}")


def corrupt_partial(data: Dataset, mode: str, q: float, rng: np.random.Generator) -> Dataset:
    Q = partial_inclusion_matrix(data.num_classes, mode, q)
    mask = rng.random((len(data), data.num_classes)) < Q[data.y_true]
    mask[np.arange(len(data)), data.y_true] = True
    return data.with_supervision(np.full(len(data), CANDIDATE), np.full(len(data), -1), mask)


def corrupt_semi(data: Dataset, labeled_fraction: float, rng: np.random.Generator) -> Dataset:
    if not 0 < labeled_fraction <= 1:
        raise ValueError("labeled_fraction must lie in (0, 1]")
    c, n = data.num_classes, len(data)
    kind = np.full(n, UNLABELED)
    for cls in range(c):
        idx = np.flatnonzero(data.y_true == cls)
        if idx.size == 0:
            continue
        # half-up rounding, at least one labeled sample per present class
        k = max(1, int(np.floor(labeled_fraction * idx.size + 0.5)))
        kind[rng.permutation(idx)[:k]] = EXACT
    label = np.where(kind == EXACT, data.y_true, -1)
    mask = np.ones((n, c), dtype=bool)
    mask[kind == EXACT] = np.eye(c, dtype=bool)[data.y_true[kind == EXACT]]
    return data.with_supervision(kind, label, mask)


# ---------------------------------------------------------------------------
# p(z | y) under the class-conditional generation model
# ---------------------------------------------------------------------------

@dataclass
class SupervisionModel:
    """Likelihood of an observed supervision given the true class.

    Together with the class prior this yields p(y | z); the imprecise label is
    assumed independent of x given y.
    """

    prior: np.ndarray
    transition: np.ndarray | None = None
    inclusion: np.ndarray | None = None

    @property
    def num_classes(self) -> int:
        return len(self.prior)

    def likelihood(self, z: Supervision) -> np.ndarray:
        c = self.num_classes
        if isinstance(z, Exact):
            return np.eye(c)[z.y]
        if isinstance(z, Unlabeled):
            return np.ones(c)
        if isinstance(z, Noisy):
            if self.transition is None:
                return np.eye(c)[z.y]
            return np.asarray(self.transition)[:, z.y]
        if isinstance(z, Candidate):
            member = np.zeros(c, dtype=bool)
            member[list(z.s)] = True
            if self.inclusion is None:
                return member.astype(float)
            Q = np.asarray(self.inclusion)
            lik = np.where(member[None, :], Q, 1.0 - Q).prod(axis=1)
            # P(y in S | y) = 1, so drop the diagonal factor
            return np.where(member, lik / np.diag(Q), 0.0)
        raise TypeError(f"unsupported supervision {z!r}")

    def p_y_given_z(self, z: Supervision) -> np.ndarray:
        p = self.prior * self.likelihood(z)
        total = p.sum()
        if not total > 0:
            raise ValueError(f"supervision {z!r} has zero probability under the model")
        return p / total

    def likelihood_matrix(self, data: Dataset) -> np.ndarray:
        """Row i holds p(z_i | y) for every class y (vectorised ``likelihood``)."""
        c = data.num_classes
        out = np.ones((len(data), c))
        ex = data.kind == EXACT
        out[ex] = np.eye(c)[data.label[ex]]
        ny = data.kind == NOISY
        if ny.any():
            out[ny] = (np.eye(c)[data.label[ny]] if self.transition is None
                       else np.asarray(self.transition)[:, data.label[ny]].T)
        cd = data.kind == CANDIDATE
        if cd.any():
            m = data.mask[cd]
            if self.inclusion is None:
                out[cd] = m.astype(float)
            else:
                Q = np.asarray(self.inclusion)
                lik = np.where(m[:, None, :], Q[None], 1.0 - Q[None]).prod(axis=2)
                out[cd] = np.where(m, lik / np.diag(Q)[None], 0.0)
        return out


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------

def _payload(data: Dataset, i: int) -> str:
    k = data.kind[i]
    if k in (EXACT, NOISY):
        return str(int(data.label[i]))
    if k == UNLABELED:
        return ""
    return "|".join(str(j) for j in np.flatnonzero(data.mask[i]))


def dataset_to_csv(data: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{j}" for j in range(data.dim)] + ["y_true", "z_kind", "z_payload"])
    for i in range(len(data)):
        w.writerow([repr(float(v)) for v in data.x[i]]
                   + [int(data.y_true[i]), KIND_NAMES[data.kind[i]], _payload(data, i)])
    return buf.getvalue()


def save_dataset(data: Dataset, path) -> None:
    Path(path).write_text(dataset_to_csv(data))


def load_dataset(path, num_classes: int) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, rows = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("x"))
    if header != [f"x{j}" for j in range(d)] + ["y_true", "z_kind", "z_payload"]:
        raise ValueError(f"unexpected dataset header {header}")
    n, c = len(rows), num_classes
    x = np.empty((n, d))
    y = np.empty(n, dtype=np.int64)
    kind = np.empty(n, dtype=np.int64)
    label = np.full(n, -1, dtype=np.int64)
    mask = np.zeros((n, c), dtype=bool)
    for i, row in enumerate(rows):
        x[i] = [float(v) for v in row[:d]]
        y[i] = int(row[d])
        kind[i] = KIND_NAMES.index(row[d + 1])
        payload = row[d + 2]
        if kind[i] in (EXACT, NOISY):
            label[i] = int(payload)
            mask[i, label[i]] = True
        elif kind[i] == UNLABELED:
            mask[i] = True
        else:
            mask[i, [int(v) for v in payload.split("|")]] = True
    return Dataset(x, y, c, kind, label, mask)


def candidate_token(mask_row: np.ndarray, num_classes: int, buckets: int) -> int:
    """Deterministic embedding index for a multi-label candidate set.

    Tokens ``0..c-1`` are classes, ``c`` is the null (unlabeled) token and
    candidate sets hash into ``c+1 .. c+buckets``.
    """
    bits = int(sum(1 << int(j) for j in np.flatnonzero(mask_row)))
    return num_classes + 1 + zlib.crc32(bits.to_bytes(8, "little")) % buckets


def conditioning_tokens(data: Dataset, buckets: int) -> np.ndarray:
    """Single conditioning token per sample for the plain (unweighted) baseline."""
    c = data.num_classes
    tok = np.where(data.kind == UNLABELED, c, data.label)
    for i in np.flatnonzero(data.kind == CANDIDATE):
        members = np.flatnonzero(data.mask[i])
        tok[i] = members[0] if members.size == 1 else candidate_token(data.mask[i], c, buckets)
    return tok.astype(np.int64)
