"""Diagonal Gaussian exponential-family arithmetic.

A mean-field Gaussian over D parameters is stored by its natural parameters
``eta1 = m / v`` and ``eta2 = -1 / (2 v)`` per dimension, with sufficient
statistics T(theta) = (theta, theta**2). Approximate likelihood factors live in
the same coordinates but need not be normalizable; the unit factor is all zeros.

Products and quotients of factors are additions and subtractions of natural
parameters. Nothing here mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class NotNormalizable(ValueError):
    """Raised when an operation needs a proper distribution but eta2 >= 0 somewhere."""

    def __init__(self, message: str, dims: Sequence[int] = ()):
        super().__init__(message)
        self.dims = tuple(int(d) for d in dims)


class DegenerateVariance(ValueError):
    pass


def _as_vector(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


class _Naturals:
    """Shared storage and arithmetic for anything parameterized by (eta1, eta2)."""

    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        e1, e2 = _as_vector(self.eta1), _as_vector(self.eta2)
        if e1.shape != e2.shape:
            raise ValueError(f"eta1 and eta2 lengths differ: {e1.shape} vs {e2.shape}")
        object.__setattr__(self, "eta1", e1)
        object.__setattr__(self, "eta2", e2)

    @property
    def dim(self) -> int:
        return self.eta1.shape[0]

    def naturals(self) -> np.ndarray:
        """Stacked (2, D) array of natural parameters."""
        return np.stack([self.eta1, self.eta2])

    def is_normalizable(self) -> bool:
        return bool(np.all(self.eta2 < 0))

    def unnormalizable_dims(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(~(self.eta2 < 0)))

    def to_dict(self) -> dict:
        # float() repr round-trips exactly through json
        return {"eta1": [float(v) for v in self.eta1], "eta2": [float(v) for v in self.eta2]}

    def max_abs_diff(self, other: "_Naturals") -> float:
        return float(max(np.max(np.abs(self.eta1 - other.eta1), initial=0.0),
                         np.max(np.abs(self.eta2 - other.eta2), initial=0.0)))


@dataclass(frozen=True, eq=False)
class GaussianMeanField(_Naturals):
    eta1: np.ndarray
    eta2: np.ndarray

    @classmethod
    def standard(cls, dim: int, variance: float = 1.0) -> "GaussianMeanField":
        return cls(np.zeros(dim), np.full(dim, -0.5 / variance))

    @classmethod
    def from_moments(cls, mean, var) -> "GaussianMeanField":
        mean = np.asarray(mean, dtype=np.float64)
        var = np.broadcast_to(np.asarray(var, dtype=np.float64), mean.shape)
        if np.any(~(var > 0)):
            raise DegenerateVariance("variance must be strictly positive")
        return cls(mean / var, -0.5 / var)

    @classmethod
    def from_naturals(cls, nat: np.ndarray) -> "GaussianMeanField":
        return cls(nat[0], nat[1])

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMeanField":
        return cls(d["eta1"], d["eta2"])

    def check(self) -> "GaussianMeanField":
        if not self.is_normalizable():
            dims = self.unnormalizable_dims()
            raise NotNormalizable(f"non-negative eta2 in dimensions {list(dims)[:10]}", dims)
        return self

    @property
    def var(self) -> np.ndarray:
        self.check()
        return -0.5 / self.eta2

    @property
    def mean(self) -> np.ndarray:
        return self.eta1 * self.var

    def __repr__(self):
        if self.is_normalizable() and self.dim <= 4:
            return f"GaussianMeanField(mean={self.mean}, var={self.var})"
        return f"GaussianMeanField(eta1={self.eta1}, eta2={self.eta2})"


@dataclass(frozen=True, eq=False)
class ApproxFactor(_Naturals):
    eta1: np.ndarray
    eta2: np.ndarray
    owner: int | None = field(default=None)

    @classmethod
    def unit(cls, dim: int, owner: int | None = None) -> "ApproxFactor":
        return cls(np.zeros(dim), np.zeros(dim), owner)

    @classmethod
    def from_dict(cls, d: dict) -> "ApproxFactor":
        return cls(d["eta1"], d["eta2"], d.get("owner"))

    def scaled(self, rho: float) -> "ApproxFactor":
        return ApproxFactor(rho * self.eta1, rho * self.eta2, self.owner)

    def plus(self, other: _Naturals) -> "ApproxFactor":
        return ApproxFactor(self.eta1 + other.eta1, self.eta2 + other.eta2, self.owner)

    def with_owner(self, owner: int | None) -> "ApproxFactor":
        return ApproxFactor(self.eta1, self.eta2, owner)

    def to_dict(self) -> dict:
        d = super().to_dict()
        if self.owner is not None:
            d["owner"] = int(self.owner)
        return d


@dataclass(frozen=True, eq=False)
class MeanParams:
    mu1: np.ndarray
    mu2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu1", _as_vector(self.mu1))
        object.__setattr__(self, "mu2", _as_vector(self.mu2))

    @property
    def mean(self) -> np.ndarray:
        return self.mu1

    @property
    def var(self) -> np.ndarray:
        return self.mu2 - self.mu1**2


def is_normalizable(q: _Naturals) -> bool:
    return q.is_normalizable()


def to_mean(q: GaussianMeanField) -> MeanParams:
    q.check()
    m1 = -q.eta1 / (2.0 * q.eta2)
    return MeanParams(m1, m1**2 - 1.0 / (2.0 * q.eta2))


def to_natural(mu: MeanParams) -> GaussianMeanField:
    var = mu.mu2 - mu.mu1**2
    if np.any(~(var > 0)):
        bad = np.flatnonzero(~(var > 0))
        raise DegenerateVariance(f"mu2 <= mu1**2 in dimensions {bad.tolist()[:10]}")
    return GaussianMeanField(mu.mu1 / var, -0.5 / var)


def log_partition(q: _Naturals) -> float:
    """A(eta) such that exp(eta . T(theta) - A) integrates to one."""
    if not q.is_normalizable():
        raise NotNormalizable("log-partition undefined for eta2 >= 0", q.unnormalizable_dims())
    e1, e2 = q.eta1, q.eta2
    terms = -(e1**2) / (4.0 * e2) - 0.5 * np.log(-2.0 * e2)
    return float(np.sum(terms) + 0.5 * q.dim * LOG_2PI)


def combine(base: _Naturals, factors: Iterable[_Naturals]):
    """Product of ``base`` with every factor; returns the same type as ``base``.

    The result may be unnormalizable; callers check with ``is_normalizable``.
    """
    e1 = np.array(base.eta1)
    e2 = np.array(base.eta2)
    for f in factors:
        e1 = e1 + f.eta1
        e2 = e2 + f.eta2
    if isinstance(base, ApproxFactor):
        return ApproxFactor(e1, e2, base.owner)
    return GaussianMeanField(e1, e2)


def divide(num: _Naturals, den: _Naturals, owner: int | None = None) -> ApproxFactor:
    return ApproxFactor(num.eta1 - den.eta1, num.eta2 - den.eta2, owner)


def as_gaussian(x: _Naturals) -> GaussianMeanField:
    return x if isinstance(x, GaussianMeanField) else GaussianMeanField(x.eta1, x.eta2)


def kl_terms(q: GaussianMeanField, p: GaussianMeanField) -> np.ndarray:
    """Per-dimension KL(q || p) for diagonal Gaussians."""
    mq, vq = q.mean, q.var
    mp, vp = p.mean, p.var
    return 0.5 * (np.log(vp / vq) + (vq + (mq - mp) ** 2) / vp - 1.0)


def kl(q: GaussianMeanField, p: GaussianMeanField) -> float:
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    return float(np.sum(kl_terms(q, p)))


def sample(q: GaussianMeanField, n: int, seed) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one sample")
    q.check()
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, q.dim))
    return q.mean + np.sqrt(q.var) * eps


def fisher_vector_product(q: GaussianMeanField, g1: np.ndarray, g2: np.ndarray):
    """Apply cov[T(theta)] of q to a mean-parameter gradient (g1, g2).

    This maps d/dmu to d/deta for each dimension independently.
    """
    m, v = q.mean, q.var
    c11 = v
    c12 = 2.0 * m * v
    c22 = 2.0 * v**2 + 4.0 * m**2 * v
    return c11 * g1 + c12 * g2, c12 * g1 + c22 * g2


def mean_param_gradient(mean: np.ndarray, dm: np.ndarray, dv: np.ndarray):
    """Convert gradients w.r.t. (m, v) into gradients w.r.t. (mu1, mu2)."""
    return dm - 2.0 * mean * dv, np.array(dv, dtype=np.float64)
