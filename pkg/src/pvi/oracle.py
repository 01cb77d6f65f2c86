"""Brute-force references: grid posteriors, finite differences, grid KL.

Everything here is deliberately naive so it can check the fast code paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .expfam import GaussianMeanField, _Naturals, as_gaussian
from .models import ModelSpec, design, log_lik_points

DEFAULT_POINTS = {1: 4001, 2: 601}
DEFAULT_WIDTH = 10.0


class DimensionTooHigh(ValueError):
    pass


class NonFiniteEvaluation(ValueError):
    pass


def _trapz_weights(axis: np.ndarray) -> np.ndarray:
    h = np.diff(axis)
    w = np.zeros_like(axis)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


@dataclass
class GridPosterior:
    axes: list[np.ndarray]
    log_density: np.ndarray  # normalized, shape = tuple(len(a) for a in axes)
    log_z: float
    mean: np.ndarray
    var: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.axes)

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.reshape(-1) for g in mesh], axis=1)

    def weights(self) -> np.ndarray:
        w = _trapz_weights(self.axes[0])
        for a in self.axes[1:]:
            w = np.multiply.outer(w, _trapz_weights(a))
        return w

    def integrate(self, values: np.ndarray) -> float:
        """Trapezoid integral of a table with the grid's shape."""
        return float(np.sum(self.weights() * values))


def _gaussian_logpdf(q: GaussianMeanField, pts: np.ndarray) -> np.ndarray:
    m, v = q.mean, q.var
    return np.sum(-0.5 * np.log(2 * np.pi * v) - (pts - m) ** 2 / (2 * v), axis=1)


def grid_posterior(model: ModelSpec | None, prior: _Naturals, data: Dataset | None,
                   bounds=None, resolution: int | None = None, power: float = 1.0) -> GridPosterior:
    """Tabulate prior(theta) * p(data | theta)**power on a grid and normalize it.

    ``prior`` must be a normalizable Gaussian; default bounds are its mean
    plus or minus ten standard deviations in each dimension.
    """
    prior = as_gaussian(prior).check()
    D = prior.dim
    if D > 2:
        raise DimensionTooHigh(f"grid oracle supports D <= 2, got D={D}")
    n = resolution or DEFAULT_POINTS[D]
    if bounds is None:
        sd = np.sqrt(prior.var)
        bounds = [(prior.mean[i] - DEFAULT_WIDTH * sd[i], prior.mean[i] + DEFAULT_WIDTH * sd[i]) for i in range(D)]
    axes = [np.linspace(lo, hi, n) for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.reshape(-1) for g in mesh], axis=1)
    logp = _gaussian_logpdf(prior, pts)
    if data is not None and len(data) > 0:
        logp = logp + power * _batched_loglik(model, data, pts)
    logp = logp.reshape([n] * D)
    shift = logp.max()
    w = _trapz_weights(axes[0])
    for a in axes[1:]:
        w = np.multiply.outer(w, _trapz_weights(a))
    log_z = float(shift + np.log(np.sum(w * np.exp(logp - shift))))
    log_density = logp - log_z
    dens = np.exp(log_density) * w
    mean = np.array([np.sum(dens * g) for g in mesh])
    var = np.array([np.sum(dens * (g - mean[i]) ** 2) for i, g in enumerate(mesh)])
    return GridPosterior(axes, log_density, log_z, mean, var)


def _batched_loglik(model: ModelSpec, data: Dataset, pts: np.ndarray, chunk: int = 20000) -> np.ndarray:
    x = design(model, data.inputs)
    out = np.empty(pts.shape[0])
    y = data.targets
    for s in range(0, pts.shape[0], chunk):
        th = pts[s:s + chunk]
        a = th @ x.T
        if model.kind == "logistic_regression":
            yy = y.astype(np.float64)
            out[s:s + chunk] = np.sum(yy * -np.logaddexp(0.0, -a) + (1 - yy) * -np.logaddexp(0.0, a), axis=1)
        elif model.kind == "linear_regression":
            s2 = model.noise_variance
            out[s:s + chunk] = np.sum(-0.5 * np.log(2 * np.pi * s2) - (y - a) ** 2 / (2 * s2), axis=1)
        else:
            out[s:s + chunk] = [np.sum(log_lik_points(model, data, t)) for t in th]
    return out


def kl_to_grid(q: GaussianMeanField, gp: GridPosterior) -> float:
    if q.dim != gp.dim or q.dim > 2:
        raise DimensionTooHigh("kl_to_grid needs matching D <= 2")
    logq = _gaussian_logpdf(q, gp.points()).reshape(gp.log_density.shape)
    return gp.integrate(np.exp(logq) * (logq - gp.log_density))


def fd_gradient(f, x, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        hi, lo = f(x + e), f(x - e)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteEvaluation(f"f is not finite near coordinate {i}")
        g[i] = (hi - lo) / (2 * h)
    return g
