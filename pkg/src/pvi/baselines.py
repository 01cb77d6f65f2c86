"""Reference methods: global VI, committee-machine aggregation, VCL, streaming VB and one PEP step."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import log_expit

from .data import Dataset
from .expfam import ApproxFactor, GaussianMeanField, NotNormalizable, fisher_vector_product
from .localopt import LocalProblem, OptimizerConfig, natural_gradient_target, optimize_local
from .models import Estimator, ModelSpec, design

KINDS = ("global_vi", "bcm_same", "bcm_split", "vcl", "streaming_vb")


class AggregateNotNormalizable(NotNormalizable):
    pass


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    order: tuple[int, ...] | None = None
    rounds: int = 1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline {self.kind!r}")

    def resolved_order(self, M: int) -> list[int]:
        if self.order is None:
            return list(range(M))
        if sorted(self.order) != list(range(M)):
            raise ValueError(f"order {self.order} is not a permutation of 0..{M - 1}")
        return list(self.order)


def _solve(q_start: GaussianMeanField, data: Dataset, model: ModelSpec, config: OptimizerConfig,
           seed_key=(0,)) -> GaussianMeanField:
    """Maximize E_q[log p(data)] - KL(q || q_start)."""
    cfg = replace(config, seed=int(np.random.SeedSequence([config.seed, *seed_key]).generate_state(1)[0]))
    problem = LocalProblem(q_start, ApproxFactor.unit(q_start.dim), data, model)
    return optimize_local(problem, cfg).q_new


def global_vi(prior: GaussianMeanField, model: ModelSpec, data: Dataset,
              config: OptimizerConfig = OptimizerConfig()) -> GaussianMeanField:
    return _solve(prior, data, model, config, (0, 0))


def bcm(prior: GaussianMeanField, model: ModelSpec, clients: Sequence[Dataset], variant: str = "same",
        config: OptimizerConfig = OptimizerConfig()) -> GaussianMeanField:
    """Independent per-client VI followed by a product of the sub-posteriors.

    ``same`` gives every client the full prior and divides out M-1 copies;
    ``split`` gives client m the prior raised to N_m/N.
    """
    M = len(clients)
    N = sum(len(c) for c in clients)
    e1, e2 = np.zeros(prior.dim), np.zeros(prior.dim)
    for k, data in enumerate(clients):
        if variant == "same":
            p = prior
        elif variant == "split":
            frac = len(data) / N if N else 1.0 / M
            p = GaussianMeanField(frac * prior.eta1, frac * prior.eta2)
        else:
            raise ValueError("variant must be 'same' or 'split'")
        qk = _solve(p, data, model, config, (0, k))
        e1, e2 = e1 + qk.eta1, e2 + qk.eta2
    if variant == "same":
        e1, e2 = e1 - (M - 1) * prior.eta1, e2 - (M - 1) * prior.eta2
    out = GaussianMeanField(e1, e2)
    if not out.is_normalizable():
        raise AggregateNotNormalizable("aggregated posterior is not normalizable", out.unnormalizable_dims())
    return out


def streaming_vb(prior: GaussianMeanField, model: ModelSpec, clients: Sequence[Dataset],
                 order: Sequence[int] | None = None, rounds: int = 1,
                 config: OptimizerConfig = OptimizerConfig(), history: list | None = None) -> GaussianMeanField:
    """Absorb clients one at a time with the running posterior as prior and no deletion step.

    Each extra round absorbs the same data again. Intermediate posteriors are
    appended to ``history`` when given.
    """
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    order = list(range(len(clients))) if order is None else list(order)
    if sorted(order) != list(range(len(clients))):
        raise ValueError("order must be a permutation of the clients")
    q = prior
    it = 0
    for _ in range(rounds):
        for k in order:
            q = _solve(q, clients[k], model, config, (it, k))
            it += 1
            if history is not None:
                history.append(q)
    return q


def vcl(prior: GaussianMeanField, model: ModelSpec, clients: Sequence[Dataset], order: Sequence[int] | None = None,
        config: OptimizerConfig = OptimizerConfig(), history: list | None = None) -> GaussianMeanField:
    """One pass over the clients, each treating the previous posterior as its prior."""
    return streaming_vb(prior, model, clients, order, 1, config, history)


def run_baseline(spec: BaselineSpec, prior: GaussianMeanField, model: ModelSpec,
                 clients: Sequence[Dataset]) -> GaussianMeanField:
    if spec.kind == "global_vi":
        return global_vi(prior, model, Dataset.concat(list(clients)), spec.optimizer)
    if spec.kind in ("bcm_same", "bcm_split"):
        return bcm(prior, model, clients, spec.kind.split("_")[1], spec.optimizer)
    order = spec.resolved_order(len(clients))
    if spec.kind == "vcl":
        return vcl(prior, model, clients, order, spec.optimizer)
    return streaming_vb(prior, model, clients, order, spec.rounds, spec.optimizer)


def global_vi_step(prior: GaussianMeanField, model: ModelSpec, data: Dataset, q: GaussianMeanField, form: str,
                   rho: float, estimator: Estimator = Estimator()) -> GaussianMeanField:
    """One step of global VI in natural coordinates.

    ``gradient``: eta_q + rho * dF/deta_q. ``fixed_point``: damped move towards
    prior + d/dmu E_q[log p(y|theta)].
    """
    g1, g2 = natural_gradient_target(model, data, q, estimator)
    if form == "gradient":
        d1, d2 = fisher_vector_product(q, g1 - (q.eta1 - prior.eta1), g2 - (q.eta2 - prior.eta2))
        return GaussianMeanField(q.eta1 + rho * d1, q.eta2 + rho * d2).check()
    if form == "fixed_point":
        return GaussianMeanField((1 - rho) * q.eta1 + rho * (prior.eta1 + g1),
                                 (1 - rho) * q.eta2 + rho * (prior.eta2 + g2)).check()
    raise ValueError("form must be 'gradient' or 'fixed_point'")


# ---------------------------------------------------------------------------
# power EP


def _tilted_moments_conjugate(q_prev, t_prev, data, model, alpha):
    x = design(model, data.inputs)
    s2 = model.noise_variance
    prec = np.diag(-2.0 * (q_prev.eta2 - alpha * t_prev.eta2)) + alpha * (x.T @ x) / s2
    lin = q_prev.eta1 - alpha * t_prev.eta1 + alpha * x.T @ data.targets / s2
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise NotNormalizable("tilted distribution is not normalizable") from None
    cov = np.linalg.inv(chol).T @ np.linalg.inv(chol)
    return cov @ lin, np.diag(cov)


def _tilted_moments_quadrature(q_prev, t_prev, data, model, alpha, nodes):
    z, w = np.polynomial.hermite.hermgauss(nodes)
    theta = q_prev.mean[0] + np.sqrt(2.0 * q_prev.var[0]) * z
    xt = design(model, data.inputs)[:, 0]
    a = np.outer(theta, xt)
    y = data.targets.astype(np.float64)
    ll = np.sum(y * log_expit(a) + (1 - y) * log_expit(-a), axis=1)
    log_ratio = alpha * (ll - t_prev.eta1[0] * theta - t_prev.eta2[0] * theta**2)
    lw = np.log(w) + log_ratio
    lw -= lw.max()
    p = np.exp(lw)
    p /= p.sum()
    mean = np.sum(p * theta)
    return np.array([mean]), np.array([np.sum(p * (theta - mean) ** 2)])


def pep_step(q_prev: GaussianMeanField, t_prev: ApproxFactor, data: Dataset, model: ModelSpec, alpha: float,
             rho: float | None = None, nodes: int = 200) -> tuple[GaussianMeanField, ApproxFactor]:
    """One power-EP update for a single client, damped with rho (default rho = alpha).

    Tilted moments are exact for linear regression; for one-dimensional
    logistic regression they come from Gauss-Hermite quadrature under q_prev.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    rho = alpha if rho is None else rho
    q_prev.check()
    if model.kind == "linear_regression":
        mean, var = _tilted_moments_conjugate(q_prev, t_prev, data, model, alpha)
    elif model.kind == "logistic_regression" and q_prev.dim == 1:
        mean, var = _tilted_moments_quadrature(q_prev, t_prev, data, model, alpha, nodes)
    else:
        raise ValueError("pep_step supports linear regression and one-dimensional logistic regression")
    q_alpha = GaussianMeanField.from_moments(mean, var)
    step = rho / alpha
    q_new = GaussianMeanField((1 - step) * q_prev.eta1 + step * q_alpha.eta1,
                              (1 - step) * q_prev.eta2 + step * q_alpha.eta2)
    if not q_new.is_normalizable():
        raise NotNormalizable("PEP update is not normalizable", q_new.unnormalizable_dims())
    t_new = ApproxFactor(t_prev.eta1 + q_new.eta1 - q_prev.eta1, t_prev.eta2 + q_new.eta2 - q_prev.eta2, t_prev.owner)
    return q_new, t_new
