"""Client-side computations: cavity, local free energy and local optimizers.

A client holds its data and its current approximate-likelihood factor. Given
the posterior it last received, it removes its own factor to form the cavity,
finds a mean-field q that balances its data against the cavity, and reports
the implied new factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .expfam import (ApproxFactor, GaussianMeanField, NotNormalizable, as_gaussian, combine, divide, kl,
                     log_partition, mean_param_gradient)
from .models import Estimator, ModelSpec, design, exact_posterior, expected_loglik_and_grads

METHODS = ("auto", "analytic", "gradient", "fixed_point")


class CavityNotNormalizable(NotNormalizable):
    pass


class NonFiniteObjective(FloatingPointError):
    pass


@dataclass(frozen=True)
class LocalProblem:
    q_prev: GaussianMeanField
    t_prev: ApproxFactor
    data: Dataset
    model: ModelSpec

    def __post_init__(self):
        if self.q_prev.dim != self.t_prev.dim or self.q_prev.dim != self.model.param_dim:
            raise ValueError("posterior, factor and model disagree on the parameter dimension")

    def with_state(self, q_prev: GaussianMeanField, t_prev: ApproxFactor) -> "LocalProblem":
        return replace(self, q_prev=q_prev, t_prev=t_prev)


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "auto"
    step_size: float | None = None
    max_steps: int = 1000
    tol: float = 1e-6
    window: int = 5
    estimator: str = "auto"
    mc_samples: int = 20
    early_stop: str = "off"
    minibatch: int | None = None
    seed: int = 0
    init: str = "q_prev"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown local method {self.method!r}")
        if self.early_stop not in ("off", "expected_loglik"):
            raise ValueError("early_stop must be 'off' or 'expected_loglik'")
        if self.init not in ("q_prev", "tight"):
            raise ValueError("init must be 'q_prev' or 'tight'")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_steps < 0 or self.window < 1 or not self.tol > 0:
            raise ValueError("max_steps >= 0, window >= 1 and tol > 0 are required")
        if self.minibatch is not None and self.minibatch < 1:
            raise ValueError("minibatch size must be positive")

    def resolve_method(self, model: ModelSpec) -> str:
        if self.method != "auto":
            return self.method
        return {"linear_regression": "analytic", "logistic_regression": "fixed_point",
                "bnn_classifier": "gradient"}[model.kind]

    def resolve_step(self, model: ModelSpec) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.resolve_method(model) == "fixed_point":
            return 0.5
        return 1e-3 if model.kind == "bnn_classifier" else 1e-2

    def make_estimator(self, seed=None) -> Estimator:
        return Estimator(self.estimator, self.mc_samples, self.seed if seed is None else seed)


@dataclass(frozen=True)
class HyperParams:
    prior_variance: float = 1.0
    noise_variance: float = 1.0

    def __post_init__(self):
        if not (self.prior_variance > 0 and self.noise_variance > 0):
            raise ValueError("hyperparameters must be strictly positive")


@dataclass
class LocalResult:
    q_new: GaussianMeanField
    t_new: ApproxFactor
    delta: ApproxFactor
    trace: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# objectives


def cavity(problem: LocalProblem) -> GaussianMeanField:
    """q_prev with this client's factor removed; may be unnormalizable."""
    return as_gaussian(divide(problem.q_prev, problem.t_prev))


def expected_loglik(problem: LocalProblem, q: GaussianMeanField, estimator: Estimator = Estimator()) -> float:
    return expected_loglik_and_grads(problem.model, problem.data, q, estimator)[0]


def local_free_energy(problem: LocalProblem, q: GaussianMeanField, estimator: Estimator = Estimator()) -> float:
    """E_q[log p(y_k|theta)] - KL(q || cavity) + log of the cavity's mass relative to q_prev."""
    cav = cavity(problem)
    if not cav.is_normalizable():
        raise CavityNotNormalizable("cavity is not normalizable", cav.unnormalizable_dims())
    q.check()
    ell = expected_loglik(problem, q, estimator)
    return ell - kl(q, cav) + log_partition(cav) - log_partition(problem.q_prev)


def global_free_energy(model: ModelSpec, prior: GaussianMeanField, data: Dataset, q: GaussianMeanField,
                       estimator: Estimator = Estimator()) -> float:
    return expected_loglik_and_grads(model, data, q, estimator)[0] - kl(q, prior)


def natural_gradient_target(model: ModelSpec, data: Dataset, q: GaussianMeanField,
                            estimator: Estimator = Estimator()) -> tuple[np.ndarray, np.ndarray]:
    """d/dmu of E_q[log p(data|theta)], which is the fixed point of the factor's naturals."""
    _, dm, dv = expected_loglik_and_grads(model, data, q, estimator)
    return mean_param_gradient(q.mean, dm, dv)


def early_stop_check(history, window: int, tol: float) -> bool:
    """True once the change over the last ``window`` evaluations is below ``tol``."""
    if len(history) == 0:
        return False
    if len(history) <= window:
        return len(history) > 1 and all(h == history[0] for h in history)
    return abs(history[-1] - history[-1 - window]) < tol


# ---------------------------------------------------------------------------
# single steps


def fixed_point_step(problem: LocalProblem, q_cur: GaussianMeanField, rho: float,
                     factor: ApproxFactor | None = None, estimator: Estimator = Estimator()) -> ApproxFactor:
    """Damped update of the client's factor towards d/dmu E_q[log p(y_k|theta)] at q_cur."""
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    q_cur.check()
    old = problem.t_prev if factor is None else factor
    g1, g2 = natural_gradient_target(problem.model, problem.data, q_cur, estimator)
    return ApproxFactor((1 - rho) * old.eta1 + rho * g1, (1 - rho) * old.eta2 + rho * g2, old.owner)


def stochastic_global_step(q: GaussianMeanField, prior: GaussianMeanField, batch: Dataset, L: float, rho: float,
                           model: ModelSpec, estimator: Estimator = Estimator(),
                           form: str = "natural") -> GaussianMeanField:
    """One stochastic natural-gradient step of global VI from a minibatch that is 1/L of the data.

    ``form="ep"`` evaluates the algebraically identical update written as a
    deletion of 1/L of the current likelihood approximation followed by
    re-inclusion of the batch, with the rescaled rate L * rho.
    """
    q.check()
    g1, g2 = natural_gradient_target(model, batch, q, estimator)
    if form == "natural":
        e1 = (1 - rho) * q.eta1 + rho * (prior.eta1 + L * g1)
        e2 = (1 - rho) * q.eta2 + rho * (prior.eta2 + L * g2)
    elif form == "ep":
        r = L * rho
        e1 = q.eta1 + r * (g1 - (q.eta1 - prior.eta1) / L)
        e2 = q.eta2 + r * (g2 - (q.eta2 - prior.eta2) / L)
    else:
        raise ValueError("form must be 'natural' or 'ep'")
    out = GaussianMeanField(e1, e2)
    return out.check()


def stochastic_local_step(q: GaussianMeanField, factor: ApproxFactor, group: Dataset, rho: float,
                          model: ModelSpec, estimator: Estimator = Estimator(),
                          form: str = "natural") -> tuple[GaussianMeanField, ApproxFactor]:
    """Refresh one group's factor with a damped natural-gradient target and move q by the change."""
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    q.check()
    g1, g2 = natural_gradient_target(model, group, q, estimator)
    new = ApproxFactor((1 - rho) * factor.eta1 + rho * g1, (1 - rho) * factor.eta2 + rho * g2, factor.owner)
    if form == "natural":
        q_new = combine(q, [divide(new, factor)])
    elif form == "ep":
        q_new = GaussianMeanField(q.eta1 + rho * (g1 - factor.eta1), q.eta2 + rho * (g2 - factor.eta2))
    else:
        raise ValueError("form must be 'natural' or 'ep'")
    return q_new.check(), new


# ---------------------------------------------------------------------------
# local optimization


def _tight(q: GaussianMeanField) -> GaussianMeanField:
    return GaussianMeanField.from_moments(q.mean, np.full(q.dim, 1e-2))


def _finish(problem: LocalProblem, q_new: GaussianMeanField, trace) -> LocalResult:
    q_new.check()
    change = divide(q_new, problem.q_prev, problem.t_prev.owner)
    t_new = problem.t_prev.plus(change)
    return LocalResult(q_new, t_new, divide(t_new, problem.t_prev, problem.t_prev.owner), trace)


def optimize_local(problem: LocalProblem, config: OptimizerConfig = OptimizerConfig()) -> LocalResult:
    cav = cavity(problem)
    if not cav.is_normalizable():
        raise CavityNotNormalizable("cavity is not normalizable", cav.unnormalizable_dims())
    if len(problem.data) == 0:
        return _finish(problem, cav, [])
    method = config.resolve_method(problem.model)
    if method == "analytic":
        return _finish(problem, exact_posterior(problem.model, cav, problem.data), [])
    if method == "fixed_point":
        return _fixed_point(problem, cav, config)
    return _adam(problem, cav, config)


def _record(trace, step, problem, q, est, history):
    ell = expected_loglik(problem, q, est)
    cav = cavity(problem)
    f = ell - kl(q, cav) + log_partition(cav) - log_partition(problem.q_prev)
    if not math.isfinite(f):
        raise NonFiniteObjective(f"local free energy became {f} at step {step}")
    trace.append({"step": step, "free_energy": f, "expected_loglik": ell})
    history.append(ell)
    return f


def _fixed_point(problem: LocalProblem, cav: GaussianMeanField, config: OptimizerConfig) -> LocalResult:
    rho = config.resolve_step(problem.model)
    if not 0 < rho <= 1:
        raise ValueError("fixed-point damping must lie in (0, 1]")
    q = problem.q_prev if config.init == "q_prev" else _tight(problem.q_prev)
    factor = divide(q, cav, problem.t_prev.owner)
    trace, history = [], []
    for step in range(config.max_steps):
        est = config.make_estimator(np.random.SeedSequence([config.seed, step]))
        new = fixed_point_step(problem, q, rho, factor, est)
        q_next = combine(cav, [new])
        if not q_next.is_normalizable():
            raise NotNormalizable("fixed-point iterate lost normalizability", q_next.unnormalizable_dims())
        moved = new.max_abs_diff(factor)
        factor, q = new, q_next
        if config.early_stop == "expected_loglik":
            _record(trace, step, problem, q, est, history)
            if early_stop_check(history, config.window, config.tol):
                break
        if moved < config.tol:
            break
    if not np.all(np.isfinite(q.naturals())):
        raise NonFiniteObjective("fixed-point iteration diverged")
    if not trace:
        _record(trace, step if config.max_steps else 0, problem, q, config.make_estimator(), history)
    return _finish(problem, q, trace)


def _minibatches(n: int, size: int | None, seed):
    """Endless stream of index batches, reshuffled each epoch."""
    if size is None or size >= n:
        while True:
            yield None
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        for s in range(0, n - size + 1, size):
            yield perm[s:s + size]


def _adam(problem: LocalProblem, cav: GaussianMeanField, config: OptimizerConfig) -> LocalResult:
    lr = config.resolve_step(problem.model)
    b1, b2, eps = 0.9, 0.999, 1e-8
    start = problem.q_prev if config.init == "q_prev" else _tight(problem.q_prev)
    m, logv = np.array(start.mean), np.log(start.var)
    mc, vc = cav.mean, cav.var
    n = len(problem.data)
    batches = _minibatches(n, config.minibatch, np.random.SeedSequence([config.seed, 1 << 20]))
    mom = np.zeros(2 * m.size)
    sq = np.zeros(2 * m.size)
    trace, history, fvals = [], [], []
    for step in range(config.max_steps):
        q = GaussianMeanField.from_moments(m, np.exp(logv))
        est = config.make_estimator(np.random.SeedSequence([config.seed, step]))
        idx = next(batches)
        data = problem.data if idx is None else problem.data.subset(idx)
        scale = 1.0 if idx is None else n / len(idx)
        ell, dm, dv = expected_loglik_and_grads(problem.model, data, q, est)
        ell *= scale
        v = np.exp(logv)
        gm = scale * dm - (m - mc) / vc
        gv = scale * dv - 0.5 * (1.0 / vc - 1.0 / v)
        grad = np.concatenate([gm, gv * v])
        f = ell - kl(q, cav) + log_partition(cav) - log_partition(problem.q_prev)
        if not (math.isfinite(f) and np.all(np.isfinite(grad))):
            raise NonFiniteObjective(f"local free energy became {f} at step {step}")
        trace.append({"step": step, "free_energy": f, "expected_loglik": ell})
        history.append(ell)
        fvals.append(f)
        if config.early_stop == "expected_loglik" and early_stop_check(history, config.window, config.tol):
            break
        if len(fvals) > config.window:
            ref = fvals[-1 - config.window]
            if abs(fvals[-1] - ref) <= config.tol * max(1.0, abs(ref)):
                break
        mom = b1 * mom + (1 - b1) * grad
        sq = b2 * sq + (1 - b2) * grad**2
        t = step + 1
        upd = lr * (mom / (1 - b1**t)) / (np.sqrt(sq / (1 - b2**t)) + eps)
        m = m + upd[:m.size]
        logv = logv + upd[m.size:]
    return _finish(problem, GaussianMeanField.from_moments(m, np.exp(logv)), trace)


# ---------------------------------------------------------------------------
# hyperparameters


def hyper_gradient(q: GaussianMeanField, model: ModelSpec, partition, eps: HyperParams) -> np.ndarray:
    """Gradient of the global free energy with respect to (noise_variance, prior_variance), q fixed.

    The prior is taken to be N(0, prior_variance * I). Each datapoint's
    contribution is computed client-side; the sums use exactly rounded
    accumulation so the result does not depend on how data are partitioned.
    """
    m, v = q.mean, q.var
    noise_terms = []
    if model.kind == "linear_regression":
        s2 = eps.noise_variance
        for data in partition:
            if len(data) == 0:
                continue
            x = design(model, data.inputs)
            sq = (data.targets - x @ m) ** 2 + (x**2) @ v
            noise_terms.extend((-0.5 / s2 + sq / (2 * s2**2)).tolist())
    sp = eps.prior_variance
    prior_terms = (-0.5 / sp + (m**2 + v) / (2 * sp**2)).tolist()
    return np.array([math.fsum(noise_terms), math.fsum(prior_terms)])


def linreg_free_energy(q: GaussianMeanField, model: ModelSpec, data: Dataset, eps: HyperParams) -> float:
    """Global free energy of linear regression as a function of the hyperparameters."""
    m2 = replace(model, noise_variance=eps.noise_variance)
    prior = GaussianMeanField.standard(q.dim, eps.prior_variance)
    return global_free_energy(m2, prior, data, q, Estimator("analytic"))
