"""Likelihoods, their gradients, and predictive distributions.

Three model kinds are supported: Bayesian linear regression with known noise
variance, logistic regression, and a small fully connected ReLU network with a
softmax output. Parameters are a flat float64 vector; for the network the
layout is, layer by layer, the weight matrix of shape (fan_in, fan_out) in
row-major order followed by that layer's bias.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .data import Dataset
from .expfam import GaussianMeanField, MeanParams, sample

KINDS = ("linear_regression", "logistic_regression", "bnn_classifier")
GH_NODES = 20


class DimensionMismatch(ValueError):
    pass


class NotDiagonal(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    layer_widths: tuple[int, ...] = ()
    n_classes: int = 10
    noise_variance: float = 1.0
    bias: bool | None = None
    probit_constant: str = "pi"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")
        if self.probit_constant not in ("pi", "pi/8"):
            raise ValueError("probit_constant must be 'pi' or 'pi/8'")
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if self.bias is None:
            object.__setattr__(self, "bias", self.kind == "logistic_regression")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.layer_widths, self.n_classes]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def param_dim(self) -> int:
        if self.kind == "bnn_classifier":
            return sum(i * o + o for i, o in self.layer_shapes)
        return self.input_dim + (1 if self.bias else 0)

    @property
    def probit_scale(self) -> float:
        return np.pi if self.probit_constant == "pi" else np.pi / 8.0


def design(model: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Inputs with a leading column of ones when the model has a bias term."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.input_dim:
        raise DimensionMismatch(f"inputs have {x.shape[1]} features, model expects {model.input_dim}")
    if model.kind != "bnn_classifier" and model.bias:
        return np.hstack([np.ones((x.shape[0], 1)), x])
    return x


def _check_theta(model: ModelSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1] != model.param_dim:
        raise DimensionMismatch(f"theta has length {theta.shape[-1]}, model has {model.param_dim} parameters")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    return theta


# ---------------------------------------------------------------------------
# reverse-mode tape for the network


class _Node:
    __slots__ = ("value", "grad", "parents", "backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward = backward


class GradTape:
    """Single-use record of one forward evaluation, replayed in reverse for gradients."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._used = False

    def _push(self, value, parents=(), backward=None) -> _Node:
        node = _Node(value, parents, backward)
        self._nodes.append(node)
        return node

    def leaf(self, value) -> _Node:
        return self._push(np.asarray(value, dtype=np.float64))

    def matmul(self, a: _Node, b: _Node) -> _Node:
        def back(g):
            return g @ b.value.T, a.value.T @ g
        return self._push(a.value @ b.value, (a, b), back)

    def add_bias(self, a: _Node, b: _Node) -> _Node:
        def back(g):
            return g, g.sum(axis=0)
        return self._push(a.value + b.value, (a, b), back)

    def relu(self, a: _Node) -> _Node:
        mask = a.value > 0

        def back(g):
            return (g * mask,)
        return self._push(np.where(mask, a.value, 0.0), (a,), back)

    def softmax_loglik(self, logits: _Node, labels: np.ndarray) -> _Node:
        """Sum over rows of log softmax(logits)[label]."""
        lse = logsumexp(logits.value, axis=1)
        rows = np.arange(labels.size)
        out = float(np.sum(logits.value[rows, labels] - lse))

        def back(g):
            p = np.exp(logits.value - lse[:, None])
            onehot = np.zeros_like(p)
            onehot[rows, labels] = 1.0
            return (g * (onehot - p),)
        return self._push(np.asarray(out), (logits,), back)

    def gradients(self, out: _Node) -> None:
        if self._used:
            raise RuntimeError("GradTape is single-use")
        self._used = True
        out.grad = np.ones_like(out.value)
        for node in reversed(self._nodes):
            if node.backward is None or node.grad is None:
                continue
            for parent, g in zip(node.parents, node.backward(node.grad)):
                parent.grad = g if parent.grad is None else parent.grad + g


def unflatten(model: ModelSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    layers, pos = [], 0
    for fan_in, fan_out in model.layer_shapes:
        w = theta[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = theta[pos:pos + fan_out]
        pos += fan_out
        layers.append((w, b))
    return layers


def _bnn_logits(model: ModelSpec, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    h = x
    layers = unflatten(model, theta)
    for j, (w, b) in enumerate(layers):
        h = h @ w + b
        if j < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def _bnn_value_and_grad(model: ModelSpec, x: np.ndarray, y: np.ndarray, theta: np.ndarray):
    tape = GradTape()
    leaves = []
    h = tape.leaf(x)
    layers = unflatten(model, theta)
    for j, (w, b) in enumerate(layers):
        wn, bn = tape.leaf(w), tape.leaf(b)
        leaves += [wn, bn]
        h = tape.add_bias(tape.matmul(h, wn), bn)
        if j < len(layers) - 1:
            h = tape.relu(h)
    out = tape.softmax_loglik(h, y)
    tape.gradients(out)
    grad = np.concatenate([
        (n.grad if n.grad is not None else np.zeros_like(n.value)).reshape(-1) for n in leaves
    ])
    return float(out.value), grad


# ---------------------------------------------------------------------------
# likelihoods


def log_lik_points(model: ModelSpec, data: Dataset, theta) -> np.ndarray:
    """Per-datapoint log-likelihood at a single parameter vector."""
    theta = _check_theta(model, theta)
    x = design(model, data.inputs)
    if model.kind == "linear_regression":
        r = data.targets - x @ theta
        return -0.5 * np.log(2 * np.pi * model.noise_variance) - r**2 / (2 * model.noise_variance)
    if model.kind == "logistic_regression":
        a = x @ theta
        y = data.targets.astype(np.float64)
        return y * log_expit(a) + (1.0 - y) * log_expit(-a)
    logits = _bnn_logits(model, x, theta)
    y = data.targets.astype(np.int64)
    return logits[np.arange(len(y)), y] - logsumexp(logits, axis=1)


def log_lik(model: ModelSpec, data: Dataset, theta) -> float:
    if len(data) == 0:
        _check_theta(model, theta)
        return 0.0
    return float(np.sum(log_lik_points(model, data, theta)))


def grad_log_lik(model: ModelSpec, data: Dataset, theta) -> np.ndarray:
    theta = _check_theta(model, theta)
    if len(data) == 0:
        return np.zeros_like(theta)
    x = design(model, data.inputs)
    if model.kind == "linear_regression":
        return x.T @ (data.targets - x @ theta) / model.noise_variance
    if model.kind == "logistic_regression":
        return x.T @ (data.targets - expit(x @ theta))
    return _bnn_value_and_grad(model, x, data.targets.astype(np.int64), theta)[1]


def value_and_grad_batch(model: ModelSpec, data: Dataset, thetas: np.ndarray):
    """log_lik and grad_log_lik for each row of ``thetas`` (shape S x D)."""
    thetas = _check_theta(model, np.atleast_2d(thetas))
    S = thetas.shape[0]
    if len(data) == 0:
        return np.zeros(S), np.zeros_like(thetas)
    x = design(model, data.inputs)
    if model.kind == "logistic_regression":
        a = thetas @ x.T
        y = data.targets.astype(np.float64)
        vals = np.sum(y * log_expit(a) + (1.0 - y) * log_expit(-a), axis=1)
        return vals, (y - expit(a)) @ x
    if model.kind == "linear_regression":
        r = data.targets - thetas @ x.T
        vals = np.sum(-0.5 * np.log(2 * np.pi * model.noise_variance) - r**2 / (2 * model.noise_variance), axis=1)
        return vals, r @ x / model.noise_variance
    vals, grads = np.empty(S), np.empty_like(thetas)
    y = data.targets.astype(np.int64)
    for s in range(S):
        vals[s], grads[s] = _bnn_value_and_grad(model, x, y, thetas[s])
    return vals, grads


# ---------------------------------------------------------------------------
# expectations under a mean-field Gaussian


@dataclass(frozen=True)
class Estimator:
    """How E_q[log p(y|theta)] is computed: 'auto', 'analytic', 'quadrature' or 'mc'."""

    kind: str = "auto"
    samples: int = 20
    seed: int = 0
    nodes: int = GH_NODES

    def __post_init__(self):
        if self.kind not in ("auto", "analytic", "quadrature", "mc"):
            raise ValueError(f"unknown estimator {self.kind!r}")
        if self.samples < 1 or self.nodes < 1:
            raise ValueError("samples and nodes must be positive")

    def resolve(self, model: ModelSpec) -> str:
        if self.kind != "auto":
            if self.kind == "analytic" and model.kind != "linear_regression":
                raise ValueError("analytic expectations exist only for linear regression")
            if self.kind == "quadrature" and model.kind == "bnn_classifier":
                raise ValueError("quadrature expectations are not available for the network")
            if self.kind == "quadrature" and model.kind == "linear_regression":
                return "analytic"  # closed form is exact; any quadrature rule would reproduce it
            return self.kind
        return {"linear_regression": "analytic", "logistic_regression": "quadrature",
                "bnn_classifier": "mc"}[model.kind]

    def with_seed(self, seed) -> "Estimator":
        return Estimator(self.kind, self.samples, seed, self.nodes)


@functools.lru_cache(maxsize=16)
def _gh(n: int):
    z, w = np.polynomial.hermite.hermgauss(n)
    z, w = np.sqrt(2.0) * z, w / np.sqrt(np.pi)
    z.flags.writeable = False
    w.flags.writeable = False
    return z, w


def expected_loglik_and_grads(model: ModelSpec, data: Dataset, q: GaussianMeanField,
                              estimator: Estimator = Estimator()):
    """E_q[log p(y|theta)] and its derivatives with respect to the mean m and variance v of q."""
    m, v = q.mean, q.var
    if len(data) == 0:
        return 0.0, np.zeros_like(m), np.zeros_like(v)
    kind = estimator.resolve(model)
    x = design(model, data.inputs)
    if kind == "analytic":
        s2 = model.noise_variance
        r = data.targets - x @ m
        x2v = (x**2) @ v
        val = float(np.sum(-0.5 * np.log(2 * np.pi * s2) - (r**2 + x2v) / (2 * s2)))
        return val, x.T @ r / s2, -np.sum(x**2, axis=0) / (2 * s2)
    if kind == "quadrature":
        mu_a = x @ m
        var_a = (x**2) @ v
        z, w = _gh(estimator.nodes)
        a = mu_a[:, None] + np.sqrt(var_a)[:, None] * z[None, :]
        y = data.targets.astype(np.float64)[:, None]
        sign = 2.0 * y - 1.0
        e_f = log_expit(sign * a) @ w
        sig = expit(a)
        e_f1 = (y - sig) @ w
        e_f2 = (sig * (sig - 1.0)) @ w
        return float(np.sum(e_f)), x.T @ e_f1, 0.5 * (x**2).T @ e_f2
    rng = np.random.default_rng(estimator.seed)
    eps = rng.standard_normal((estimator.samples, m.size))
    sd = np.sqrt(v)
    vals, grads = value_and_grad_batch(model, data, m + sd * eps)
    dm = grads.mean(axis=0)
    dv = (grads * eps).mean(axis=0) / (2.0 * sd)
    return float(vals.mean()), dm, dv


def expected_loglik(model: ModelSpec, data: Dataset, q: GaussianMeanField,
                    estimator: Estimator = Estimator()) -> float:
    return expected_loglik_and_grads(model, data, q, estimator)[0]


# ---------------------------------------------------------------------------
# prediction


def predict_logistic(q: GaussianMeanField, x, bias: bool = True, probit_constant: str = "pi") -> np.ndarray:
    """Probit approximation to the logistic predictive p(y=1 | x) under q."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xt = np.hstack([np.ones((x.shape[0], 1)), x]) if bias else x
    if xt.shape[1] != q.dim:
        raise DimensionMismatch(f"inputs give {xt.shape[1]} coefficients, q has {q.dim}")
    scale = np.pi if probit_constant == "pi" else np.pi / 8.0
    mean_a = xt @ q.mean
    var_a = (xt**2) @ q.var
    return expit(mean_a / np.sqrt(1.0 + scale * var_a))


def forward_probs(model: ModelSpec, x, theta) -> np.ndarray:
    """Class probabilities (N x C) at a fixed parameter vector."""
    theta = _check_theta(model, theta)
    xt = design(model, x)
    if model.kind == "logistic_regression":
        p = expit(xt @ theta)
        return np.stack([1.0 - p, p], axis=1)
    if model.kind == "bnn_classifier":
        logits = _bnn_logits(model, xt, theta)
        return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    raise ValueError("class probabilities are undefined for regression")


def predict_mc(model: ModelSpec, q: GaussianMeanField | MeanParams, x, S: int, seed) -> np.ndarray:
    """Monte Carlo predictive: average of per-sample class probabilities.

    ``q`` may be a MeanParams with zero variance, in which case every draw is
    the mean and the result is the deterministic forward pass.
    """
    if S < 1:
        raise ValueError("S must be at least 1")
    if isinstance(q, MeanParams):
        rng = np.random.default_rng(seed)
        thetas = q.mean + np.sqrt(np.maximum(q.var, 0.0)) * rng.standard_normal((S, q.mean.size))
    else:
        thetas = sample(q, S, seed)
    acc = None
    for theta in thetas:
        p = forward_probs(model, x, theta)
        acc = p if acc is None else acc + p
    out = acc / S
    return out / out.sum(axis=1, keepdims=True)


def predictive_probs(model: ModelSpec, q: GaussianMeanField, x, S: int = 100, seed=0) -> np.ndarray:
    """Probit closed form for logistic regression, Monte Carlo for the network."""
    if model.kind == "logistic_regression":
        p = predict_logistic(q, x, bias=model.bias, probit_constant=model.probit_constant)
        return np.stack([1.0 - p, p], axis=1)
    return predict_mc(model, q, x, S, seed)


# ---------------------------------------------------------------------------
# conjugate linear regression


def exact_posterior(model: ModelSpec, prior: GaussianMeanField, data: Dataset) -> GaussianMeanField:
    if model.kind != "linear_regression":
        raise ValueError("exact_posterior requires a linear regression model")
    if len(data) == 0:
        return prior
    x = design(model, data.inputs)
    gram = x.T @ x
    off = gram - np.diag(np.diag(gram))
    if np.max(np.abs(off), initial=0.0) > 1e-10:
        raise NotDiagonal("design is not orthogonal, so the exact posterior is not mean-field")
    s2 = model.noise_variance
    return GaussianMeanField(prior.eta1 + x.T @ data.targets / s2, prior.eta2 - np.diag(gram) / (2 * s2))


def linreg_log_marginal(model: ModelSpec, prior: GaussianMeanField, data: Dataset) -> float:
    """log p(y) for linear regression with a diagonal Gaussian prior (any design)."""
    x = design(model, data.inputs)
    cov = model.noise_variance * np.eye(len(data)) + (x * prior.var) @ x.T
    r = data.targets - x @ prior.mean
    sign, logdet = np.linalg.slogdet(cov)
    return float(-0.5 * (len(data) * np.log(2 * np.pi) + logdet + r @ np.linalg.solve(cov, r)))
