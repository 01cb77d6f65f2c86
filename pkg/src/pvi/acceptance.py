"""The acceptance suite behind ``pvi verify``.

Each criterion is a function ``(traces) -> (passed, detail)``. ``traces`` is a
dict that criteria may add named MetricsTraces to; ``verify`` writes them out
so that repeated runs can be compared byte for byte.
"""

from __future__ import annotations

import filecmp
import tempfile
import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from . import server
from .baselines import bcm, global_vi, global_vi_step, pep_step, streaming_vb, vcl
from .data import Dataset, split_beta_kappa, synth_linreg, synth_logreg
from .expfam import ApproxFactor, GaussianMeanField, combine, kl, log_partition
from .harness import log_loss
from .localopt import (HyperParams, LocalProblem, OptimizerConfig, cavity, fixed_point_step, global_free_energy,
                       hyper_gradient, linreg_free_energy, local_free_energy)
from .models import (Estimator, ModelSpec, exact_posterior, grad_log_lik, linreg_log_marginal, log_lik,
                     predict_logistic, predictive_probs)
from .oracle import fd_gradient, grid_posterior, kl_to_grid
from .server import Schedule

LIN1 = ModelSpec("linear_regression", 1)
LOG1 = ModelSpec("logistic_regression", 1, bias=False)
PRIOR1 = GaussianMeanField.standard(1)
TWO = [Dataset([[1.0]], [1.0]), Dataset([[1.0]], [-1.0])]
THIRD = GaussianMeanField.from_moments([0.0], [1 / 3])
FINE = Estimator("quadrature", nodes=120)
TIGHT = OptimizerConfig(tol=1e-10, max_steps=5000)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float
    budget: float | None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        budget = f" (budget {self.budget:g} s)" if self.budget else ""
        return f"[{status}] {self.number:2d} {self.name}: {self.detail}; {self.seconds:.2f} s{budget}"


def _kl_to(target):
    return lambda q: {"kl_to_exact": kl(q, target)}


# ---------------------------------------------------------------------------
# 1-3: conjugate exactness and the free-energy identities


def conjugate_exactness(traces):
    schedules = {"sequential": Schedule("sequential_fixed", rounds=5, tol=1e-14),
                 "synchronous": Schedule("synchronous", rho=0.5, rounds=100, tol=1e-14),
                 "asynchronous": Schedule("asynchronous", rho=0.5, rounds=100, tol=1e-14)}
    ok, parts = True, []
    for name, sched in schedules.items():
        t0 = time.perf_counter()
        res = server.run(server.init(PRIOR1, 2), sched, TWO, LIN1, evaluate=_kl_to(THIRD))
        secs = time.perf_counter() - t0
        gap = kl(res.state.q, THIRD)
        ok &= gap <= 1e-6 and secs < 1.0
        parts.append(f"{name} KL={gap:.1e} in {secs:.2f}s")
        traces[f"conjugate_{name}"] = res.trace
    return ok, ", ".join(parts)


def tilted_identity(traces):
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(10):
        n = int(rng.integers(1, 9))
        data = Dataset(rng.normal(0, 1.5, (n, 1)), rng.integers(0, 2, n))
        cav = GaussianMeanField.from_moments(rng.uniform(-1, 1, 1), rng.uniform(0.3, 2.0, 1))
        t_prev = ApproxFactor(rng.normal(0, 0.5, 1), -rng.uniform(0, 0.3, 1))
        q_prev = GaussianMeanField(cav.eta1 + t_prev.eta1, cav.eta2 + t_prev.eta2)
        problem = LocalProblem(q_prev, t_prev, data, LOG1)
        q = GaussianMeanField.from_moments(rng.uniform(-1.5, 1.5, 1), rng.uniform(0.05, 1.5, 1))
        cav = cavity(problem)
        half = 10 * np.sqrt(max(cav.var[0], q.var[0]))
        gp = grid_posterior(LOG1, cav, data, bounds=[(-half - 2, half + 2)], resolution=8001)
        log_zhat = gp.log_z + log_partition(cav) - log_partition(q_prev)
        worst = max(worst, abs(local_free_energy(problem, q, FINE) - (log_zhat - kl_to_grid(q, gp))))
    return worst <= 1e-4, f"max |F_k - (log Zhat - KL)| = {worst:.2e} over 10 configs"


def free_energy_sum(traces):
    rng = np.random.default_rng(30)
    worst = 0.0
    for i in range(20):
        if i < 10:
            model, full = LIN1, synth_linreg(1, 12, seed=i)
        else:
            model, full = LOG1, synth_logreg(1, 12, weight_seed=i, seed=i + 1)
            full = Dataset(full.inputs, full.targets)
        groups = [full.subset(np.arange(k, 12, 3)) for k in range(3)]
        factors = [ApproxFactor(rng.normal(0, 0.5, 1), -rng.uniform(0, 0.4, 1)) for _ in groups]
        q = combine(PRIOR1, factors)
        total = sum(local_free_energy(LocalProblem(q, t, g, model), q, FINE) for g, t in zip(groups, factors))
        lhs = total + log_partition(q) - log_partition(PRIOR1)
        worst = max(worst, abs(lhs - global_free_energy(model, PRIOR1, full, q, FINE)))
    return worst <= 1e-6, f"max |sum F_m + log Z_q - F| = {worst:.2e} over 20 configs"


# ---------------------------------------------------------------------------
# 4-5: agreement with global VI


def cross_method_agreement(traces):
    model = ModelSpec("logistic_regression", 1)
    prior = GaussianMeanField.standard(2)
    train = synth_logreg(1, 40, weight_seed=4, seed=5)
    test = synth_logreg(1, 2000, weight_seed=4, seed=6)
    clients = [train.subset(np.arange(k, 40, 4)) for k in range(4)]

    def nll(q):
        p = predict_logistic(q, test.inputs)
        return log_loss(np.column_stack([1 - p, p]), test.targets)

    ev = lambda q: {"test_nll": nll(q)}  # noqa: E731
    seq = server.run(server.init(prior, 4), Schedule("sequential_fixed", rounds=200, tol=1e-11), clients, model,
                     TIGHT, ev)
    syn = server.run(server.init(prior, 4), Schedule("synchronous", rho=0.25, rounds=1000, tol=1e-11), clients,
                     model, TIGHT, ev)
    traces["logistic2d_sequential"], traces["logistic2d_synchronous"] = seq.trace, syn.trace
    qs = {"sequential": seq.state.q, "synchronous": syn.state.q, "global": global_vi(prior, model, train, TIGHT)}
    names = list(qs)
    nat = max(qs[a].max_abs_diff(qs[b]) for i, a in enumerate(names) for b in names[i + 1:])
    nlls = [nll(q) for q in qs.values()]
    gap = max(nlls) - min(nlls)
    return nat <= 1e-3 and gap <= 1e-4, f"max natural-parameter gap {nat:.1e}, test-NLL spread {gap:.1e}"


def single_step_equivalence(traces):
    data = synth_logreg(1, 40, weight_seed=2, seed=3)
    clients = [data.subset(np.arange(k, 40, 2)) for k in range(2)]
    model = ModelSpec("logistic_regression", 1)
    prior = GaussianMeanField.standard(2)
    worst = {}
    for form, rho in (("gradient", 0.05), ("fixed_point", 0.5)):
        state, q, err = server.init(prior, 2), prior, 0.0
        for _ in range(20):
            state = server.single_step_mode(state, clients, model, form, rho)
            q = global_vi_step(prior, model, data, q, form, rho)
            err = max(err, state.q.max_abs_diff(q))
        worst[form] = err
    ok = all(v <= 1e-12 for v in worst.values())
    return ok, ", ".join(f"{k} max per-step gap {v:.1e}" for k, v in worst.items())


# ---------------------------------------------------------------------------
# 6-8: power EP and the baselines


def _pep_ratios(q_prev, t_prev, data, model, rho=None, estimator=Estimator()):
    problem = LocalProblem(q_prev, t_prev, data, model)
    errors = []
    for alpha in (1e-2, 1e-3, 1e-4):
        _, t = pep_step(q_prev, t_prev, data, model, alpha, rho=rho)
        fp = fixed_point_step(problem, q_prev, alpha if rho is None else rho, estimator=estimator)
        errors.append(float(np.linalg.norm(t.naturals() - fp.naturals())))
    ratios = [errors[0] / errors[1] if errors[1] else float("inf"), errors[1] / errors[2] if errors[2] else
              float("inf")]
    return errors, ratios


def pep_limit(traces):
    errors, ratios = _pep_ratios(PRIOR1, ApproxFactor.unit(1), Dataset([[1.0]], [2.0]), LIN1)
    ok = all(8 <= r <= 12 for r in ratios)
    # the same measurement on a non-conjugate likelihood, reported for context
    data = Dataset([[1.0], [-0.5], [2.0], [0.3]], [1, 0, 1, 1])
    _, logistic = _pep_ratios(GaussianMeanField.from_moments([0.2], [0.8]), ApproxFactor([0.3], [-0.1]), data,
                              LOG1, rho=1.0, estimator=Estimator("quadrature", nodes=200))
    return ok, (f"conjugate errors {', '.join(f'{e:.1e}' for e in errors)}, ratios "
                f"{', '.join(f'{r:.3g}' for r in ratios)}; logistic ratios {', '.join(f'{r:.3g}' for r in logistic)}")


def baseline_identities(traces):
    model = ModelSpec("logistic_regression", 2)
    prior = GaussianMeanField.standard(3)
    cfg = OptimizerConfig(tol=1e-12, max_steps=5000)
    worst = 0.0
    for seed in range(5):
        data = synth_logreg(2, 36, weight_seed=seed, seed=seed + 1)
        clients = [data.subset(np.arange(k, 36, 3)) for k in range(3)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            one = server.run(server.init(prior, 3), Schedule("synchronous", rho=1.0, rounds=1), clients, model, cfg)
        worst = max(worst, bcm(prior, model, clients, "same", cfg).max_abs_diff(one.state.q))
        q_vcl = vcl(prior, model, clients, config=cfg)
        seq = server.run(server.init(prior, 3), Schedule("sequential_fixed", rounds=1), clients, model, cfg)
        worst = max(worst, q_vcl.max_abs_diff(seq.state.q))
        worst = max(worst, streaming_vb(prior, model, clients, rounds=1, config=cfg).max_abs_diff(q_vcl))
    return worst <= 1e-9, f"max natural-parameter gap {worst:.1e} over 5 configs"


def streaming_overcounting(traces):
    one = [Dataset([[1.0]], [2.0])]
    svb = float(-2 * streaming_vb(PRIOR1, LIN1, one, rounds=2).eta2[0])
    pvi = float(-2 * server.run(server.init(PRIOR1, 1), Schedule("sequential_fixed", rounds=2, tol=0.0), one,
                          LIN1).state.q.eta2[0])
    return svb == 3.0 and pvi == 2.0, f"streaming VB precision {svb!r}, PVI precision {pvi!r}"


# ---------------------------------------------------------------------------
# 9-10: the desk-scale inhomogeneous problem

DESK = {"d": 20, "N": 4000, "n_test": 1000, "M": 10, "beta": 0.4, "bias": -1.5}
DESK_LOCAL = OptimizerConfig(tol=1e-4)


def desk_problem(seed: int):
    """Train/test data and clients; kappa sits at its lower bound, so the small clients see only positives."""
    full = synth_logreg(DESK["d"], DESK["N"] + DESK["n_test"], weight_seed=seed, seed=seed + 100, bias=DESK["bias"])
    train = full.subset(np.arange(DESK["N"]))
    test = full.subset(np.arange(DESK["N"], len(full)))
    nu = 1.0 - int(train.targets.sum()) / len(train)
    part = split_beta_kappa(train, DESK["M"], DESK["beta"], -nu / (1.0 - nu), seed)
    return train, test, part.per_client


def desk_ordering(traces):
    model = ModelSpec("logistic_regression", DESK["d"])
    prior = GaussianMeanField.standard(model.param_dim)
    gaps = []
    for seed in range(5):
        train, test, clients = desk_problem(seed)

        def nll(q):
            return log_loss(predictive_probs(model, q, test.inputs), test.targets)

        ref = nll(global_vi(prior, model, train, DESK_LOCAL))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # rho = 0.2 > 1/M is deliberate here
            pvi = server.run(server.init(prior, DESK["M"]), Schedule("synchronous", rho=0.2, rounds=40, tol=1e-4),
                             clients, model, DESK_LOCAL)
        row = [nll(pvi.state.q)] + [nll(bcm(prior, model, clients, v, DESK_LOCAL)) for v in ("same", "split")]
        row.append(nll(vcl(prior, model, clients, config=DESK_LOCAL)))
        gaps.append(np.array(row) - ref)
    mean = np.mean(gaps, axis=0)
    ok = mean[0] <= 0.01 and all(g > 0.02 for g in mean[1:])
    names = ("PVI", "BCM(same)", "BCM(split)", "VCL")
    return ok, "mean test-NLL gap to global VI: " + ", ".join(f"{n} {g:+.4f}" for n, g in zip(names, mean))


def normalizability_guard(traces):
    model = ModelSpec("logistic_regression", DESK["d"])
    prior = GaussianMeanField.standard(model.param_dim)
    undamped, damped, completed = [], [], True
    for seed in range(5):
        _, _, clients = desk_problem(seed)
        for rho, out in ((1.0, undamped), (0.1, damped)):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                try:
                    res = server.run(server.init(prior, DESK["M"]), Schedule("synchronous", rho=rho, rounds=20,
                                                                             tol=1e-4), clients, model, DESK_LOCAL)
                except server.RejectedUnnormalizable:
                    completed = False
                    out.append(-1)
                    continue
            completed &= res.state.q.is_normalizable()
            out.append(res.rejections)
    ok = completed and sum(undamped) >= 1 and all(r == 0 for r in damped)
    return ok, f"rejections per seed at rho=1: {undamped}, at rho=0.1: {damped}; all runs completed: {completed}"


# ---------------------------------------------------------------------------
# 11-13


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def gradient_hygiene(traces):
    rng = np.random.default_rng(11)
    kinds = {"logistic_regression": ModelSpec("logistic_regression", 3),
             "linear_regression": ModelSpec("linear_regression", 3),
             "bnn_classifier": ModelSpec("bnn_classifier", 3, (4,), n_classes=3)}
    worst = {}
    for name, model in kinds.items():
        w_lik = w_hyp = 0.0
        for _ in range(50):
            n = int(rng.integers(5, 20))
            x = rng.standard_normal((n, model.input_dim))
            if name == "linear_regression":
                y = rng.standard_normal(n)
            else:
                y = rng.integers(0, model.n_classes if name == "bnn_classifier" else 2, n)
            data = Dataset(x, y)
            theta = rng.standard_normal(model.param_dim)
            fd = fd_gradient(lambda t: log_lik(model, data, t), theta)
            w_lik = max(w_lik, _rel(grad_log_lik(model, data, theta), fd))

            q = GaussianMeanField.from_moments(rng.normal(0, 1, model.param_dim),
                                               rng.uniform(0.1, 1.5, model.param_dim))
            eps = HyperParams(rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0))
            parts = [data.subset(np.arange(k, n, 3)) for k in range(3)]
            g = hyper_gradient(q, model, parts, eps)
            if name == "linear_regression":
                fd = fd_gradient(lambda h: linreg_free_energy(q, model, data, HyperParams(h[1], h[0])),
                                 [eps.noise_variance, eps.prior_variance])
            else:
                # only the prior term depends on the hyperparameters here
                fd = np.r_[0.0, fd_gradient(lambda h: -kl(q, GaussianMeanField.standard(q.dim, h[0])),
                                            [eps.prior_variance])]
            w_hyp = max(w_hyp, _rel(g, fd))
        worst[name] = (w_lik, w_hyp)
    ok = all(a <= 1e-4 and b <= 1e-4 for a, b in worst.values())
    return ok, "; ".join(f"{k} grad {a:.1e} hyper {b:.1e}" for k, (a, b) in worst.items())


def noise_variance_recovery(traces):
    data = synth_linreg(1, 200, noise_variance=0.5, seed=0)
    parts = [data.subset(np.arange(k, 200, 4)) for k in range(4)]
    prior = GaussianMeanField.standard(1)
    log_s = 0.0
    for _ in range(500):
        s = float(np.exp(log_s))
        q = exact_posterior(replace(LIN1, noise_variance=s), prior, data)
        step = 2.0 / len(data) * s * hyper_gradient(q, LIN1, parts, HyperParams(1.0, s))[0]
        log_s += step
        if abs(step) < 1e-12:
            break
    found = float(np.exp(log_s))
    best = minimize_scalar(lambda ls: -linreg_log_marginal(replace(LIN1, noise_variance=float(np.exp(ls))), prior,
                                                           data), bounds=(-6, 3), method="bounded",
                           options={"xatol": 1e-10})
    oracle = float(np.exp(best.x))
    ok = abs(found - 0.5) <= 0.05 and abs(found - oracle) <= 0.1 * oracle
    return ok, f"recovered noise variance {found:.4f}, max-marginal {oracle:.4f}, true 0.5"


def async_sanity(traces):
    sched = Schedule("asynchronous", rho=0.5, rounds=200, tol=1e-14, slowdown=(1.0, 10.0))
    res = server.run(server.init(PRIOR1, 2), sched, TWO, LIN1, evaluate=_kl_to(THIRD))
    sync = server.run(server.init(PRIOR1, 2), Schedule("synchronous", rho=0.5, rounds=200, tol=1e-14), TWO, LIN1)
    traces["async_slow_client"] = res.trace
    counts = np.bincount([r["client"] for r in res.trace.records[1:]], minlength=2)
    gap = res.state.q.max_abs_diff(sync.state.q)
    ok = counts[1] >= 1 and counts[0] >= 8 * counts[1] and gap <= 1e-4
    return ok, f"commits fast/slow {counts[0]}/{counts[1]}, gap to synchronous {gap:.1e}"


# ---------------------------------------------------------------------------
# 14 and the runner

TRACE_CRITERIA = (1, 4, 13)


def write_traces(traces, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in sorted(traces):
        path = out / f"{name}.jsonl"
        path.write_text(traces[name].to_jsonl())
        paths.append(path)
    return paths


def trace_determinism(traces):
    with tempfile.TemporaryDirectory() as tmp:
        dirs = []
        for rep in range(2):
            produced = {}
            for n in TRACE_CRITERIA:
                CRITERIA[n][1](produced)
            write_traces(produced, Path(tmp) / str(rep))
            dirs.append(Path(tmp) / str(rep))
        names = sorted(p.name for p in dirs[0].iterdir())
        match, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], names, shallow=False)
    ok = bool(names) and not mismatch and not errors
    return ok, f"{len(match)} of {len(names)} trace files byte-identical across two runs"


CRITERIA = {
    1: ("conjugate exactness", conjugate_exactness, 3.0),
    2: ("local free energy vs tilted mass", tilted_identity, 10.0),
    3: ("local free energies sum to global", free_energy_sum, 10.0),
    4: ("cross-method agreement", cross_method_agreement, 60.0),
    5: ("single-step equivalences", single_step_equivalence, 30.0),
    6: ("power EP small-alpha limit", pep_limit, 5.0),
    7: ("baseline identities", baseline_identities, 20.0),
    8: ("streaming VB over-counting", streaming_overcounting, None),
    9: ("desk-scale method ordering", desk_ordering, 300.0),
    10: ("synchronous normalizability guard", normalizability_guard, None),
    11: ("gradient hygiene", gradient_hygiene, 30.0),
    12: ("noise-variance recovery", noise_variance_recovery, 10.0),
    13: ("asynchronous slow client", async_sanity, 10.0),
    14: ("trace determinism", trace_determinism, None),
}


def run_criterion(number: int, traces=None) -> CriterionResult:
    name, fn, budget = CRITERIA[number]
    traces = {} if traces is None else traces
    t0 = time.perf_counter()
    try:
        passed, detail = fn(traces)
    except Exception as exc:  # a crash is a failed criterion, reported with its cause
        passed, detail = False, f"raised {type(exc).__name__}: {exc}"
    secs = time.perf_counter() - t0
    if budget is not None and secs >= budget:
        passed, detail = False, detail + f"; over the {budget:g} s budget"
    return CriterionResult(number, name, bool(passed), detail, secs, budget)


def run_all(numbers=None, traces=None) -> list[CriterionResult]:
    traces = {} if traces is None else traces
    return [run_criterion(n, traces) for n in (numbers or sorted(CRITERIA))]
