"""Experiment orchestration: data and model construction, metrics, traces and plot tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import baselines, server
from .config import RunConfig
from .data import (Dataset, load_csv, load_mnist_or_surrogate, make_split, standardize, synth_blobs, synth_linreg,
                   synth_logreg, train_test_split)
from .expfam import GaussianMeanField, kl_terms
from .localopt import global_free_energy
from .models import Estimator, ModelSpec, design, predictive_probs

log = logging.getLogger(__name__)

TRACE_FIELDS = ("i", "comms", "logical_time", "client", "free_energy", "test_nll", "test_err", "pruned_count",
                "rho_effective")
X_AXES = ("comms", "logical_time")
Y_AXES = ("test_nll", "test_err", "free_energy", "pruned_count", "train_nll")


class SchemaMismatch(ValueError):
    pass


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# metrics


def pruned_count(q: GaussianMeanField, prior: GaussianMeanField, threshold: float = 0.1) -> int:
    """Coordinates whose marginal KL to the prior is below ``threshold`` (or which equal the prior exactly)."""
    if q.dim != prior.dim:
        raise ValueError("dimension mismatch")
    same = (q.eta1 == prior.eta1) & (q.eta2 == prior.eta2)
    return int(np.sum((kl_terms(q, prior) < threshold) | same))


def log_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability assigned to the observed labels."""
    labels = np.asarray(labels, dtype=np.int64)
    return float(-np.mean(np.log(probs[np.arange(labels.size), labels])))


def error_rate(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) != np.asarray(labels, dtype=np.int64)))


def regression_metrics(model: ModelSpec, q: GaussianMeanField, data: Dataset) -> tuple[float, float]:
    x = design(model, data.inputs)
    mean = x @ q.mean
    var = (x**2) @ q.var + model.noise_variance
    r = data.targets - mean
    nll = float(np.mean(0.5 * np.log(2 * np.pi * var) + r**2 / (2 * var)))
    return nll, float(np.mean(r**2))


def make_evaluator(model: ModelSpec, prior: GaussianMeanField, train: Dataset, test: Dataset,
                   mc_samples: int = 100, prune_threshold: float = 0.1, seed: int = 0):
    estimator = Estimator(samples=max(mc_samples, 1), seed=derive_seed(seed, 99))

    def nll_err(q, data):
        if len(data) == 0:
            return float("nan"), float("nan")
        if model.kind == "linear_regression":
            return regression_metrics(model, q, data)
        probs = predictive_probs(model, q, data.inputs, mc_samples, derive_seed(seed, 98))
        return log_loss(probs, data.targets), error_rate(probs, data.targets)

    def evaluate(q: GaussianMeanField) -> dict:
        train_nll, _ = nll_err(q, train)
        test_nll, test_err = nll_err(q, test)
        return {"train_nll": train_nll, "test_nll": test_nll, "test_err": test_err,
                "free_energy": global_free_energy(model, prior, train, q, estimator),
                "pruned_count": pruned_count(q, prior, prune_threshold)}

    return evaluate


# ---------------------------------------------------------------------------
# construction


def data_root() -> Path | None:
    root = os.environ.get("PVI_DATA_DIR")
    return Path(root) if root else None


def build_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    seed = derive_seed(cfg.seed, 1)
    if d.source == "synth_logreg":
        full = synth_logreg(d.d, d.N, weight_seed=d.weight_seed, noise=d.noise, seed=seed, bias=d.bias,
                            weight_scale=d.weight_scale)
    elif d.source == "synth_linreg":
        full = synth_linreg(d.d, d.N, noise_variance=cfg.model.noise_variance, seed=seed)
    elif d.source == "blobs":
        full = synth_blobs(d.n_classes, d.N, d.d, seed=seed)
    elif d.source == "mnist":
        full, source = load_mnist_or_surrogate(data_root(), d.N, seed)
        log.info("image data source: %s", source)
    else:
        path = Path(d.path)
        if not path.is_absolute() and data_root() is not None:
            path = data_root() / path
        full = load_csv(path, d.target_column, d.categorical, d.task, standardize_inputs=False)
    train, test = train_test_split(full, d.test_fraction, derive_seed(cfg.seed, 2))
    if d.source in ("csv", "mnist"):
        numeric = [i for i, n in enumerate(train.feature_names) if "=" not in n]
        if numeric and len(test):
            train, test = standardize(train, test, columns=numeric)
        elif numeric:
            train = standardize(train, columns=numeric)
    return train, test


def build_model(cfg: RunConfig, train: Dataset) -> ModelSpec:
    m = cfg.model
    n_classes = m.n_classes
    if m.kind == "bnn_classifier":
        n_classes = max(n_classes, int(np.max(train.targets)) + 1)
    return ModelSpec(m.kind, train.n_features, tuple(m.layer_widths), n_classes, m.noise_variance, m.bias,
                     m.probit_constant)


# ---------------------------------------------------------------------------
# running


@dataclass
class ExperimentResult:
    trace: server.MetricsTrace
    q: GaussianMeanField
    manifest: dict
    rejections: int = 0


def content_hash(cfg: RunConfig, train: Dataset) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    h.update(np.ascontiguousarray(train.inputs).tobytes())
    h.update(np.ascontiguousarray(train.targets).tobytes())
    return h.hexdigest()


def run_experiment(cfg: RunConfig, out_dir=None) -> ExperimentResult:
    train, test = build_data(cfg)
    model = build_model(cfg, train)
    prior = GaussianMeanField.standard(model.param_dim, cfg.model.prior_variance)
    split = replace(cfg.split, seed=derive_seed(cfg.seed, cfg.split.seed, 3))
    partition = make_split(train, split)
    clients = partition.per_client
    evaluate = make_evaluator(model, prior, train, test, cfg.eval.mc_samples, cfg.eval.prune_threshold, cfg.seed)
    optimizer = replace(cfg.optimizer, seed=derive_seed(cfg.seed, cfg.optimizer.seed, 4))
    rejections = 0
    if cfg.method.name == "pvi":
        state = server.init(prior, partition.M, seed=cfg.seed)
        evaluator = evaluate
        if cfg.eval.cadence == "round" and cfg.schedule.kind != "synchronous":
            evaluator = _every_round(evaluate, partition.M)
        result = server.run(state, cfg.schedule, clients, model, optimizer, evaluator)
        trace, q, rejections = result.trace, result.state.q, result.rejections
    else:
        spec = baselines.BaselineSpec(cfg.method.name, tuple(cfg.method.order) if cfg.method.order else None,
                                      cfg.method.rounds, optimizer)
        q = baselines.run_baseline(spec, prior, model, clients)
        comms = {"global_vi": 1, "vcl": partition.M, "bcm_same": partition.M, "bcm_split": partition.M,
                 "streaming_vb": partition.M * cfg.method.rounds}[cfg.method.name]
        trace = server.MetricsTrace()
        for i, (qq, c) in enumerate([(prior, 0), (q, comms)]):
            rec = {"i": i, "comms": c, "logical_time": float(i), "client": -1, "staleness": 0,
                   "rho_effective": 1.0, "rejections": 0}
            rec.update(evaluate(qq))
            trace.append(rec)
    manifest = {"config": cfg.to_dict(), "seed": cfg.seed, "content_hash": content_hash(cfg, train),
                "model": {"kind": model.kind, "param_dim": model.param_dim},
                "partition": {"sizes": partition.sizes, "spec": partition.spec},
                "n_train": len(train), "n_test": len(test), "final_q": q.to_dict(), "rejections": rejections}
    out = out_dir if out_dir is not None else (cfg.out or None)
    if out:
        write_outputs(Path(out), trace, manifest)
    return ExperimentResult(trace, q, manifest, rejections)


def _every_round(evaluate, M):
    calls = {"n": 0, "last": None}

    def throttled(q):
        n = calls["n"]
        calls["n"] += 1
        if n % M == 0 or calls["last"] is None:
            calls["last"] = evaluate(q)
        return dict(calls["last"])

    return throttled


def write_outputs(out: Path, trace: server.MetricsTrace, manifest: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.jsonl").write_text(trace.to_jsonl())
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# plot tables


def emit_plot_data(traces: Mapping[tuple[str, int], server.MetricsTrace], x_axis: str, y_axis: str, out_dir,
                   log_scale: bool = False) -> tuple[Path, Path]:
    """Write a tidy CSV (method, seed, x, y) and a per-method mean/std summary keyed by x.

    ``traces`` maps (method, seed) to a trace. A JSON sidecar records axis
    names and whether the figure is meant for a log scale.
    """
    if x_axis not in X_AXES or y_axis not in Y_AXES:
        raise SchemaMismatch(f"unsupported axes {x_axis!r} x {y_axis!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for (method, seed), trace in sorted(traces.items()):
        for rec in trace:
            if x_axis not in rec or y_axis not in rec:
                raise SchemaMismatch(f"trace for {method}/{seed} lacks {x_axis!r} or {y_axis!r}")
            rows.append((method, int(seed), rec[x_axis], rec[y_axis]))
    stem = f"{x_axis}_{y_axis}"
    tidy = out / f"{stem}.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", x_axis, y_axis])
    w.writerows(rows)
    tidy.write_text(buf.getvalue())

    groups: dict[tuple[str, float], list[float]] = {}
    for method, _, x, y in rows:
        groups.setdefault((method, x), []).append(y)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", x_axis, "mean", "std", "n"])
    for (method, x), ys in sorted(groups.items()):
        arr = np.asarray(ys, dtype=float)
        w.writerow([method, x, repr(float(arr.mean())), repr(float(arr.std())), arr.size])
    summary = out / f"{stem}_summary.csv"
    summary.write_text(buf.getvalue())
    (out / f"{stem}_meta.json").write_text(json.dumps(
        {"x": x_axis, "y": y_axis, "log_scale": bool(log_scale)}, sort_keys=True) + "\n")
    return tidy, summary


def load_trace(path) -> server.MetricsTrace:
    return server.MetricsTrace.from_jsonl(Path(path).read_text())


def five_seed_summary(cfg: RunConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4), metric: str = "test_nll"):
    """Final-metric mean and standard deviation over seeds."""
    finals = [run_experiment(replace(cfg, seed=s, out="")).trace.records[-1][metric] for s in seeds]
    return float(np.mean(finals)), float(np.std(finals))
