"""Datasets, loaders, synthetic generators and client partitioning schemes."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


class ParseError(ValueError):
    pass


class MissingTarget(ValueError):
    pass


class InfeasibleSplit(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        self.targets = np.asarray(self.targets).reshape(-1)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets disagree on N")
        if not np.all(np.isfinite(self.inputs)) or not np.all(np.isfinite(self.targets.astype(float))):
            raise ValueError("dataset contains non-finite entries")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.inputs.shape[1])]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.targets[idx], list(self.feature_names))

    @classmethod
    def empty(cls, n_features: int) -> "Dataset":
        return cls(np.zeros((0, n_features)), np.zeros(0), [])

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        return cls(np.concatenate([p.inputs for p in parts]),
                   np.concatenate([p.targets for p in parts]),
                   list(parts[0].feature_names))


def train_test_split(data: Dataset, test_fraction: float, seed) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(data))
    n_test = int(round(test_fraction * len(data)))
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


def standardize(train: Dataset, *others: Dataset, columns=None):
    """Scale columns to zero mean / unit variance using statistics of ``train`` only."""
    cols = np.arange(train.n_features) if columns is None else np.asarray(columns, dtype=int)
    mu = train.inputs[:, cols].mean(axis=0)
    sd = train.inputs[:, cols].std(axis=0)
    sd[sd == 0] = 1.0
    out = []
    for d in (train,) + others:
        x = d.inputs.copy()
        x[:, cols] = (x[:, cols] - mu) / sd
        out.append(Dataset(x, d.targets, list(d.feature_names), dict(d.provenance)))
    return out[0] if not others else tuple(out)


# ---------------------------------------------------------------------------
# file formats


def _parse_float(s: str):
    try:
        return float(s)
    except ValueError:
        return None


def load_csv(path, target_column: str = "target", categorical: Sequence[str] = (),
             task: str = "classification", standardize_inputs: bool = True) -> Dataset:
    """Read a CSV with a header row.

    A column is categorical if it is listed in ``categorical`` or none of its
    entries parse as numbers; categorical columns become one-hot blocks. A
    numeric column with a stray non-numeric entry is a ParseError.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header, body = [h.strip() for h in rows[0]], rows[1:]
    if target_column not in header:
        raise MissingTarget(f"{path}: no column named {target_column!r}")
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")

    columns, names = [], []
    for j, name in enumerate(header):
        if name == target_column:
            continue
        raw = [row[j].strip() for row in body]
        parsed = [_parse_float(v) for v in raw]
        if name in categorical or all(p is None for p in parsed):
            levels = sorted(set(raw))
            for lev in levels:
                columns.append(np.array([1.0 if v == lev else 0.0 for v in raw]))
                names.append(f"{name}={lev}")
            continue
        for r, (p, v) in enumerate(zip(parsed, raw), start=2):
            if p is None:
                raise ParseError(f"{path}: row {r}, column {name!r}: non-numeric value {v!r}")
        columns.append(np.array(parsed))
        names.append(name)

    numeric = [i for i, n in enumerate(names) if "=" not in n]
    x = np.stack(columns, axis=1) if columns else np.zeros((len(body), 0))

    t_raw = [row[header.index(target_column)].strip() for row in body]
    t_num = [_parse_float(v) for v in t_raw]
    if task == "regression":
        if any(v is None for v in t_num):
            raise ParseError(f"{path}: non-numeric regression target")
        y = np.array(t_num)
    else:
        if all(v is not None for v in t_num):
            levels = sorted(set(t_num))
        else:
            levels = sorted(set(t_raw))
            t_num = t_raw
        lookup = {lev: i for i, lev in enumerate(levels)}
        y = np.array([lookup[v] for v in t_num], dtype=np.int64)

    data = Dataset(x, y, names, {"source": str(path), "target_column": target_column})
    if standardize_inputs and numeric:
        data = standardize(data, columns=numeric)
        data.provenance = {"source": str(path), "target_column": target_column}
    return data


def read_idx(path) -> np.ndarray:
    """Read an IDX file (the MNIST container format); supports ubyte payloads."""
    raw = Path(path).read_bytes()
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (0x00000801, 0x00000803):
        raise ParseError(f"{path}: unsupported IDX magic {magic:#010x}")
    ndim = magic & 0xFF
    shape = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    payload = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if payload.size != math.prod(shape):
        raise ParseError(f"{path}: payload size {payload.size} does not match shape {shape}")
    return payload.reshape(shape)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * arr.ndim, *arr.shape))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# synthetic data


def synth_logreg(d: int, N: int, weight_seed=0, noise: float = 1.0, seed=0,
                 bias: float = 0.0, weight_scale: float = 1.0) -> Dataset:
    """Standard-normal inputs with labels ~ Bernoulli(sigmoid(x~ . w* / noise)).

    ``noise == 0`` thresholds the logits, giving a linearly separable set.
    """
    if d < 1 or N < 1:
        raise ValueError("d and N must be positive")
    w = np.random.default_rng(weight_seed).normal(0.0, weight_scale, size=d)
    w_full = np.concatenate([[bias], w])
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((N, d))
    logits = bias + x @ w
    if noise == 0:
        y = (logits > 0).astype(np.int64)
    else:
        u = rng.random(N)
        y = (u < 1.0 / (1.0 + np.exp(-logits / noise))).astype(np.int64)
    return Dataset(x, y, provenance={"generator": "synth_logreg", "w_star": w_full.tolist(),
                                     "noise": noise, "weight_seed": weight_seed, "seed": seed})


def synth_linreg(d: int, N: int, noise_variance: float = 1.0, seed=0, orthogonal=False) -> Dataset:
    rng = np.random.default_rng(seed)
    if orthogonal:
        if N < d:
            raise ValueError("orthogonal design needs N >= d")
        q, _ = np.linalg.qr(rng.standard_normal((N, d)))
        x = q * np.sqrt(N)
    else:
        x = rng.standard_normal((N, d))
    w = rng.standard_normal(d)
    y = x @ w + rng.normal(0.0, np.sqrt(noise_variance), N)
    return Dataset(x, y, provenance={"generator": "synth_linreg", "w_star": w.tolist(),
                                     "noise_variance": noise_variance, "seed": seed})


def synth_blobs(n_classes: int = 10, N: int = 2000, d: int = 20, spread: float = 1.0,
                separation: float = 3.0, seed=0) -> Dataset:
    """Gaussian-blob stand-in for a 10-class image task; class sizes are equal."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation / np.sqrt(2.0), size=(n_classes, d))
    per = N // n_classes
    y = np.repeat(np.arange(n_classes), per)
    y = np.concatenate([y, np.arange(N - y.size) % n_classes])
    x = centers[y] + rng.normal(0.0, spread, size=(N, d))
    perm = rng.permutation(N)
    return Dataset(x[perm], y[perm], provenance={"generator": "synth_blobs", "seed": seed})


def load_mnist_or_surrogate(data_dir=None, n: int = 2000, seed=0) -> tuple[Dataset, str]:
    """Return (dataset, source). Uses IDX files under ``data_dir`` when present."""
    if data_dir is not None:
        root = Path(data_dir)
        img, lab = root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte"
        if img.exists() and lab.exists():
            x = read_idx(img).reshape(-1, 28 * 28).astype(np.float64) / 255.0
            y = read_idx(lab).astype(np.int64)
            idx = np.sort(np.random.default_rng(seed).permutation(len(y))[:n])
            return Dataset(x[idx], y[idx]), "idx"
    return synth_blobs(10, n, seed=seed), "surrogate"


# ---------------------------------------------------------------------------
# partitions


@dataclass
class SplitSpec:
    scheme: str = "homogeneous"
    M: int = 10
    beta: float = 0.0
    kappa: float = 0.0
    labels_per_client: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("homogeneous", "beta_kappa", "kmeans", "label_shard"):
            raise ValueError(f"unknown split scheme {self.scheme!r}")
        if self.M < 1:
            raise ValueError("M must be >= 1")


@dataclass
class Partition:
    assignments: np.ndarray
    per_client: list[Dataset]
    spec: dict

    @property
    def M(self) -> int:
        return len(self.per_client)

    @property
    def sizes(self) -> list[int]:
        return [len(d) for d in self.per_client]

    def to_json(self) -> str:
        return json.dumps({"assignments": [int(a) for a in self.assignments], "spec": self.spec})

    @classmethod
    def from_json(cls, text: str, data: Dataset) -> "Partition":
        obj = json.loads(text)
        return _build_partition(data, np.asarray(obj["assignments"]), obj["spec"], M=obj["spec"].get("M"))


def _build_partition(data: Dataset, assignments: np.ndarray, spec: dict, M=None) -> Partition:
    assignments = np.asarray(assignments, dtype=np.int64)
    M = int(M if M is not None else assignments.max() + 1)
    clients = [data.subset(np.flatnonzero(assignments == m)) for m in range(M)]
    if any(len(c) == 0 for c in clients):
        raise InfeasibleSplit("split produced an empty client")
    return Partition(assignments, clients, dict(spec))


def split_homogeneous(data: Dataset, M: int, seed=0) -> Partition:
    if M > len(data):
        raise InfeasibleSplit("more clients than datapoints")
    perm = np.random.default_rng(seed).permutation(len(data))
    a = np.empty(len(data), dtype=np.int64)
    for m, chunk in enumerate(np.array_split(perm, M)):
        a[chunk] = m
    return _build_partition(data, a, asdict(SplitSpec("homogeneous", M, seed=seed)), M)


def beta_kappa_plan(N: int, n_pos: int, M: int, beta: float, kappa: float):
    """Client sizes and positive counts for the size/label imbalance split.

    The label formula is applied to the fraction of *negative* labels,
    ``nu_small = nu + (1 - nu) * kappa``, which is the reading under which
    kappa = -nu / (1 - nu) yields all-positive small clients and kappa = 1
    all-negative ones. kappa outside that interval is clipped with a warning.
    """
    if M % 2:
        raise InfeasibleSplit("beta/kappa split needs an even number of clients")
    nu = 1.0 - n_pos / N
    lo = -nu / (1.0 - nu) if nu < 1 else -np.inf
    if not lo <= kappa <= 1.0:
        warnings.warn(f"kappa={kappa} outside feasible [{lo:.4f}, 1]; clipping", stacklevel=3)
        kappa = float(np.clip(kappa, lo, 1.0))
    half = M // 2
    n_small = int(math.floor(N / M * (1.0 - beta)))
    if n_small < 1:
        raise InfeasibleSplit("beta leaves small clients empty")
    rest = N - half * n_small
    large_sizes = [rest // half + (1 if i < rest % half else 0) for i in range(half)]
    nu_small = float(np.clip(nu + (1.0 - nu) * kappa, 0.0, 1.0))
    pos_small = int(round(n_small * (1.0 - nu_small)))
    pos_large_total = n_pos - half * pos_small
    if pos_large_total < 0 or half * (n_small - pos_small) > N - n_pos:
        raise InfeasibleSplit("requested label counts exceed availability")
    pos_large = [pos_large_total // half + (1 if i < pos_large_total % half else 0) for i in range(half)]
    for n_l, p_l in zip(large_sizes, pos_large):
        if p_l > n_l:
            raise InfeasibleSplit("large client needs more positives than its size")
    sizes = [n_small] * half + large_sizes
    positives = [pos_small] * half + pos_large
    return sizes, positives, kappa


def split_beta_kappa(data: Dataset, M: int, beta: float, kappa: float, seed=0) -> Partition:
    y = np.asarray(data.targets).astype(np.int64)
    if not set(np.unique(y)).issubset({0, 1}):
        raise InfeasibleSplit("beta/kappa split requires binary targets")
    N = len(data)
    sizes, positives, kappa_used = beta_kappa_plan(N, int(y.sum()), M, beta, kappa)
    rng = np.random.default_rng(seed)
    # stable (label, index) order before the seeded shuffle
    pos = rng.permutation(np.flatnonzero(y == 1))
    neg = rng.permutation(np.flatnonzero(y == 0))
    a = np.empty(N, dtype=np.int64)
    ip = ineg = 0
    for m, (n_m, p_m) in enumerate(zip(sizes, positives)):
        a[pos[ip:ip + p_m]] = m
        a[neg[ineg:ineg + n_m - p_m]] = m
        ip += p_m
        ineg += n_m - p_m
    spec = asdict(SplitSpec("beta_kappa", M, beta=beta, kappa=kappa, seed=seed))
    spec["kappa_used"] = kappa_used
    return _build_partition(data, a, spec, M)


def _kmeans_pp(x: np.ndarray, k: int, rng) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, seed=0, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; empty clusters take the farthest point."""
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    labels = None
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new = dist.argmin(axis=1)
        for c in range(k):
            if not np.any(new == c):
                far = int(dist[np.arange(len(x)), new].argmax())
                new[far] = c
                dist[far, :] = np.inf
                dist[far, c] = 0.0
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([x[labels == c].mean(axis=0) for c in range(k)])
    return labels


def split_kmeans(data: Dataset, M: int, seed=0) -> Partition:
    if M > len(data):
        raise InfeasibleSplit("more clients than datapoints")
    labels = kmeans(data.inputs, M, seed=seed)
    return _build_partition(data, labels, asdict(SplitSpec("kmeans", M, seed=seed)), M)


def split_label_shard(data: Dataset, M: int, labels_per_client: int, seed=0) -> Partition:
    """Sort by label, cut into M * labels_per_client shards, deal them out.

    When the number of classes divides the shard count, each label is cut into
    its own share of shards, so no shard straddles two labels even if class
    counts are uneven; otherwise the sorted data are cut into equal shards.
    Shards are dealt one per consecutive block of M shards, each block in a
    seeded random order, so with labels_per_client equal to the number of
    classes every client gets one shard of every label.
    """
    n_shards = M * labels_per_client
    N = len(data)
    if n_shards > N:
        raise InfeasibleSplit("more shards than datapoints")
    y = np.asarray(data.targets).astype(np.int64)
    order = np.lexsort((np.arange(N), y))
    labels = np.unique(y)
    per_label, rem = divmod(n_shards, labels.size)
    if rem == 0 and all(np.sum(y == k) >= per_label for k in labels):
        shards = [s for k in labels for s in np.array_split(order[y[order] == k], per_label)]
    else:
        shards = np.array_split(order, n_shards)
    rng = np.random.default_rng(seed)
    a = np.empty(N, dtype=np.int64)
    for block in range(labels_per_client):
        for m, j in enumerate(rng.permutation(M)):
            a[shards[block * M + j]] = m
    part = _build_partition(data, a, asdict(SplitSpec("label_shard", M, labels_per_client=labels_per_client,
                                                      seed=seed)), M)
    for m, c in enumerate(part.per_client):
        if len(np.unique(c.targets)) > labels_per_client:
            raise InfeasibleSplit(f"client {m} received shards spanning more than "
                                  f"{labels_per_client} labels")
    return part


def make_split(data: Dataset, spec: SplitSpec) -> Partition:
    if spec.scheme == "homogeneous":
        return split_homogeneous(data, spec.M, spec.seed)
    if spec.scheme == "beta_kappa":
        return split_beta_kappa(data, spec.M, spec.beta, spec.kappa, spec.seed)
    if spec.scheme == "kmeans":
        return split_kmeans(data, spec.M, spec.seed)
    return split_label_shard(data, spec.M, spec.labels_per_client, spec.seed)
