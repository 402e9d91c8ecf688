"""Evaluation metrics and mean-shift baselines.

Distribution metrics (MMD², W2, Fréchet distance) are computed on a PCA basis
fit to the true cells only, in log1p space. Everything here is pure numpy/scipy
and deterministic given its inputs; the only randomness is the seeded
equal-size subsampling for W2.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist, pdist

from .setdata import CountDataset


class MetricError(ValueError):
    pass


def _fingerprint(x: np.ndarray) -> str:
    x = np.ascontiguousarray(x, dtype=np.float64)
    return hashlib.sha256(str(x.shape).encode() + x.tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaBasis:
    components: np.ndarray  # [k, D], orthonormal rows
    mean: np.ndarray  # [D]
    explained_variance: np.ndarray  # [k]
    fingerprint: str

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(x, k: int = 30) -> PcaBasis:
    """Top-k eigenvectors of the centered covariance of ``x`` [n, D].

    Each component is flipped so its largest-magnitude entry is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if not (n > k and d >= k and k >= 1):
        raise MetricError(f"pca needs n > k and D >= k (n={n}, D={d}, k={k})")
    mean = x.mean(0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    evals, w = evals[order], evecs[:, order].T
    tol = max(evals[0], 0.0) * max(n, d) * np.finfo(float).eps
    if evals[-1] <= tol:
        raise MetricError(f"data rank is below k={k}")
    idx = np.argmax(np.abs(w), axis=1)
    signs = np.sign(w[np.arange(k), idx])
    w = w * signs[:, None]
    return PcaBasis(w, mean, evals, _fingerprint(x))


def pca_project(x, basis: PcaBasis) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (x - basis.mean) @ basis.components.T


# ---------------------------------------------------------------------------
# distribution distances


@dataclass
class KernelConfig:
    bandwidth: float | None = None  # None selects the median heuristic

    def validate(self):
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise MetricError("kernel bandwidth must be positive")


def median_bandwidth(x, y) -> float:
    """Median pairwise Euclidean distance over the pooled sample."""
    pooled = np.vstack([np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)])
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def mmd2_rbf(x, y, kc: KernelConfig | None = None) -> float:
    """Unbiased MMD² with kernel ``exp(-|a - b|² / (2 sigma²))``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise MetricError("mmd2 needs at least two points per sample")
    kc = kc or KernelConfig()
    kc.validate()
    sigma = kc.bandwidth if kc.bandwidth is not None else median_bandwidth(x, y)
    g = -0.5 / sigma**2
    kxx = np.exp(g * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(g * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(g * cdist(x, y, "sqeuclidean"))
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def w2_discrete(x, y) -> float:
    """sqrt of the minimum mean squared cost over one-to-one couplings."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"w2 needs equal-size samples, got {x.shape} and {y.shape}")
    cost = cdist(x, y, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(math.sqrt(max(cost[rows, cols].mean(), 0.0)))


def subsample_equal(x, y, rng: np.random.Generator):
    """Subsample the larger set to the smaller set's size (no replacement)."""
    n = min(len(x), len(y))
    xi = np.sort(rng.choice(len(x), n, replace=False)) if len(x) > n else np.arange(n)
    yi = np.sort(rng.choice(len(y), n, replace=False)) if len(y) > n else np.arange(n)
    return np.asarray(x)[xi], np.asarray(y)[yi]


def _sqrtm_psd(a):
    evals, evecs = np.linalg.eigh((a + a.T) / 2)
    return (evecs * np.sqrt(np.clip(evals, 0, None))) @ evecs.T


def frechet_from_moments(mu1, s1, mu2, s2, tol: float = 1e-8) -> float:
    mu1, mu2 = np.atleast_1d(mu1).astype(float), np.atleast_1d(mu2).astype(float)
    s1, s2 = np.atleast_2d(s1).astype(float), np.atleast_2d(s2).astype(float)
    r1 = _sqrtm_psd(s1)
    inner = r1 @ s2 @ r1
    evals = np.linalg.eigvalsh((inner + inner.T) / 2)
    if not np.all(np.isfinite(evals)):
        raise MetricError("matrix square root did not converge")
    scale = max(1.0, float(np.abs(evals).max()))
    if evals.min() < -tol * scale:
        raise MetricError(f"covariance product has a negative eigenvalue {evals.min():.3g}")
    tr_sqrt = np.sqrt(np.clip(evals, 0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)


def frechet_distance(x, y) -> float:
    """Fréchet distance between Gaussian fits of ``x`` [n, k] and ``y`` [m, k]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    k = x.shape[1]
    if len(x) <= k or len(y) <= k:
        raise MetricError(f"frechet distance needs more than {k} points per sample")
    return frechet_from_moments(x.mean(0), np.cov(x, rowvar=False), y.mean(0), np.cov(y, rowvar=False))


# ---------------------------------------------------------------------------
# reconstruction metrics


def pearson_per_gene(x_true, x_pred):
    """Column-wise PCC; returns (values, valid) where invalid columns have zero variance."""
    a = np.asarray(x_true, dtype=np.float64)
    b = np.asarray(x_pred, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    ac = a - a.mean(0)
    bc = b - b.mean(0)
    sa = np.sqrt((ac**2).sum(0))
    sb = np.sqrt((bc**2).sum(0))
    valid = (sa > 0) & (sb > 0)
    vals = np.full(a.shape[1], np.nan)
    vals[valid] = (ac[:, valid] * bc[:, valid]).sum(0) / (sa[valid] * sb[valid])
    return vals, valid


def pearson(x_true, x_pred) -> float:
    """PCC averaged over columns with nonzero variance in both inputs."""
    vals, valid = pearson_per_gene(x_true, x_pred)
    if not valid.any():
        raise MetricError("every column has zero variance")
    return float(vals[valid].mean())


def mse(x_true, x_pred) -> float:
    a = np.asarray(x_true, dtype=np.float64)
    b = np.asarray(x_pred, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).mean())


def recon_error(dataset: CountDataset, model) -> float:
    """Mean over cells of the NB negative log-likelihood of the reconstruction."""
    from .vae import reconstruct

    _, ll = reconstruct(model, dataset)
    return float(-np.mean(ll))


def reconstruction_metrics(dataset: CountDataset, model, seed: int | None = None) -> "MetricReport":
    """RE plus PCC and MSE between log1p counts and log1p reconstructed means."""
    from .vae import reconstruct

    means, ll = reconstruct(model, dataset)
    x = np.log1p(dataset.dense_counts())
    xh = np.log1p(means)
    vals, valid = pearson_per_gene(x, xh)
    n = len(dataset)
    rep = MetricReport()
    rep.add("RE", float(-np.mean(ll)), n, n, seed)
    rep.add("PCC", float(vals[valid].mean()), n, n, seed, skipped_genes=int((~valid).sum()))
    rep.add("MSE", mse(x, xh), n, n, seed)
    return rep


# ---------------------------------------------------------------------------
# baselines


def _group_means(x, keys):
    groups: dict[Any, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    return {k: x[idx].mean(0) for k, idx in groups.items()}


def perturb_mean_baseline(train: CountDataset, test: CountDataset, context: str = "cell_type",
                          perturbation: str = "perturbation", control: str = "ctrl") -> np.ndarray:
    """Predict ``mu_c^ctrl + delta_p`` for each test cell, in count space.

    ``delta_p`` averages ``mu_{c,p} - mu_c^ctrl`` over the context types seen
    with perturbation p in training; ``delta_ctrl`` is zero.
    """
    x = train.dense_counts().astype(np.float64)
    ctx = train.labels(context)
    pert = train.labels(perturbation)
    means = _group_means(x, list(zip(ctx, pert)))
    ctrl = {c: mu for (c, p), mu in means.items() if p == control}
    shifts: dict[str, list[np.ndarray]] = {}
    for (c, p), mu in means.items():
        if p != control and c in ctrl:
            shifts.setdefault(p, []).append(mu - ctrl[c])
    delta = {p: np.mean(v, axis=0) for p, v in shifts.items()}
    out = np.empty((len(test), test.n_genes))
    for i, (c, p) in enumerate(zip(test.labels(context), test.labels(perturbation))):
        if c not in ctrl:
            raise MetricError(f"no control population for {context}={c!r}")
        if p == control:
            out[i] = ctrl[c]
        elif p in delta:
            out[i] = ctrl[c] + delta[p]
        else:
            raise MetricError(f"perturbation {p!r} never seen against a control in training")
    return out


def context_mean_baseline(train: CountDataset, test: CountDataset, context: str = "cell_type",
                          perturbation: str = "perturbation", control: str = "ctrl") -> np.ndarray:
    """Perturbed test cells get their type's mean over perturbed training cells;
    control test cells are passed through unchanged."""
    x = train.dense_counts().astype(np.float64)
    perturbed = train.labels(perturbation) != control
    ctx = train.labels(context)
    means = _group_means(x[perturbed], list(ctx[perturbed]))
    xt = test.dense_counts().astype(np.float64)
    out = xt.copy()
    for i, (c, p) in enumerate(zip(test.labels(context), test.labels(perturbation))):
        if p == control:
            continue
        if c not in means:
            raise MetricError(f"{context}={c!r} has no perturbed training cells")
        out[i] = means[c]
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricEntry:
    name: str
    value: float
    n_x: int
    n_y: int
    seed: int | None = None
    basis: str | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class MetricReport:
    entries: list[MetricEntry] = field(default_factory=list)

    def add(self, name, value, n_x, n_y, seed=None, basis=None, **meta):
        value = float(value)
        if not math.isfinite(value):
            raise MetricError(f"metric {name} is not finite ({value})")
        self.entries.append(MetricEntry(name, value, int(n_x), int(n_y), seed, basis, meta))
        return self

    def extend(self, other: "MetricReport", prefix: str = ""):
        for e in other.entries:
            self.entries.append(MetricEntry(prefix + e.name, e.value, e.n_x, e.n_y, e.seed, e.basis, dict(e.meta)))
        return self

    def __getitem__(self, name) -> float:
        for e in self.entries:
            if e.name == name:
                return e.value
        raise KeyError(name)

    def to_dict(self):
        return {"metrics": [asdict(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, d):
        return cls([MetricEntry(**e) for e in d["metrics"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "value", "n_x", "n_y", "seed", "basis", "meta"])
        for e in self.entries:
            w.writerow([e.name, repr(e.value), e.n_x, e.n_y, "" if e.seed is None else e.seed,
                        e.basis or "", json.dumps(e.meta, sort_keys=True)])
        return buf.getvalue()

    def format(self) -> str:
        width = max((len(e.name) for e in self.entries), default=4)
        return "\n".join(f"{e.name:<{width}}  {e.value:.6g}" for e in self.entries)

    def write(self, stem):
        """Write ``<stem>.json`` and ``<stem>.csv``."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        for suffix, text in ((".json", self.to_json()), (".csv", self.to_csv())):
            path = stem.with_suffix(suffix)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_text(text)
            tmp.replace(path)


def generation_metrics(x_true, x_gen, basis: PcaBasis | None = None, k: int = 30, seed: int = 0,
                       kc: KernelConfig | None = None, prefix: str = "") -> MetricReport:
    """W2, MMD² and FD between true and generated count matrices.

    Both are log1p-transformed and projected on a PCA basis fit to the true
    cells (or the given basis, which must come from true data).
    """
    x_true = np.log1p(np.asarray(x_true, dtype=np.float64))
    x_gen = np.log1p(np.asarray(x_gen, dtype=np.float64))
    basis = basis or pca_fit(x_true, k)
    a = pca_project(x_true, basis)
    b = pca_project(x_gen, basis)
    rep = MetricReport()
    n, m = len(a), len(b)
    sa, sb = subsample_equal(a, b, np.random.default_rng(seed))
    rep.add(prefix + "W2", w2_discrete(sa, sb), len(sa), len(sb), seed, basis.fingerprint)
    rep.add(prefix + "MMD2_RBF", mmd2_rbf(a, b, kc), n, m, seed, basis.fingerprint)
    rep.add(prefix + "FD", frechet_distance(a, b), n, m, seed, basis.fingerprint)
    return rep


__all__ = [
    "MetricError", "PcaBasis", "pca_fit", "pca_project", "KernelConfig", "median_bandwidth", "mmd2_rbf",
    "w2_discrete", "subsample_equal", "frechet_from_moments", "frechet_distance", "pearson_per_gene",
    "pearson", "mse", "recon_error", "reconstruction_metrics", "perturb_mean_baseline",
    "context_mean_baseline", "MetricEntry", "MetricReport", "generation_metrics",
]
