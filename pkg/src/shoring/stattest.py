"""Kernel two-sample testing (MMD with an RBF kernel) and goodness-of-fit metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import ContractViolation, ConfigError

BANDWIDTH_FLOOR = 1e-8
MAX_BANDWIDTH_POINTS = 2000


@dataclass
class TwoSampleResult:
    mmd_hat: float
    p_value: float
    n_permutations: int
    bandwidth: float
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitMetrics:
    loss: float
    std_r: float
    ptb_at_1pct: float
    ptb_r_at_1pct: float
    r2: float
    pearson: float

    def to_dict(self) -> dict:
        return asdict(self)


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractViolation("samples must be non-empty lists of scalars or vectors")
    if not np.all(np.isfinite(x)):
        raise ContractViolation("samples contain non-finite values")
    return x


def rbf_kernel(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * bandwidth ** 2))


def mmd(sample_a, sample_b, bandwidth: float) -> float:
    """Biased MMD estimate: RKHS distance between the two empirical mean embeddings."""
    a, b = _as_points(sample_a), _as_points(sample_b)
    if a.shape[1] != b.shape[1]:
        raise ContractViolation("samples have different dimensions")
    if not bandwidth > 0:
        raise ContractViolation("bandwidth must be positive")
    sq = (rbf_kernel(a, a, bandwidth).mean() + rbf_kernel(b, b, bandwidth).mean()
          - 2.0 * rbf_kernel(a, b, bandwidth).mean())
    return float(np.sqrt(max(sq, 0.0)))


def median_bandwidth(pooled, seed: int = 0) -> tuple[float, bool]:
    """Median pairwise Euclidean distance; returns (sigma, degenerate)."""
    x = _as_points(pooled)
    if x.shape[0] > MAX_BANDWIDTH_POINTS:
        idx = np.random.default_rng(seed).choice(x.shape[0], MAX_BANDWIDTH_POINTS, replace=False)
        x = x[idx]
    if x.shape[0] < 2:
        return BANDWIDTH_FLOOR, True
    med = float(np.median(pdist(x)))
    if med <= BANDWIDTH_FLOOR:
        return BANDWIDTH_FLOOR, True
    return med, False


def permutation_test(sample_a, sample_b, n_permutations: int = 199, seed: int = 0,
                     bandwidth: float | None = None) -> TwoSampleResult:
    """Permutation p-value ``(1 + #{mmd_perm >= mmd_obs}) / (B + 1)``.

    The bandwidth is fixed once from the pooled original sample. Permutation
    ``b`` draws its shuffle from ``default_rng([seed, b])``.
    """
    if n_permutations < 99:
        raise ContractViolation("need at least 99 permutations")
    a, b = _as_points(sample_a), _as_points(sample_b)
    pooled = np.vstack([a, b])
    if bandwidth is None:
        bandwidth, _ = median_bandwidth(pooled, seed)
    n, total = a.shape[0], pooled.shape[0]
    K = rbf_kernel(pooled, pooled, bandwidth)

    def stats(ind: np.ndarray) -> np.ndarray:
        # ind: (total, P) indicator of membership in the first sample
        other = 1.0 - ind
        KA = K @ ind
        s_aa = np.einsum("ip,ip->p", ind, KA)
        s_ab = np.einsum("ip,ip->p", other, KA)
        s_bb = np.einsum("ip,ip->p", other, K @ other)
        m = total - n
        sq = s_aa / n ** 2 + s_bb / m ** 2 - 2.0 * s_ab / (n * m)
        return np.sqrt(np.maximum(sq, 0.0))

    first = np.zeros((total, 1))
    first[:n, 0] = 1.0
    observed = float(stats(first)[0])
    ind = np.zeros((total, n_permutations))
    for p in range(n_permutations):
        perm = np.random.default_rng([seed, p]).permutation(total)
        ind[perm[:n], p] = 1.0
    permuted = stats(ind)
    # ties count as exceedances; the tolerance absorbs summation-order round-off
    exceed = int(np.sum(permuted >= observed - 1e-12))
    p_value = (1 + exceed) / (n_permutations + 1)
    return TwoSampleResult(observed, p_value, n_permutations, float(bandwidth), seed)


def fit_metrics(predictions, targets) -> FitMetrics:
    y_hat = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(targets, dtype=float).ravel()
    if y.shape != y_hat.shape or y.size < 2:
        raise ContractViolation("predictions and targets need equal lengths >= 2")
    std_y = float(y.std())
    if not std_y > 0:
        raise ConfigError("targets have zero variance; the task is degenerate")
    resid = y_hat - y
    loss = float(np.mean(resid ** 2))
    std_r = abs(float(y_hat.std()) - std_y) / std_y
    ptb = np.abs(resid) / np.maximum(np.abs(y), 1e-8)
    over = ptb > 0.01
    ptb_frac = float(over.mean())
    ptb_r = float(ptb[over].mean()) if over.any() else 0.0
    r2 = 1.0 - float(np.sum(resid ** 2)) / float(np.sum((y - y.mean()) ** 2))
    if y_hat.std() > 0:
        pearson = float(np.corrcoef(y_hat, y)[0, 1])
        pearson = min(1.0, max(-1.0, pearson))
    else:
        pearson = 0.0
    return FitMetrics(loss, std_r, ptb_frac, ptb_r, r2, pearson)
