"""Two-sample statistics and moment diagnostics for particle clouds."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .gaussian_oracle import GaussianState, kl_gaussian

MAX_EXACT_POINTS = 20_000
PERM_POINTS = 1000
DEFAULT_PERMUTATIONS = 200


@dataclass(frozen=True)
class TwoSampleReport:
    statistic: str
    value: float
    std_error: float
    n_a: int
    n_b: int
    p_value: float | None = None
    subsampled: bool = False
    flagged_negative: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _as_samples(x) -> np.ndarray:
    x = np.asarray(getattr(x, "positions", x), dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_samples(a), _as_samples(b)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("two-sample statistics need at least 2 points per sample")
    if a.shape[1] != b.shape[1]:
        raise ValueError("samples must share a dimension")
    return a, b


def _subsample(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    if len(x) <= m:
        return x
    return x[np.sort(rng.choice(len(x), m, replace=False))]


def _permutation_p(pooled_kernel: np.ndarray, n_a: int, stat_fn, n_perm: int, rng) -> float:
    """``(1 + #{perm stat >= observed}) / (1 + n_perm)`` over label shuffles of a pooled Gram matrix."""
    n = len(pooled_kernel)
    labels = np.zeros(n, dtype=bool)
    labels[:n_a] = True
    Z = np.empty((n, n_perm + 1))
    Z[:, 0] = labels
    for j in range(n_perm):
        Z[:, j + 1] = rng.permutation(labels)
    stats = stat_fn(pooled_kernel, Z)
    return (1 + int(np.sum(stats[1:] >= stats[0] - 1e-12))) / (1 + n_perm)


def _pairwise_dist(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    return np.sqrt(np.maximum(d2, 0.0))


def _energy_from_dist(D: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Energy distance for each label column of ``Z`` (1 marks sample A)."""
    W = 1.0 - Z
    na, nb = Z.sum(0), W.sum(0)
    DZ = D @ Z
    DW = D @ W
    return (2 * np.sum(W * DZ, 0) / (na * nb) - np.sum(Z * DZ, 0) / na**2
            - np.sum(W * DW, 0) / nb**2)


def energy_distance(a, b, n_perm: int = DEFAULT_PERMUTATIONS, seed: int = 0,
                    max_points: int = MAX_EXACT_POINTS) -> TwoSampleReport:
    """``2 E|A-B| - E|A-A'| - E|B-B'|`` between empirical measures (V-statistic, so never negative).

    Samples larger than ``max_points`` are subsampled without replacement.
    The standard error uses the first-order Hoeffding projection; the
    permutation p-value (when ``n_perm > 0``) runs on at most 1000 points per side.
    """
    a, b = _check_pair(a, b)
    rng = np.random.default_rng(seed)
    sub = len(a) > max_points or len(b) > max_points
    a_s, b_s = _subsample(a, max_points, rng), _subsample(b, max_points, rng)
    na, nb = len(a_s), len(b_s)
    ab = kernels.pairwise_row_sums(a_s, b_s)
    ba = kernels.pairwise_row_sums(b_s, a_s)
    aa = kernels.pairwise_row_sums(a_s, a_s)
    bb = kernels.pairwise_row_sums(b_s, b_s)
    value = 2 * ab.sum() / (na * nb) - aa.sum() / na**2 - bb.sum() / nb**2
    value = max(float(value), 0.0)
    h_a = 2 * (ab / nb - aa / na)
    h_b = 2 * (ba / na - bb / nb)
    se = math.sqrt(np.var(h_a, ddof=1) / na + np.var(h_b, ddof=1) / nb)
    p = None
    if n_perm > 0:
        pa, pb = _subsample(a_s, PERM_POINTS, rng), _subsample(b_s, PERM_POINTS, rng)
        D = _pairwise_dist(np.concatenate([pa, pb]))
        p = _permutation_p(D, len(pa), _energy_from_dist, n_perm, rng)
    return TwoSampleReport("energy_distance", value, se, len(a), len(b), p, sub)


def median_bandwidth(a: np.ndarray, b: np.ndarray, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    pooled = np.concatenate([_subsample(a, 500, rng), _subsample(b, 500, rng)])
    D = _pairwise_dist(pooled)
    med = float(np.median(D[np.triu_indices(len(D), 1)]))
    return med if med > 0 else 1.0


def _mmd_from_gram(K: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Unbiased MMD^2 for each label column of ``Z`` (1 marks sample A)."""
    W = 1.0 - Z
    na, nb = Z.sum(0), W.sum(0)
    diag = np.diag(K)
    KZ = K @ Z
    kaa = (np.sum(Z * KZ, 0) - diag @ Z) / (na * (na - 1))
    kbb = (np.sum(W * (K @ W), 0) - diag @ W) / (nb * (nb - 1))
    return kaa + kbb - 2 * np.sum(W * KZ, 0) / (na * nb)


def mmd_rbf(a, b, bandwidth: float | None = None, n_perm: int = 0, seed: int = 0,
            max_points: int = 5000) -> TwoSampleReport:
    """Unbiased MMD^2 with kernel ``exp(-|x-y|^2 / (2 h^2))``; ``h`` defaults to the median distance."""
    a, b = _check_pair(a, b)
    rng = np.random.default_rng(seed)
    sub = len(a) > max_points or len(b) > max_points
    a_s, b_s = _subsample(a, max_points, rng), _subsample(b, max_points, rng)
    h = float(bandwidth) if bandwidth is not None else median_bandwidth(a_s, b_s, seed)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    X = np.concatenate([a_s, b_s])
    K = np.exp(-0.5 * _pairwise_dist(X) ** 2 / (h * h))
    na, nb = len(a_s), len(b_s)
    labels = np.zeros(na + nb, dtype=bool)
    labels[:na] = True
    value = float(_mmd_from_gram(K, labels[:, None].astype(float))[0])
    Kaa, Kbb, Kab = K[:na, :na], K[na:, na:], K[:na, na:]
    h_a = 2 * ((Kaa.sum(1) - 1) / (na - 1) - Kab.mean(1))
    h_b = 2 * ((Kbb.sum(1) - 1) / (nb - 1) - Kab.mean(0))
    # second-order term: the first-order projection vanishes when a and b share a law
    Kc = K - K.mean(0)[None, :] - K.mean(1)[:, None] + K.mean()
    var2 = 2 * np.mean(Kc * Kc) * (1 / (na * (na - 1)) + 1 / (nb * (nb - 1)) + 2 / (na * nb))
    se = math.sqrt(np.var(h_a, ddof=1) / na + np.var(h_b, ddof=1) / nb + var2)
    p = None
    if n_perm > 0:
        keep = np.concatenate([np.sort(rng.permutation(na)[:PERM_POINTS]),
                               na + np.sort(rng.permutation(nb)[:PERM_POINTS])])
        p = _permutation_p(K[np.ix_(keep, keep)], min(na, PERM_POINTS), _mmd_from_gram, n_perm, rng)
    return TwoSampleReport("mmd_rbf", value, se, len(a), len(b), p, sub, value < 0)


@dataclass(frozen=True)
class Moments:
    """Per-coordinate sample mean and variance with their standard errors."""

    mean: np.ndarray
    var: np.ndarray
    mean_se: np.ndarray
    var_se: np.ndarray
    n: int

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


def moments(cloud) -> Moments:
    x = _as_samples(cloud)
    n = len(x)
    if n < 2:
        raise ValueError("moments need at least 2 points")
    m = x.mean(axis=0)
    c = x - m
    v = np.mean(c * c, axis=0) * n / (n - 1)
    m4 = np.mean(c**4, axis=0)
    return Moments(m, v, np.sqrt(v / n), np.sqrt(np.maximum(m4 - v * v, 0.0) / n), n)


def isotropic_fit(cloud) -> GaussianState:
    x = _as_samples(cloud)
    n, k = x.shape
    if n < k + 2:
        raise ValueError(f"an isotropic fit in {k} dimensions needs at least {k + 2} points")
    var = float(np.mean(np.var(x, axis=0, ddof=1)))
    if not var > 0:
        raise ValueError("degenerate cloud: zero variance")
    return GaussianState(x.mean(axis=0), var)


def gaussian_fit_kl(cloud, reference: GaussianState) -> float:
    """``KL(fit || reference)`` where ``fit`` is the moment-matched isotropic Gaussian."""
    return kl_gaussian(isotropic_fit(cloud), reference)
